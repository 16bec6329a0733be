from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Literal

import networkx as nx

from errors import DuplicateNodeError, IllegalAttributeError, IllegalRelationError, UnknownNodeError

Direction = Literal["out", "in", "both"]


# --- ENUMS ---
class NodeKind(str, enum.Enum):
    PROCESS = "process"   # the only subject kind
    FILE = "file"
    SOCKET = "socket"
    REGISTRY = "registry"


class Relation(str, enum.Enum):
    FORK = "fork"
    READ = "read"
    WRITE = "write"
    RECV = "recv"
    SEND = "send"
    REG_WRITE = "regwrite"


# Object kind -> relations a process may have with it
LEGAL_RELATIONS: dict[NodeKind, frozenset[Relation]] = {
    NodeKind.PROCESS: frozenset({Relation.FORK}),
    NodeKind.FILE: frozenset({Relation.READ, Relation.WRITE}),
    NodeKind.SOCKET: frozenset({Relation.RECV, Relation.SEND}),
    NodeKind.REGISTRY: frozenset({Relation.REG_WRITE}),
}

ATTRIBUTE_KEYS: dict[NodeKind, tuple[str, ...]] = {
    NodeKind.PROCESS: ("name", "args"),
    NodeKind.FILE: ("file_name",),
    NodeKind.SOCKET: ("src_ip", "dst_ip", "src_port", "dst_port"),
    NodeKind.REGISTRY: ("key_name",),
}

ALL_ATTRIBUTE_KEYS = frozenset(key for keys in ATTRIBUTE_KEYS.values() for key in keys)


def is_legal(src_kind: NodeKind, dst_kind: NodeKind, relation: Relation) -> bool:
    return src_kind is NodeKind.PROCESS and relation in LEGAL_RELATIONS[dst_kind]


def normalize_value(value: object) -> str | None:
    if value is None:
        return None
    return str(value).strip().lower()


# --- DOMAIN OBJECTS ---
@dataclass
class Node:
    """
    **Provenance / Query Node**

    One system entity. Attribute values are lowercased on construction so IOC
    patterns and embedding tokens see the same text. A `None` value means the
    attribute is unknown (query graphs built from CTI often leave them empty).
    """
    id: str
    kind: NodeKind
    attrs: dict[str, str | None] = field(default_factory=dict)
    suspicious: bool = False
    matched_iocs: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        self.kind = NodeKind(self.kind)
        allowed = ATTRIBUTE_KEYS[self.kind]
        unknown = set(self.attrs) - set(allowed)
        if unknown:
            raise IllegalAttributeError(
                f"attrs: {sorted(unknown)} not allowed on a {self.kind.value} node"
            )
        # keep the kind's key order so token streams are stable
        self.attrs = {key: normalize_value(self.attrs.get(key)) for key in allowed}
        if self.matched_iocs:
            self.suspicious = True

    def flag(self, ioc_id: str) -> None:
        self.matched_iocs.add(ioc_id)
        self.suspicious = True

    @property
    def name(self) -> str | None:
        """Primary name attribute (process name, file name, key name, socket endpoint)."""
        if self.kind is NodeKind.PROCESS:
            return self.attrs.get("name")
        if self.kind is NodeKind.FILE:
            return self.attrs.get("file_name")
        if self.kind is NodeKind.REGISTRY:
            return self.attrs.get("key_name")
        dst_ip, dst_port = self.attrs.get("dst_ip"), self.attrs.get("dst_port")
        if dst_ip is None and dst_port is None:
            return None
        return f"{dst_ip or '*'}:{dst_port or '*'}"

    @property
    def label(self) -> str:
        """Kind plus primary name; used by GED and the WL kernel."""
        return f"{self.kind.value}:{self.name or ''}"

    def copy(self) -> "Node":
        return Node(
            id=self.id,
            kind=self.kind,
            attrs=dict(self.attrs),
            suspicious=self.suspicious,
            matched_iocs=set(self.matched_iocs),
        )


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    relation: Relation
    ts: int | None = None


class Graph:
    """
    **Attributed Directed Multigraph**

    Shared by provenance graphs and query graphs. Edges always start at a
    process node. Multi-edges and cycles are allowed, and the graph may be
    disconnected. Treat it as read-only once built.
    """

    def __init__(self) -> None:
        self._nodes: dict[str, Node] = {}
        self._edges: list[Edge] = []
        self._out: dict[str, list[tuple[str, Relation]]] = defaultdict(list)
        self._in: dict[str, list[tuple[str, Relation]]] = defaultdict(list)

    # --- construction ---
    def add_node(self, node: Node) -> str:
        if node.id in self._nodes:
            raise DuplicateNodeError(f"id: node '{node.id}' already exists")
        self._nodes[node.id] = node
        return node.id

    def add_edge(
        self, src: str, dst: str, relation: Relation | str, ts: int | None = None
    ) -> int:
        """Append an edge and return its index in the edge list."""
        relation = Relation(relation)
        src_node, dst_node = self.node(src), self.node(dst)
        if not is_legal(src_node.kind, dst_node.kind, relation):
            raise IllegalRelationError(
                f"rel: {relation.value} is not legal from {src_node.kind.value} "
                f"'{src}' to {dst_node.kind.value} '{dst}'"
            )
        self._edges.append(Edge(src, dst, relation, ts))
        self._out[src].append((dst, relation))
        self._in[dst].append((src, relation))
        return len(self._edges) - 1

    # --- queries ---
    def __len__(self) -> int:
        return len(self._nodes)

    def __contains__(self, node_id: object) -> bool:
        return node_id in self._nodes

    @property
    def nodes(self) -> list[Node]:
        return list(self._nodes.values())

    @property
    def node_ids(self) -> list[str]:
        return list(self._nodes)

    @property
    def edges(self) -> list[Edge]:
        return list(self._edges)

    @property
    def edge_count(self) -> int:
        return len(self._edges)

    def node(self, node_id: str) -> Node:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise UnknownNodeError(f"id: unknown node '{node_id}'") from None

    def neighbors(self, node_id: str, direction: Direction = "both") -> list[tuple[str, Relation]]:
        """Adjacent (node id, relation) pairs, sorted by id then relation."""
        self.node(node_id)
        entries: list[tuple[str, Relation]] = []
        if direction in ("out", "both"):
            entries.extend(self._out.get(node_id, ()))
        if direction in ("in", "both"):
            entries.extend(self._in.get(node_id, ()))
        return sorted(entries, key=lambda item: (item[0], item[1].value))

    def neighbor_ids(self, node_id: str, direction: Direction = "both") -> list[str]:
        seen = dict.fromkeys(other for other, _ in self.neighbors(node_id, direction))
        seen.pop(node_id, None)
        return list(seen)

    def relations_between(self, src: str, dst: str) -> list[Relation]:
        return sorted({rel for other, rel in self._out.get(src, ()) if other == dst}, key=lambda r: r.value)

    def paths_up_to(self, start: str, max_len: int) -> list[list[str]]:
        """
        All directed simple paths from `start` with at most `max_len` edges,
        depth-first in sorted neighbor order. Parallel edges give one path.
        """
        self.node(start)
        if max_len < 1:
            raise ValueError("max_len: must be >= 1")
        paths: list[list[str]] = []

        def walk(path: list[str]) -> None:
            paths.append(list(path))
            if len(path) - 1 == max_len:
                return
            for nxt in self.neighbor_ids(path[-1], "out"):
                if nxt not in path:
                    path.append(nxt)
                    walk(path)
                    path.pop()

        walk([start])
        return paths

    def process_ids(self) -> list[str]:
        return [node.id for node in self._nodes.values() if node.kind is NodeKind.PROCESS]

    def subgraph(self, node_ids: Iterable[str]) -> "Graph":
        """Induced subgraph: the given nodes and every edge between them."""
        keep = set(node_ids)
        for node_id in keep:
            self.node(node_id)
        sub = Graph()
        for node in self._nodes.values():
            if node.id in keep:
                sub.add_node(node.copy())
        for edge in self._edges:
            if edge.src in keep and edge.dst in keep:
                sub.add_edge(edge.src, edge.dst, edge.relation, edge.ts)
        return sub

    def copy(self) -> "Graph":
        return self.subgraph(self._nodes)

    def to_networkx(self, simple: bool = False) -> nx.DiGraph | nx.MultiDiGraph:
        """networkx view; `simple=True` collapses parallel edges."""
        graph = nx.DiGraph() if simple else nx.MultiDiGraph()
        for node in self._nodes.values():
            graph.add_node(node.id, kind=node.kind.value, label=node.label)
        for edge in self._edges:
            graph.add_edge(edge.src, edge.dst, rel=edge.relation.value)
        return graph

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        mine = {n.id: (n.kind, n.attrs) for n in self._nodes.values()}
        theirs = {n.id: (n.kind, n.attrs) for n in other._nodes.values()}
        key = lambda e: (e.src, e.dst, e.relation.value, e.ts if e.ts is not None else -1)
        return mine == theirs and sorted(self._edges, key=key) == sorted(other._edges, key=key)

    def __repr__(self) -> str:
        return f"Graph(nodes={len(self._nodes)}, edges={len(self._edges)})"
