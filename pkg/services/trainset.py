import logging
from dataclasses import dataclass, field
from typing import Any, Collection, Optional, Sequence

import numpy as np
from tqdm import tqdm

from config import NoiseConfig, derive_seed
from errors import EmptyGraphError, InsufficientSamplesError, NoiseGuardExhaustedError, NotAProcessError
from models import Edge, Graph, Node, NodeKind
from schemas import SampleFile
from storage import graph_to_file

logger = logging.getLogger(__name__)

MAX_NOISE_RESAMPLES = 100


@dataclass
class GraphPairSample:
    prov: Graph
    query: Graph
    label: int
    note: dict[str, Any] = field(default_factory=dict)

    def to_file(self) -> SampleFile:
        return SampleFile(prov=graph_to_file(self.prov), query=graph_to_file(self.query), label=self.label, note=self.note)


# --- EXTRACTION ---
def extract_subgraph(graph: Graph, start: str, max_len: int = 3) -> Graph:
    """ Induced subgraph over every out-path from `start` with at most `max_len` edges. """
    if graph.node(start).kind is not NodeKind.PROCESS:
        raise NotAProcessError(f"start: node '{start}' is a {graph.node(start).kind.value}, not a process")
    reached: dict[str, None] = {}
    for path in graph.paths_up_to(start, max_len):
        reached.update(dict.fromkeys(path))
    return graph.subgraph(reached)


# --- SUMMARIZATION ---
def _rebuild(graph: Graph, node_ids: Sequence[str], edges: Sequence[Edge]) -> Graph:
    out = Graph()
    keep = set(node_ids)
    for node in graph.nodes:
        if node.id in keep:
            out.add_node(node.copy())
    for edge in edges:
        out.add_edge(edge.src, edge.dst, edge.relation, edge.ts)
    return out


def merge_processes(graph: Graph) -> Graph:
    """
    Collapse process nodes sharing a name into the smallest id among them.
    The survivor inherits every edge; loops created by the merge are dropped.
    Unnamed processes are left alone.
    """
    groups: dict[str, list[str]] = {}
    for node in graph.nodes:
        if node.kind is NodeKind.PROCESS and node.name is not None:
            groups.setdefault(node.name, []).append(node.id)
    alias: dict[str, str] = {}
    for members in groups.values():
        head = min(members)
        for member in members:
            alias[member] = head

    merged = Graph()
    for node in graph.nodes:
        head = alias.get(node.id, node.id)
        if head != node.id:
            continue
        survivor = node.copy()
        for member, target in alias.items():
            if target == head and member != head:
                survivor.matched_iocs |= graph.node(member).matched_iocs
        survivor.suspicious = survivor.suspicious or bool(survivor.matched_iocs)
        merged.add_node(survivor)
    for edge in graph.edges:
        src, dst = alias.get(edge.src, edge.src), alias.get(edge.dst, edge.dst)
        if src == dst and edge.src != edge.dst:
            continue
        merged.add_edge(src, dst, edge.relation, edge.ts)
    return merged


def _roots(graph: Graph) -> list[str]:
    """ In-degree-zero nodes, plus one representative per cycle nothing else reaches. """
    has_parent = {edge.dst for edge in graph.edges if edge.src != edge.dst}
    roots = [node_id for node_id in sorted(graph.node_ids) if node_id not in has_parent]
    reached: set[str] = set()

    def reach(start: str) -> None:
        stack = [start]
        while stack:
            current = stack.pop()
            if current in reached:
                continue
            reached.add(current)
            stack.extend(graph.neighbor_ids(current, "out"))

    for root in roots:
        reach(root)
    for node_id in sorted(graph.node_ids):
        if node_id not in reached:
            roots.append(node_id)
            reach(node_id)
    return roots


def _maximal_paths(graph: Graph) -> list[tuple[str, tuple[int, ...]]]:
    """ (root, edge indices) of every maximal simple path from every root. """
    out_edges: dict[str, list[int]] = {}
    for index, edge in enumerate(graph.edges):
        out_edges.setdefault(edge.src, []).append(index)
    edges = graph.edges
    paths: list[tuple[str, tuple[int, ...]]] = []

    def walk(root: str, on_path: list[str], trail: list[int]) -> None:
        extended = False
        for index in out_edges.get(on_path[-1], ()):
            nxt = edges[index].dst
            if nxt in on_path:
                continue
            extended = True
            on_path.append(nxt)
            trail.append(index)
            walk(root, on_path, trail)
            trail.pop()
            on_path.pop()
        if not extended:
            paths.append((root, tuple(trail)))

    for root in _roots(graph):
        walk(root, [root], [])
    return paths


def dedupe_paths(graph: Graph) -> Graph:
    """
    One pass of duplicate-path removal. Root-to-leaf paths with the same
    sequence of node names keep only the path with the smallest edge indices;
    edges and nodes on no kept path are removed.
    """
    edges = graph.edges
    kept: dict[tuple[str, ...], tuple[tuple[int, ...], str]] = {}
    for root, trail in _maximal_paths(graph):
        names = [graph.node(root).label] + [graph.node(edges[i].dst).label for i in trail]
        key = tuple(names)
        candidate = (trail, root)
        if key not in kept or candidate < kept[key]:
            kept[key] = candidate

    keep_edges: set[int] = set()
    keep_nodes: set[str] = set()
    for trail, root in kept.values():
        keep_nodes.add(root)
        for index in trail:
            keep_edges.add(index)
            keep_nodes.update((edges[index].src, edges[index].dst))
    node_order = [node_id for node_id in graph.node_ids if node_id in keep_nodes]
    return _rebuild(graph, node_order, [edge for i, edge in enumerate(edges) if i in keep_edges])


def summarize(graph: Graph) -> Graph:
    """
    **Graph Summarization**

    Merges same-name processes, then removes duplicate paths until nothing
    changes, so applying it twice gives the same graph.
    """
    current = merge_processes(graph)
    while True:
        reduced = dedupe_paths(current)
        if len(reduced) == len(current) and reduced.edge_count == current.edge_count:
            return reduced
        current = reduced


# --- NOISE ---
def add_noise(graph: Graph, config: NoiseConfig) -> Graph:
    """
    **Noise Injection**

    Independently drops edges, drops object nodes (process nodes are kept) and
    nulls attribute values, all from one seeded generator. A draw that leaves
    no node or no process is thrown away and redrawn.

    **Raises:** `NoiseGuardExhaustedError` after 100 rejected draws.
    """
    if len(graph) < 2:
        raise EmptyGraphError(f"graph: add_noise needs at least 2 nodes, got {len(graph)}")
    rng = np.random.default_rng(config.seed)
    nodes, edges = graph.nodes, graph.edges

    for _ in range(MAX_NOISE_RESAMPLES):
        edge_kept = rng.random(len(edges)) >= config.p_drop_edge
        node_dropped = rng.random(len(nodes)) < config.p_drop_object_node
        survivors: list[Node] = []
        for node, dropped in zip(nodes, node_dropped):
            if dropped and node.kind is not NodeKind.PROCESS:
                continue
            survivors.append(node)
        if not survivors or not any(node.kind is NodeKind.PROCESS for node in survivors):
            continue

        noisy = Graph()
        for node in survivors:
            clone = node.copy()
            nulled = rng.random(len(clone.attrs)) < config.p_drop_attr
            for key, drop in zip(list(clone.attrs), nulled):
                if drop:
                    clone.attrs[key] = None
            noisy.add_node(clone)
        for edge, kept in zip(edges, edge_kept):
            if kept and edge.src in noisy and edge.dst in noisy:
                noisy.add_edge(edge.src, edge.dst, edge.relation, edge.ts)
        return noisy

    raise NoiseGuardExhaustedError(f"noise: no valid draw in {MAX_NOISE_RESAMPLES} attempts")


def _make_query(prov: Graph, noise: NoiseConfig, seed: int) -> Graph:
    summary = summarize(prov)
    if len(summary) < 2:
        return summary
    return add_noise(summary, noise.model_copy(update={"seed": seed}))


def _name_overlap(query: Graph, prov: Graph) -> float:
    names = [node.label for node in query.nodes if node.name is not None]
    if not names:
        return 0.0
    prov_names = {node.label for node in prov.nodes}
    return sum(name in prov_names for name in names) / len(names)


# --- DATASET ---
PoolKey = tuple[int, str]


def extraction_pool(
    graphs: Sequence[Graph], max_len: int = 3, starts: Optional[Collection[PoolKey]] = None
) -> list[tuple[int, str, Graph]]:
    """
    (graph index, start, extraction) for every process that reaches another
    node. Starts whose extraction covers the same nodes as an earlier start
    are dropped, so no two pool entries are the same graph. `starts` limits
    the pool to the given (graph index, process id) keys.
    """
    pool: list[tuple[int, str, Graph]] = []
    seen: set[tuple[int, frozenset[str]]] = set()
    for graph_index, graph in enumerate(graphs):
        for start in sorted(graph.process_ids()):
            if starts is not None and (graph_index, start) not in starts:
                continue
            extraction = extract_subgraph(graph, start, max_len)
            key = (graph_index, frozenset(extraction.node_ids))
            if len(extraction) < 2 or key in seen:
                continue
            seen.add(key)
            pool.append((graph_index, start, extraction))
    return pool


def split_starts(
    prov_graphs: Graph | Sequence[Graph], holdout: float, seed: int, max_len: int = 3
) -> tuple[set[PoolKey], set[PoolKey]]:
    """
    **Held-out Split**

    Seeded partition of the extraction pool into training and held-out start
    keys. Feeding each side to `make_dataset(starts=...)` gives two datasets
    that share no provenance graph.

    **Raises:** `InsufficientSamplesError` when either side would be empty.
    """
    if not 0.0 < holdout < 1.0:
        raise ValueError(f"holdout: {holdout} is not within (0, 1)")
    pool = extraction_pool(_as_graphs(prov_graphs), max_len)
    n_held = round(len(pool) * holdout)
    if n_held < 1 or n_held >= len(pool):
        raise InsufficientSamplesError(f"prov_graphs: {len(pool)} extraction(s) cannot be split at {holdout}")
    order = np.random.default_rng(seed).permutation(len(pool))
    keys = [pool[int(index)][:2] for index in order]
    return set(keys[n_held:]), set(keys[:n_held])


def _as_graphs(prov_graphs: Graph | Sequence[Graph]) -> list[Graph]:
    return [prov_graphs] if isinstance(prov_graphs, Graph) else list(prov_graphs)


def make_dataset(
    prov_graphs: Graph | Sequence[Graph],
    n_pos: int,
    n_neg: int,
    noise: NoiseConfig,
    seed: int,
    max_len: int = 3,
    max_name_overlap: float = 0.9,
    progress: bool = False,
    starts: Optional[Collection[PoolKey]] = None,
) -> list[GraphPairSample]:
    """
    **Training Pair Generation**

    Positives pair an extraction with a summarized, noised view of itself.
    Negatives pair extraction i with the query of a different extraction j;
    pairs whose query names mostly reappear in the provenance side are
    redrawn. Each query gets its own derived noise seed and the final order
    is a seeded shuffle, so the dataset is a pure function of its inputs.
    `starts` restricts sampling to one side of `split_starts`.
    """
    graphs = _as_graphs(prov_graphs)
    pool = extraction_pool(graphs, max_len, starts)
    if not pool:
        raise InsufficientSamplesError("prov_graphs: no process start reaches another node")
    if n_neg > 0 and len(pool) < 2:
        raise InsufficientSamplesError("prov_graphs: negatives need at least 2 distinct extractions")
    logger.info(f"Extraction pool: {len(pool)} subgraphs from {len(graphs)} graph(s)")

    rng = np.random.default_rng(seed)
    noise_note = noise.model_dump(exclude={"seed"})
    samples: list[GraphPairSample] = []

    bar = tqdm(total=n_pos + n_neg, desc="gen-train", disable=not progress)
    for k in range(n_pos):
        i = int(rng.integers(len(pool)))
        _, start, prov = pool[i]
        noise_seed = derive_seed(seed, f"pos:{k}")
        samples.append(
            GraphPairSample(
                prov=prov,
                query=_make_query(prov, noise, noise_seed),
                label=1,
                note={"seed": noise_seed, "noise": noise_note, "prov_index": i, "query_index": i, "start": start},
            )
        )
        bar.update()

    attempts, found = 0, 0
    budget = 100 * max(n_neg, 1)
    while found < n_neg:
        attempts += 1
        if attempts > budget:
            raise InsufficientSamplesError(f"prov_graphs: only found {found} of {n_neg} dissimilar negatives")
        i, j = (int(x) for x in rng.choice(len(pool), size=2, replace=False))
        noise_seed = derive_seed(seed, f"neg:{attempts}")
        query = _make_query(pool[j][2], noise, noise_seed)
        if _name_overlap(query, pool[i][2]) > max_name_overlap:
            continue
        samples.append(
            GraphPairSample(
                prov=pool[i][2],
                query=query,
                label=0,
                note={"seed": noise_seed, "noise": noise_note, "prov_index": i, "query_index": j, "start": pool[i][1]},
            )
        )
        found += 1
        bar.update()
    bar.close()

    order = rng.permutation(len(samples))
    return [samples[int(index)] for index in order]
