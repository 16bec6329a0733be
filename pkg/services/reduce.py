import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

from errors import EmptySeedError
from models import Graph, NodeKind
from schemas import IocRule
from services.ingest import mark_suspicious, matched_nodes

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReductionInput:
    """ Graph plus indicator set I and matched-node map P """
    graph: Graph
    indicators: frozenset[str]
    matched: dict[str, frozenset[str]]

    def __post_init__(self) -> None:
        stray = set(self.matched) - set(self.indicators)
        if stray:
            raise ValueError(f"matched: indicators {sorted(stray)} are not in the indicator set")
        for ioc_id, node_ids in self.matched.items():
            for node_id in node_ids:
                if ioc_id not in self.graph.node(node_id).matched_iocs:
                    raise ValueError(f"matched: node '{node_id}' does not carry '{ioc_id}'")

    @property
    def coverable(self) -> frozenset[str]:
        return frozenset(ioc for ioc, nodes in self.matched.items() if nodes)

    @property
    def uncoverable(self) -> frozenset[str]:
        return self.indicators - self.coverable


@dataclass
class SuspGraph:
    subgraph: Graph
    covered_iocs: set[str]
    uncovered_iocs: set[str] = field(default_factory=set)
    seed_trace: list[str] = field(default_factory=list)


def reduction_input(graph: Graph, rules: Iterable[IocRule]) -> ReductionInput:
    """ Mark the graph with `rules` and collect I and P from the result. """
    rules = list(rules)
    mark_suspicious(graph, rules)
    indicators = frozenset(rule.ioc_id for rule in rules)
    matches = {ioc: frozenset(nodes) for ioc, nodes in matched_nodes(graph).items() if ioc in indicators}
    return ReductionInput(graph=graph, indicators=indicators, matched=matches)


def select_seeds(data: ReductionInput) -> set[str]:
    """ Matched nodes of the rarest indicator; ties go to the smallest ioc_id. """
    candidates = [(len(nodes), ioc) for ioc, nodes in data.matched.items() if nodes]
    if not candidates:
        raise EmptySeedError("indicators: no indicator matched any node")
    _, ioc = min(candidates)
    return set(data.matched[ioc])


def _adaptive_closure(graph: Graph, starts: Iterable[str], allowed: set[str]) -> list[str]:
    queue = deque(sorted(set(starts)))
    visited = set(queue)
    order: list[str] = []
    while queue:
        current = queue.popleft()
        order.append(current)
        for other in graph.neighbor_ids(current, "both"):
            if other in visited:
                continue
            node = graph.node(other)
            if node.kind is NodeKind.PROCESS or node.suspicious or other in allowed:
                visited.add(other)
                queue.append(other)
    return order


def adaptive_bfs(graph: Graph, start: str, matched: dict[str, frozenset[str]] | None = None) -> Graph:
    """
    **Adaptive BFS**

    Breadth-first over both edge directions. A neighbor is only entered when
    it is a process or a suspicious node (matched nodes in `matched` count as
    suspicious). Returns the induced subgraph of the visited nodes.
    """
    graph.node(start)
    allowed = set().union(*matched.values()) if matched else set()
    return graph.subgraph(_adaptive_closure(graph, [start], allowed))


def _covered(graph: Graph, node_ids: Iterable[str]) -> set[str]:
    covered: set[str] = set()
    for node_id in node_ids:
        covered |= graph.node(node_id).matched_iocs
    return covered


def expand_search(data: ReductionInput) -> list[SuspGraph]:
    """
    **Provenance Graph Reduction**

    For each seed (sorted), grow a suspicious subgraph with `adaptive_bfs`.
    While some coverable indicator is still missing, the matched nodes of the
    missing indicators that were not visited yet become the next seeds and
    their closures are composed in. Components are unioned, so the result
    may be disconnected. Indicators without any match are reported, not
    fatal. Each seed yields one subgraph; identical node sets are emitted once.
    """
    graph = data.graph
    seeds = sorted(select_seeds(data))
    allowed = set().union(*data.matched.values())
    coverable = data.coverable
    uncoverable = data.uncoverable
    if uncoverable:
        logger.warning(f"Indicators with no match in the graph: {sorted(uncoverable)}")

    results: list[SuspGraph] = []
    seen: set[frozenset[str]] = set()
    for seed in seeds:
        trace = [seed]
        visited = set(_adaptive_closure(graph, [seed], allowed))
        while True:
            missing = coverable - _covered(graph, visited)
            if not missing:
                break
            remain = sorted(set().union(*(data.matched[ioc] for ioc in missing)) - visited)
            if not remain:
                break
            trace.extend(remain)
            visited |= set(_adaptive_closure(graph, remain, allowed))

        key = frozenset(visited)
        if key in seen:
            continue
        seen.add(key)
        subgraph = graph.subgraph(visited)
        covered = _covered(graph, visited)
        results.append(
            SuspGraph(
                subgraph=subgraph,
                covered_iocs=covered,
                uncovered_iocs=set(data.indicators) - covered,
                seed_trace=trace,
            )
        )
    logger.info(f"Reduction produced {len(results)} suspicious subgraph(s) from {len(seeds)} seed(s)")
    return results
