import enum
import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import networkx as nx
from sklearn.metrics import roc_auc_score

from errors import EmptyGraphError, ScoreRangeError, SingleClassError
from models import Graph
from schemas import InconsistencyScore

logger = logging.getLogger(__name__)

Alignment = dict[str, set[str]]


class Verdict(str, enum.Enum):
    MATCH = "match"
    NO_MATCH = "no-match"


@dataclass(frozen=True)
class GedResult:
    raw: float
    normalized: float
    approximate: bool = False


# --- ALIGNMENT ---
def align_nodes(query: Graph, prov: Graph) -> Alignment:
    """ Query node -> provenance nodes of the same kind agreeing on every non-null query attribute. """
    alignment: Alignment = {}
    for q in query.nodes:
        wanted = {key: value for key, value in q.attrs.items() if value is not None}
        alignment[q.id] = {
            p.id for p in prov.nodes
            if p.kind is q.kind and all(p.attrs.get(key) == value for key, value in wanted.items())
        }
    return alignment


def missing_nodes(query: Graph, alignment: Alignment) -> tuple[int, float]:
    if len(query) == 0:
        raise EmptyGraphError("query: graph has no nodes")
    count = sum(1 for node_id in query.node_ids if not alignment.get(node_id))
    return count, count / len(query)


def _reachable(graph: nx.DiGraph, source: str) -> set[str]:
    # paths of at least one edge
    found: set[str] = set()
    for successor in graph.successors(source):
        found.add(successor)
        found |= nx.descendants(graph, successor)
    return found


def missing_paths(query: Graph, prov: Graph, alignment: Alignment) -> tuple[int, float]:
    """
    A query edge (i, j) is missing when no directed provenance path leads from
    a node aligned to i to a node aligned to j. Relations are ignored.
    """
    if query.edge_count == 0:
        return 0, 0.0
    view = prov.to_networkx(simple=True)
    reach_cache: dict[str, set[str]] = {}
    count = 0
    for edge in query.edges:
        sources, targets = alignment.get(edge.src, set()), alignment.get(edge.dst, set())
        found = False
        for source in sorted(sources):
            if source not in reach_cache:
                reach_cache[source] = _reachable(view, source)
            if reach_cache[source] & targets:
                found = True
                break
        count += not found
    return count, count / query.edge_count


# --- GRAPH EDIT DISTANCE ---
def _label_match(a: dict, b: dict) -> bool:
    return a["label"] == b["label"]


def _bundled(graph: Graph) -> nx.DiGraph:
    """ Simple view where each edge carries the multiplicity of its parallel bundle. """
    view = graph.to_networkx(simple=True)
    counts = Counter((edge.src, edge.dst) for edge in graph.edges)
    for (src, dst), count in counts.items():
        view[src][dst]["count"] = count
    return view


def _bundle_cost(data: dict) -> float:
    return float(data["count"])


def _bundle_subst_cost(a: dict, b: dict) -> float:
    return float(abs(a["count"] - b["count"]))


EDGE_COSTS = {"edge_subst_cost": _bundle_subst_cost, "edge_del_cost": _bundle_cost, "edge_ins_cost": _bundle_cost}


def ged(query: Graph, prov: Graph, max_nodes: int = 12) -> GedResult:
    """
    **Graph Edit Distance**

    Unit costs: inserting or deleting a node or edge costs 1, substituting
    nodes with different kind:name labels costs 1. Parallel edges count one
    each, so matching bundles of k and l edges costs |k - l|. Exact search up
    to `max_nodes` total nodes, beyond that the first edit path found is used
    as an upper bound and flagged.
    """
    g_q, g_p = _bundled(query), _bundled(prov)
    size_q = len(query) + query.edge_count
    size_p = len(prov) + prov.edge_count
    if size_q + size_p == 0:
        raise EmptyGraphError("query, prov: both graphs are empty")

    approximate = False
    if g_q.number_of_nodes() == 0 or g_p.number_of_nodes() == 0:
        raw = float(size_q + size_p)
    elif g_q.number_of_nodes() + g_p.number_of_nodes() <= max_nodes:
        raw = float(nx.graph_edit_distance(g_q, g_p, node_match=_label_match, **EDGE_COSTS))
    else:
        approximate = True
        raw = float(next(nx.optimize_graph_edit_distance(g_q, g_p, node_match=_label_match, **EDGE_COSTS)))
        logger.warning(
            f"GED over {g_q.number_of_nodes() + g_p.number_of_nodes()} nodes exceeds the exact limit "
            f"({max_nodes}); using an upper bound"
        )
    normalized = min(max(raw / (size_q + size_p), 0.0), 1.0)
    return GedResult(raw=raw, normalized=normalized, approximate=approximate)


# --- WL KERNEL ---
def wl_features(graph: Graph, iterations: int) -> Counter:
    """ Histogram of WL subtree labels, tagged with their refinement round. """
    view = graph.to_networkx(simple=True).to_undirected()
    hashes = nx.weisfeiler_lehman_subgraph_hashes(
        view, node_attr="label", iterations=iterations, include_initial_labels=True
    )
    features: Counter = Counter()
    for node_id in view.nodes:
        initial = view.nodes[node_id]["label"]
        features[(0, initial)] += 1
        for depth, value in enumerate(hashes[node_id][1:], start=1):
            features[(depth, value)] += 1
    return features


def wl_similarity(g1: Graph, g2: Graph, iterations: int) -> float:
    """ Cosine-normalized WL subtree kernel. """
    if not 1 <= iterations <= 10:
        raise ValueError("iterations: must be in [1, 10]")
    if len(g1) == 0 or len(g2) == 0:
        raise EmptyGraphError("graph: WL kernel needs non-empty graphs")
    f1, f2 = wl_features(g1, iterations), wl_features(g2, iterations)
    cross = sum(count * f2[key] for key, count in f1.items())
    norm = math.sqrt(sum(c * c for c in f1.values()) * sum(c * c for c in f2.values()))
    return cross / norm


# --- SCORING ---
def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """ ROC AUC; ties count one half. """
    if len(set(int(label) for label in labels)) < 2:
        raise SingleClassError("labels: AUC needs both positive and negative samples")
    return float(roc_auc_score(list(labels), list(scores)))


def classify(score: float, threshold: float = 0.5) -> Verdict:
    if not 0.0 <= score <= 1.0:
        raise ScoreRangeError(f"score: {score} is outside [0, 1]")
    return Verdict.MATCH if score > threshold else Verdict.NO_MATCH


def false_positive_count(scores: Iterable[float], labels: Iterable[int], threshold: float = 0.5) -> int:
    """ Benign (label 0) samples that would still raise a match. """
    return sum(1 for score, label in zip(scores, labels) if int(label) == 0 and score > threshold)


def wl_auc_by_iterations(
    pairs: Sequence[tuple[Graph, Graph]],
    labels: Sequence[int],
    iterations: Iterable[int] = range(1, 11),
) -> dict[int, float]:
    """ Baseline AUC of WL similarity scores, one entry per iteration count. """
    return {
        h: auc([wl_similarity(query, prov, h) for query, prov in pairs], labels)
        for h in iterations
    }


def inconsistency(query: Graph, prov: Graph, max_nodes: int = 12) -> InconsistencyScore:
    alignment = align_nodes(query, prov)
    node_count, node_ratio = missing_nodes(query, alignment)
    path_count, path_ratio = missing_paths(query, prov, alignment)
    distance = ged(query, prov, max_nodes)
    return InconsistencyScore(
        missing_node_count=node_count,
        missing_node_ratio=node_ratio,
        missing_path_count=path_count,
        missing_path_ratio=path_ratio,
        ged_raw=distance.raw,
        ged_norm=distance.normalized,
        ged_approximate=distance.approximate,
    )
