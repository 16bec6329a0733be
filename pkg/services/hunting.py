import logging
from typing import Sequence

from models import Graph
from schemas import HuntEntry, HuntReport, IocRule
from services.embed import EmbeddingTable
from services.evalkit import classify
from services.gnn import MatchingModel, forward
from services.reduce import SuspGraph, expand_search, reduction_input

logger = logging.getLogger(__name__)


def rank(suspicious: Sequence[SuspGraph], scores: Sequence[float], threshold: float) -> list[HuntEntry]:
    """ Highest score first; equal scores keep reduction order. """
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [
        HuntEntry(
            rank=position,
            index=i,
            score=scores[i],
            verdict=classify(scores[i], threshold).value,
            nodes=len(suspicious[i].subgraph),
            edges=suspicious[i].subgraph.edge_count,
            covered_iocs=sorted(suspicious[i].covered_iocs),
            uncovered_iocs=sorted(suspicious[i].uncovered_iocs),
        )
        for position, i in enumerate(order, start=1)
    ]


def hunt(
    prov_graph: Graph,
    rules: Sequence[IocRule],
    query: Graph,
    model: MatchingModel,
    table: EmbeddingTable,
    threshold: float = 0.5,
    query_name: str = "query",
) -> tuple[HuntReport, list[SuspGraph]]:
    """
    **Threat Hunt**

    IOC marking, reduction to suspicious subgraphs, and one matching score per
    subgraph against `query`, ranked.
    """
    suspicious = expand_search(reduction_input(prov_graph, rules))
    scores = [forward(query, item.subgraph, table, model) for item in suspicious]
    entries = rank(suspicious, scores, threshold)
    hits = sum(entry.verdict == "match" for entry in entries)
    logger.info(f"Hunt over {len(suspicious)} suspicious subgraph(s): {hits} match(es) above {threshold}")
    return HuntReport(query=query_name, threshold=threshold, entries=entries), suspicious
