import logging
from pathlib import Path
from typing import Annotated, Optional

import typer
from tqdm import tqdm

from dependencies import emit, get_settings, load_model, parse_range, show_progress
from schemas import EvalReport, PairResult
from services.evalkit import auc, classify, false_positive_count, inconsistency as score_inconsistency
from services.evalkit import wl_auc_by_iterations, wl_similarity
from services.gnn import forward
from storage import graph_from_file, load_graph, load_samples, write_model

logger = logging.getLogger(__name__)


def evaluate(
    ctx: typer.Context,
    model: Annotated[Path, typer.Option(help="Checkpoint written by train.")],
    pairs: Annotated[Path, typer.Option(help="Dataset directory of held-out pairs.")],
    emb: Annotated[Optional[Path], typer.Option(help="Embedding table; defaults to the one in the checkpoint.")] = None,
    baseline: Annotated[Optional[str], typer.Option(help="Also score a baseline. Only 'wl' is known.")] = None,
    wl_iters: Annotated[Optional[str], typer.Option(help="WL iterations, N or N..M within 1..10.")] = None,
    out: Annotated[Optional[Path], typer.Option(help="Where to write the JSON report.")] = None,
    json_output: Annotated[bool, typer.Option("--json", help="Print the JSON report.")] = False,
):
    """
    **Evaluate Model (and WL Baseline)**

    AUC and false positives of the model on the pairs; with `--baseline wl`
    the best WL-kernel AUC over the iteration range as well.
    """
    if baseline not in (None, "wl"):
        raise typer.BadParameter(f"unknown baseline '{baseline}'", param_hint="--baseline")
    settings = get_settings(ctx)
    threshold = settings.evaluation.threshold
    iterations = (
        parse_range(wl_iters)
        if wl_iters is not None
        else range(settings.evaluation.wl_min_iterations, settings.evaluation.wl_max_iterations + 1)
    )
    network, table = load_model(model, emb)
    samples = load_samples(pairs)

    graphs = [(name, graph_from_file(s.query), graph_from_file(s.prov), s.label) for name, s in samples]
    scores = [
        forward(query, prov, table, network)
        for _, query, prov, _ in tqdm(graphs, desc="eval", disable=not show_progress(ctx))
    ]
    labels = [label for *_, label in graphs]

    wl_by_iterations: dict[int, float] = {}
    wl_best_iterations = None
    if baseline == "wl":
        wl_by_iterations = wl_auc_by_iterations([(q, p) for _, q, p, _ in graphs], labels, iterations)
        wl_best_iterations = max(wl_by_iterations, key=lambda h: (wl_by_iterations[h], -h))

    per_pair = [
        PairResult(
            sample=name,
            label=label,
            score=score,
            verdict=classify(score, threshold).value,
            wl_best=wl_similarity(query, prov, wl_best_iterations) if wl_best_iterations else None,
        )
        for (name, query, prov, label), score in zip(graphs, scores)
    ]
    report = EvalReport(
        model_auc=auc(scores, labels),
        model_false_positives=false_positive_count(scores, labels, threshold),
        threshold=threshold,
        wl_auc_best=wl_by_iterations[wl_best_iterations] if wl_best_iterations else None,
        wl_best_iterations=wl_best_iterations,
        wl_auc_by_iterations=wl_by_iterations,
        per_pair=per_pair,
    )
    if out is not None:
        write_model(out, report)
    summary = f"model_auc={report.model_auc:.4f} false_positives={report.model_false_positives}"
    if report.wl_auc_best is not None:
        summary += f" wl_auc_best={report.wl_auc_best:.4f} (h={wl_best_iterations})"
    emit(report, json_output, summary)


def inconsistency(
    ctx: typer.Context,
    query: Annotated[Path, typer.Option(help="Query graph.")],
    graph: Annotated[Path, typer.Option(help="Provenance graph.")],
    json_output: Annotated[bool, typer.Option("--json", help="Print a JSON result.")] = False,
):
    """
    **Inconsistency Scores**

    Missing nodes, missing paths and graph edit distance between a query
    graph and a provenance graph.
    """
    settings = get_settings(ctx)
    score = score_inconsistency(load_graph(query), load_graph(graph), settings.evaluation.ged_exact_max_nodes)
    summary = (
        f"missing_nodes={score.missing_node_count} ({score.missing_node_ratio:.1%}) "
        f"missing_paths={score.missing_path_count} ({score.missing_path_ratio:.1%}) "
        f"ged={score.ged_raw:g} (norm {score.ged_norm:.4f}{', approx' if score.ged_approximate else ''})"
    )
    emit(score, json_output, summary)
