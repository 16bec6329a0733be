import logging
from pathlib import Path
from typing import Annotated, Optional

import typer

from dependencies import emit, get_settings, load_model, load_table, seed_for, show_progress
from errors import TrainingDivergedError
from schemas import MatchResult
from services.evalkit import classify
from services.gnn import forward
from services.hunting import hunt as run_hunt
from services.trainer import load_state, prepare_pairs, save_checkpoint, train as fit
from storage import load_graph, load_rules, load_samples, write_model

logger = logging.getLogger(__name__)


def train(
    ctx: typer.Context,
    pairs: Annotated[Path, typer.Option(help="Dataset directory written by gen-train.")],
    emb: Annotated[Path, typer.Option(help="Embedding table written by embed.")],
    out: Annotated[Path, typer.Option(help="Checkpoint to write.")],
    epochs: Annotated[Optional[int], typer.Option(min=0)] = None,
    lr: Annotated[Optional[float], typer.Option(min=0.0)] = None,
    batch_size: Annotated[Optional[int], typer.Option(min=1)] = None,
    config: Annotated[Optional[Path], typer.Option(help="Run config JSON; replaces the global --config.")] = None,
    seed: Annotated[Optional[int], typer.Option(help="Overrides the global --seed.")] = None,
):
    """
    **Train Matching Model**

    Mini-batch SGD on the labelled pairs. If the loss diverges, the last good
    epoch is still written to `--out` before exiting with status 2.
    """
    settings = get_settings(
        ctx, config=config, seed=seed, train={"epochs": epochs, "lr": lr, "batch_size": batch_size}
    )
    table = load_table(emb)
    # the network's input width follows the embedding table
    model_config = settings.model.model_copy(update={"input_dim": table.d_w})
    examples = prepare_pairs(load_samples(pairs), table)

    try:
        result = fit(
            examples,
            model_config,
            settings.train,
            seed=seed_for(settings, "train"),
            threshold=settings.evaluation.threshold,
            progress=show_progress(ctx),
        )
    except TrainingDivergedError as exc:
        save_checkpoint(out, load_state(model_config, exc.last_good_state), exc.history or [], table)
        raise

    save_checkpoint(out, result.model, result.history, table)
    final = result.history[-1]["train_loss"] if result.history else None
    typer.echo(f"Trained on {len(examples)} pairs for {len(result.history)} epoch(s), final loss {final} -> {out}")


def match(
    ctx: typer.Context,
    model: Annotated[Path, typer.Option(help="Checkpoint written by train.")],
    query: Annotated[Path, typer.Option(help="Query graph.")],
    graph: Annotated[Path, typer.Option(help="Provenance (sub)graph.")],
    emb: Annotated[Optional[Path], typer.Option(help="Embedding table; defaults to the one in the checkpoint.")] = None,
    json_output: Annotated[bool, typer.Option("--json", help="Print a JSON result.")] = False,
):
    """
    **Match Query Against Provenance Graph**

    Prints the matching score and the verdict at the configured threshold.
    """
    settings = get_settings(ctx)
    network, table = load_model(model, emb)
    score = forward(load_graph(query), load_graph(graph), table, network)
    verdict = classify(score, settings.evaluation.threshold)
    emit(MatchResult(score=score, verdict=verdict.value), json_output, f"score={score:.6f} verdict={verdict.value}")


def hunt(
    ctx: typer.Context,
    graph: Annotated[Path, typer.Option(help="Provenance graph.")],
    rules: Annotated[Path, typer.Option(help="IOC rules.")],
    query: Annotated[Path, typer.Option(help="Query graph.")],
    model: Annotated[Path, typer.Option(help="Checkpoint written by train.")],
    out: Annotated[Path, typer.Option(help="Hunt report to write.")],
    emb: Annotated[Optional[Path], typer.Option(help="Embedding table; defaults to the one in the checkpoint.")] = None,
):
    """
    **Threat Hunt**

    Reduces the graph to suspicious subgraphs and ranks them by matching
    score against the query.
    """
    settings = get_settings(ctx)
    network, table = load_model(model, emb)
    report, _ = run_hunt(
        load_graph(graph),
        load_rules(rules),
        load_graph(query),
        network,
        table,
        threshold=settings.evaluation.threshold,
        query_name=query.name,
    )
    write_model(out, report)
    for entry in report.entries:
        typer.echo(f"#{entry.rank} subgraph {entry.index}: score={entry.score:.6f} {entry.verdict} ({entry.nodes} nodes)")
