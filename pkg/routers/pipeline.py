import logging
from pathlib import Path
from typing import Annotated, Optional

import typer
from tqdm import tqdm

from config import NoiseConfig
from dependencies import get_settings, seed_for, show_progress
from errors import MissingFileError, StreamReadError
from schemas import CoverageReport, SuspGraphEntry
from services.embed import EmbeddingTable, paths_to_sentences, train_skipgram
from services.ingest import build_graph, mark_suspicious, parse_events
from services.reduce import expand_search, reduction_input, select_seeds
from services.synth import attack_query, synthesize
from services.trainset import make_dataset
from storage import load_graph, load_rules, read_model, save_graph, save_rules, write_model

logger = logging.getLogger(__name__)


# --- SYNTHETIC DATA ---
def synth(
    ctx: typer.Context,
    out: Annotated[Path, typer.Option(help="Event stream to write (JSONL).")],
    hosts: Annotated[int, typer.Option(min=1, help="Number of simulated hosts.")] = 20,
    seed: Annotated[Optional[int], typer.Option(help="Overrides the global --seed.")] = None,
    rules_out: Annotated[Optional[Path], typer.Option(help="Where to write the IOC rules.")] = None,
    query_out: Annotated[Optional[Path], typer.Option(help="Where to write the attack query graph.")] = None,
):
    """
    **Synthesize Audit Events**

    Benign host activity with one planted multi-stage miner attack.
    """
    settings = get_settings(ctx, seed=seed)
    result = synthesize(hosts, seed_for(settings, "synth"))
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as handle:
        for event in result.events:
            handle.write(event.model_dump_json(by_alias=True) + "\n")
    if rules_out is not None:
        save_rules(rules_out, result.rules)
    if query_out is not None:
        save_graph(query_out, attack_query())
    typer.echo(f"Wrote {len(result.events)} events for {hosts} host(s) to {out}")


# --- INGEST ---
def ingest(
    ctx: typer.Context,
    events: Annotated[Path, typer.Option(help="Audit event stream (JSONL).")],
    out: Annotated[Path, typer.Option(help="Provenance graph to write.")],
    rules: Annotated[Optional[Path], typer.Option(help="IOC rules used to flag suspicious nodes.")] = None,
):
    """
    **Build Provenance Graph**

    Parses the event stream (malformed lines are skipped and counted) and
    optionally flags nodes matching the IOC rules.
    """
    get_settings(ctx)
    if not events.is_file():
        raise MissingFileError(f"{events}: file not found")
    try:
        with events.open("rb") as handle:
            parsed = parse_events(handle)
    except OSError as exc:
        raise StreamReadError(f"{events}: {exc}") from exc

    graph = build_graph(parsed.events)
    flagged = mark_suspicious(graph, load_rules(rules)) if rules is not None else 0
    save_graph(out, graph)
    typer.echo(
        f"Graph: {len(graph)} nodes, {graph.edge_count} edges, {flagged} suspicious; "
        f"skipped {parsed.skipped} line(s) -> {out}"
    )


# --- REDUCE ---
def reduce_graph(
    ctx: typer.Context,
    graph: Annotated[Path, typer.Option(help="Provenance graph.")],
    rules: Annotated[Path, typer.Option(help="IOC rules.")],
    out_dir: Annotated[Path, typer.Option(help="Directory for suspicious subgraphs and coverage.json.")],
):
    """
    **Reduce to Suspicious Subgraphs**

    Seeds from the rarest matched indicator and grows each seed until every
    coverable indicator is covered.
    """
    get_settings(ctx)
    data = reduction_input(load_graph(graph), load_rules(rules))
    suspicious = expand_search(data)

    entries = []
    for index, item in enumerate(suspicious):
        name = f"susp_{index:03d}.json"
        save_graph(out_dir / name, item.subgraph)
        entries.append(
            SuspGraphEntry(
                file=name,
                nodes=len(item.subgraph),
                edges=item.subgraph.edge_count,
                covered_iocs=sorted(item.covered_iocs),
                uncovered_iocs=sorted(item.uncovered_iocs),
                seed_trace=item.seed_trace,
            )
        )
    report = CoverageReport(
        indicators=sorted(data.indicators),
        matched_counts={ioc: len(nodes) for ioc, nodes in sorted(data.matched.items())},
        seeds=sorted(select_seeds(data)),
        subgraphs=entries,
    )
    write_model(out_dir / "coverage.json", report)
    typer.echo(f"Wrote {len(entries)} suspicious subgraph(s) to {out_dir}")


# --- EMBED ---
def embed(
    ctx: typer.Context,
    graph: Annotated[list[Path], typer.Option(help="Graph(s) to build the token corpus from. Repeatable.")],
    out: Annotated[Path, typer.Option(help="Embedding table to write.")],
    dim: Annotated[Optional[int], typer.Option(min=2, help="Vector width d_w.")] = None,
    epochs: Annotated[Optional[int], typer.Option(min=1, help="Skip-gram epochs.")] = None,
    window: Annotated[Optional[int], typer.Option(min=1, help="Skip-gram context window.")] = None,
    seed: Annotated[Optional[int], typer.Option(help="Overrides the global --seed.")] = None,
):
    """
    **Train Attribute Embeddings**

    Turns every short path into a sentence and fits skip-gram vectors, or
    builds a one-hot table when the model runs in one-hot feature mode.
    """
    settings = get_settings(ctx, seed=seed, embed={"dim": dim, "epochs": epochs, "window": window})
    sentences = []
    for path in tqdm(graph, desc="embed corpus", disable=not show_progress(ctx)):
        sentences.extend(paths_to_sentences(load_graph(path), settings.embed.max_path_len))

    if settings.model.feature_mode == "onehot":
        vocab = sorted({token for sentence in sentences for token in sentence})
        table = EmbeddingTable.one_hot(vocab)
    else:
        table = train_skipgram(
            sentences,
            d_w=settings.embed.dim,
            window=settings.embed.window,
            negatives=settings.embed.negatives,
            epochs=settings.embed.epochs,
            seed=seed_for(settings, "embed"),
        )
    write_model(out, table.to_manifest())
    typer.echo(f"Embedded {len(table.vocab)} tokens (d_w={table.d_w}) from {len(sentences)} sentences -> {out}")


# --- TRAINING DATA ---
def gen_train(
    ctx: typer.Context,
    graph: Annotated[list[Path], typer.Option(help="Provenance graph(s) to sample from. Repeatable.")],
    out_dir: Annotated[Path, typer.Option(help="Dataset directory, one JSON file per pair.")],
    pos: Annotated[int, typer.Option(min=0, help="Number of positive pairs.")] = 100,
    neg: Annotated[int, typer.Option(min=0, help="Number of negative pairs.")] = 100,
    noise: Annotated[Optional[Path], typer.Option(help="NoiseConfig JSON.")] = None,
    seed: Annotated[Optional[int], typer.Option(help="Overrides the global --seed.")] = None,
):
    """
    **Generate Training Pairs**

    Positives are extracted subgraphs with a summarized, noised view as the
    query. Negatives recombine a subgraph with another extraction's query.
    """
    overrides = {"seed": seed}
    if noise is not None:
        overrides["trainset"] = {"noise": read_model(noise, NoiseConfig).model_dump()}
    settings = get_settings(ctx, **overrides)
    samples = make_dataset(
        [load_graph(path) for path in graph],
        n_pos=pos,
        n_neg=neg,
        noise=settings.trainset.noise,
        seed=seed_for(settings, "gen-train"),
        max_len=settings.trainset.max_path_len,
        max_name_overlap=settings.trainset.max_name_overlap,
        progress=show_progress(ctx),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    for index, sample in enumerate(samples):
        write_model(out_dir / f"sample_{index:05d}.json", sample.to_file())
    typer.echo(f"Wrote {len(samples)} pairs ({pos} positive, {neg} negative) to {out_dir}")
