"""
Long end-to-end checks on a synthetic enterprise of ~2,000 provenance nodes.
Deselected by default; run with `pytest -m slow`.
"""
import json
from typing import NamedTuple

import pytest
from typer.testing import CliRunner

from config import NoiseConfig, Settings, derive_seed
from main import app
from services.embed import paths_to_sentences, train_skipgram
from models import Graph
from services.embed import EmbeddingTable
from services.evalkit import auc, wl_auc_by_iterations
from services.gnn import forward
from services.ingest import build_graph
from services.synth import synthesize
from services.trainer import TrainingResult, predict, prepare_pairs, train
from services.trainset import GraphPairSample, add_noise, make_dataset, split_starts

pytestmark = pytest.mark.slow

N_TRAIN = 2000
N_HELD_OUT = 400
HOLDOUT = 0.2


class Hunted(NamedTuple):
    graph: Graph
    table: EmbeddingTable
    result: TrainingResult
    train_samples: list[GraphPairSample]
    held_out: list[GraphPairSample]
    scores: list[float]


@pytest.fixture(scope="module")
def hunted():
    settings = Settings()
    graph = build_graph(synthesize(n_hosts=45, seed=derive_seed(settings.seed, "synth")).events)
    table = train_skipgram(
        paths_to_sentences(graph, settings.embed.max_path_len),
        d_w=settings.embed.dim,
        window=settings.embed.window,
        negatives=settings.embed.negatives,
        epochs=settings.embed.epochs,
        seed=derive_seed(settings.seed, "embed"),
    )
    train_starts, held_starts = split_starts(graph, HOLDOUT, seed=derive_seed(settings.seed, "split"))
    train_samples = make_dataset(
        graph,
        n_pos=N_TRAIN // 2,
        n_neg=N_TRAIN // 2,
        noise=settings.trainset.noise,
        seed=derive_seed(settings.seed, "gen-train"),
        starts=train_starts,
    )
    held_out = make_dataset(
        graph,
        n_pos=N_HELD_OUT // 2,
        n_neg=N_HELD_OUT // 2,
        noise=settings.trainset.noise,
        seed=derive_seed(settings.seed, "held-out"),
        starts=held_starts,
    )

    model_config = settings.model.model_copy(update={"input_dim": table.d_w})
    result = train(
        prepare_pairs([(f"s{i}", s.to_file()) for i, s in enumerate(train_samples)], table),
        model_config,
        settings.train,
        seed=derive_seed(settings.seed, "train"),
        progress=False,
    )
    held_out_pairs = prepare_pairs([(f"h{i}", s.to_file()) for i, s in enumerate(held_out)], table)
    return Hunted(graph, table, result, train_samples, held_out, predict(result.model, held_out_pairs))


def test_graph_is_desk_scale(hunted):
    assert 1500 <= len(hunted.graph) <= 3000


def test_held_out_pairs_are_unseen(hunted):
    assert len(hunted.held_out) == N_HELD_OUT and len(hunted.train_samples) == N_TRAIN
    held_starts = {sample.note["start"] for sample in hunted.held_out}
    train_starts = {sample.note["start"] for sample in hunted.train_samples}
    assert held_starts and not held_starts & train_starts
    # every prov is an induced subgraph of the one enterprise graph, so its node set identifies it
    train_provs = {frozenset(sample.prov.node_ids) for sample in hunted.train_samples}
    assert not any(frozenset(sample.prov.node_ids) in train_provs for sample in hunted.held_out)


def test_training_converges_and_generalizes(hunted):
    assert hunted.result.history[-1]["train_loss"] < 0.05
    assert auc(hunted.scores, [s.label for s in hunted.held_out]) >= 0.95


def test_matches_survive_missing_nodes_and_edges(hunted):
    positives = [s for s in hunted.held_out if s.label == 1][:100]
    assert len(positives) == 100
    detected = 0
    for i, sample in enumerate(positives):
        damage = NoiseConfig(p_drop_edge=0.2, p_drop_object_node=0.2, p_drop_attr=0.0, seed=i)
        damaged = add_noise(sample.prov, damage)
        detected += forward(sample.query, damaged, hunted.table, hunted.result.model) > 0.5
    assert detected >= 90


def test_model_beats_wl_baseline(hunted):
    labels = [s.label for s in hunted.held_out]
    model_auc = auc(hunted.scores, labels)
    wl_best = max(wl_auc_by_iterations([(s.query, s.prov) for s in hunted.held_out], labels).values())
    assert wl_best <= model_auc - 0.10


def _pipeline(root, config) -> tuple[bytes, bytes]:
    runner = CliRunner()
    common = ["--quiet", "--config", str(config), "--seed", "21"]
    steps = [
        ["synth", "--out", str(root / "events.jsonl"), "--hosts", "3",
         "--rules-out", str(root / "rules.json"), "--query-out", str(root / "query.json")],
        ["ingest", "--events", str(root / "events.jsonl"), "--out", str(root / "graph.json")],
        ["embed", "--graph", str(root / "graph.json"), "--out", str(root / "emb.json")],
        ["gen-train", "--graph", str(root / "graph.json"), "--out-dir", str(root / "pairs"), "--pos", "40", "--neg", "40"],
        ["train", "--pairs", str(root / "pairs"), "--emb", str(root / "emb.json"), "--out", str(root / "model.json")],
        ["eval", "--model", str(root / "model.json"), "--pairs", str(root / "pairs"),
         "--baseline", "wl", "--wl-iters", "1..3", "--out", str(root / "eval.json")],
    ]
    for step in steps:
        result = runner.invoke(app, [*common, *step])
        assert result.exit_code == 0, result.output
    return (root / "model.json").read_bytes(), (root / "eval.json").read_bytes()


def test_pipeline_is_byte_reproducible(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"embed": {"dim": 16, "epochs": 2}, "train": {"epochs": 5}}))
    first, second = tmp_path / "a", tmp_path / "b"
    first.mkdir(), second.mkdir()
    assert _pipeline(first, config) == _pipeline(second, config)
