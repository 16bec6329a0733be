import numpy as np
import pytest

from config import NoiseConfig
from errors import EmptyGraphError, InsufficientSamplesError, NoiseGuardExhaustedError, NotAProcessError
from models import Graph
from services.ingest import build_graph
from services.synth import synthesize
from services.trainset import add_noise, extract_subgraph, extraction_pool, make_dataset, split_starts, summarize
from storage import graph_from_file
from tests.conftest import make_graph


def _names(graph: Graph) -> list[str]:
    return sorted(node.label for node in graph.nodes)


# --- extraction ---
def test_extract_subgraph_keeps_everything_within_reach(chain_graph):
    assert extract_subgraph(chain_graph, "p1", 3) == chain_graph


def test_extract_subgraph_bounds_path_length():
    ids = [f"p{i}" for i in range(6)]
    graph = make_graph([(i, "process", {"name": i}) for i in ids], list(zip(ids, ids[1:], ["fork"] * 5)))
    assert sorted(extract_subgraph(graph, "p0", 3).node_ids) == ["p0", "p1", "p2", "p3"]


def test_extract_subgraph_needs_a_process(chain_graph):
    with pytest.raises(NotAProcessError):
        extract_subgraph(chain_graph, "f1")


# --- summarization ---
def test_summarize_merges_same_name_processes():
    graph = make_graph(
        [
            ("a", "process", {"name": "svchost.exe"}),
            ("b", "process", {"name": "svchost.exe"}),
            ("f", "file", {"file_name": "x.dll"}),
            ("g", "file", {"file_name": "y.log"}),
        ],
        [("a", "f", "read"), ("b", "g", "write")],
    )
    summary = summarize(graph)
    assert sorted(summary.node_ids) == ["a", "f", "g"]
    assert {(e.src, e.dst) for e in summary.edges} == {("a", "f"), ("a", "g")}


def test_summarize_removes_duplicate_paths():
    graph = make_graph(
        [
            ("p", "process", {"name": "word.exe"}),
            ("f1", "file", {"file_name": "a.txt"}),
            ("f2", "file", {"file_name": "a.txt"}),
        ],
        [("p", "f1", "read"), ("p", "f2", "read")],
    )
    summary = summarize(graph)
    assert sorted(summary.node_ids) == ["f1", "p"]
    assert summary.edge_count == 1


def test_summarize_collapses_parallel_edges():
    graph = make_graph(
        [("p", "process", {"name": "a.exe"}), ("f", "file", {"file_name": "x"})],
        [("p", "f", "write"), ("p", "f", "write"), ("p", "f", "write")],
    )
    assert summarize(graph).edge_count == 1


def test_summarize_distinct_names_is_a_fixpoint(chain_graph):
    assert summarize(chain_graph) == chain_graph


def _random_graph(rng) -> Graph:
    n = int(rng.integers(2, 14))
    nodes, edges = [], []
    for i in range(n):
        if i == 0 or rng.random() < 0.5:
            nodes.append((f"n{i}", "process", {"name": f"p{rng.integers(3)}"}))
        else:
            nodes.append((f"n{i}", "file", {"file_name": f"f{rng.integers(3)}"}))
    procs = [node_id for node_id, kind, _ in nodes if kind == "process"]
    kinds = {node_id: kind for node_id, kind, _ in nodes}
    for _ in range(int(rng.integers(1, 2 * n))):
        src, dst = str(rng.choice(procs)), f"n{rng.integers(n)}"
        edges.append((src, dst, "fork" if kinds[dst] == "process" else "write"))
    return make_graph(nodes, edges)


@pytest.mark.parametrize("seed", range(40))
def test_summarize_is_idempotent_and_shrinking(seed):
    graph = _random_graph(np.random.default_rng(seed))
    once = summarize(graph)
    assert summarize(once) == once
    assert len(once) <= len(graph)
    assert once.edge_count <= graph.edge_count
    assert set(_names(once)) <= set(_names(graph))


# --- noise ---
def test_zero_noise_is_identity(attack_graph):
    assert add_noise(attack_graph, NoiseConfig(p_drop_edge=0, p_drop_object_node=0, p_drop_attr=0)) == attack_graph


def test_full_attribute_drop_keeps_kinds(chain_graph):
    noisy = add_noise(chain_graph, NoiseConfig(p_drop_edge=0, p_drop_object_node=0, p_drop_attr=1))
    assert [node.kind for node in noisy.nodes] == [node.kind for node in chain_graph.nodes]
    assert all(value is None for node in noisy.nodes for value in node.attrs.values())
    assert noisy.edges == chain_graph.edges


def test_noise_is_reproducible_and_shrinking():
    nodes = [("p", "process", {"name": "a.exe"})] + [(f"f{i}", "file", {"file_name": f"f{i}"}) for i in range(10)]
    graph = make_graph(nodes, [("p", f"f{i}", "write") for i in range(10)])
    config = NoiseConfig(p_drop_edge=0.2, p_drop_object_node=0.0, p_drop_attr=0.0, seed=123)
    first, second = add_noise(graph, config), add_noise(graph, config)
    assert first == second
    assert set(first.node_ids) <= set(graph.node_ids)
    assert {(e.src, e.dst) for e in first.edges} <= {(e.src, e.dst) for e in graph.edges}

    # the surviving edge set is exactly the seeded draw
    keep = np.random.default_rng(123).random(10) >= 0.2
    assert [e.dst for e in first.edges] == [f"f{i}" for i in range(10) if keep[i]]


def test_noise_never_drops_processes(attack_graph):
    noisy = add_noise(attack_graph, NoiseConfig(p_drop_edge=1, p_drop_object_node=1, p_drop_attr=0))
    assert sorted(noisy.node_ids) == sorted(attack_graph.process_ids())
    assert noisy.edge_count == 0


def test_noise_guard(chain_graph):
    files_only = make_graph([("a", "file", {}), ("b", "file", {})], [])
    with pytest.raises(NoiseGuardExhaustedError):
        add_noise(files_only, NoiseConfig(p_drop_object_node=1.0))
    with pytest.raises(EmptyGraphError):
        add_noise(make_graph([("p", "process", {})], []), NoiseConfig())


# --- dataset ---
@pytest.fixture(scope="module")
def host_graph() -> Graph:
    return build_graph(synthesize(n_hosts=2, seed=3).events)


def test_single_positive_is_an_abstraction_of_its_prov(host_graph):
    quiet = NoiseConfig(p_drop_edge=0, p_drop_object_node=0, p_drop_attr=0)
    (sample,) = make_dataset(host_graph, n_pos=1, n_neg=0, noise=quiet, seed=1)
    assert sample.label == 1
    assert set(_names(sample.query)) <= set(_names(sample.prov))
    assert sample.note["prov_index"] == sample.note["query_index"]


def test_negatives_come_from_other_extractions(host_graph):
    samples = make_dataset(host_graph, n_pos=5, n_neg=20, noise=NoiseConfig(), seed=2)
    assert sum(s.label for s in samples) == 5
    for sample in samples:
        if sample.label == 0:
            assert sample.note["prov_index"] != sample.note["query_index"]
        assert len(sample.prov) > 0 and len(sample.query) > 0


def test_dataset_is_deterministic(host_graph):
    first = make_dataset(host_graph, n_pos=10, n_neg=10, noise=NoiseConfig(), seed=4)
    second = make_dataset(host_graph, n_pos=10, n_neg=10, noise=NoiseConfig(), seed=4)
    assert [s.to_file().model_dump_json() for s in first] == [s.to_file().model_dump_json() for s in second]
    restored = graph_from_file(first[0].to_file().query)
    assert restored == first[0].query


def test_dataset_needs_two_extractions_for_negatives(chain_graph):
    lonely = make_graph([("p", "process", {"name": "a"}), ("f", "file", {"file_name": "b"})], [("p", "f", "read")])
    with pytest.raises(InsufficientSamplesError):
        make_dataset(lonely, n_pos=1, n_neg=1, noise=NoiseConfig(), seed=0)


def test_extraction_pool_has_no_repeated_graph(host_graph):
    pool = extraction_pool([host_graph])
    node_sets = [frozenset(extraction.node_ids) for _, _, extraction in pool]
    assert len(set(node_sets)) == len(pool)


def test_held_out_split_shares_no_provenance_graph(host_graph):
    train_starts, held_starts = split_starts(host_graph, 0.4, seed=5)
    assert train_starts and held_starts and not train_starts & held_starts
    assert (train_starts, held_starts) == split_starts(host_graph, 0.4, seed=5)

    training = make_dataset(host_graph, n_pos=15, n_neg=15, noise=NoiseConfig(), seed=6, starts=train_starts)
    held_out = make_dataset(host_graph, n_pos=5, n_neg=3, noise=NoiseConfig(), seed=7, starts=held_starts)
    assert {(0, s.note["start"]) for s in held_out} <= held_starts
    assert not any(h.prov == t.prov for h in held_out for t in training)


def test_held_out_split_rejects_degenerate_fractions(host_graph, chain_graph):
    with pytest.raises(ValueError):
        split_starts(host_graph, 1.0, seed=0)
    with pytest.raises(InsufficientSamplesError):
        split_starts(chain_graph, 0.1, seed=0)
