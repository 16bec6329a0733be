import math

import numpy as np
import pytest
import torch

from config import ModelConfig
from errors import EmptyGraphError, ShapeMismatchError
from models import Graph, Node
from services.embed import node_input_feature
from services.gnn import (
    MLP,
    GraphTensors,
    ProvenanceLayer,
    attend_neighbors,
    build_model,
    dense_concat,
    forward,
    gcn_encode,
    normalized_adjacency,
    ntn_score,
    pool_graph,
    prepare_graph,
    prov_layer,
)
from services.ops import DTYPE
from services.trainer import PairExample, gradients, loss
from tests.conftest import make_graph, random_table


def _relabel(graph: Graph, mapping: dict[str, str]) -> Graph:
    out = Graph()
    for node in graph.nodes:
        out.add_node(Node(id=mapping[node.id], kind=node.kind, attrs=dict(node.attrs)))
    for edge in graph.edges:
        out.add_edge(mapping[edge.src], mapping[edge.dst], edge.relation)
    return out


def _random_pair(rng: np.random.Generator) -> tuple[Graph, Graph]:
    def one(prefix: str) -> Graph:
        n = int(rng.integers(2, 8))
        nodes = [(f"{prefix}p0", "process", {"name": f"proc{rng.integers(4)}.exe"})]
        for i in range(1, n):
            if rng.random() < 0.4:
                nodes.append((f"{prefix}p{i}", "process", {"name": f"proc{rng.integers(4)}.exe"}))
            else:
                nodes.append((f"{prefix}f{i}", "file", {"file_name": f"doc{rng.integers(5)}.txt"}))
        procs = [node_id for node_id, kind, _ in nodes if kind == "process"]
        edges = []
        for node_id, kind, _ in nodes[1:]:
            src = str(rng.choice(procs))
            if src != node_id:
                edges.append((src, node_id, "fork" if kind == "process" else "read"))
        return make_graph(nodes, edges)

    return one("q"), one("g")


def test_normalized_adjacency_hand_example():
    # path 0 - 1, node 2 isolated: degrees with self loops are 2, 2, 1
    adjacency = normalized_adjacency(3, [(0, 1)])
    expected = torch.tensor([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]], dtype=DTYPE)
    assert torch.allclose(adjacency, expected)


def test_gcn_encode_hand_example():
    adjacency = normalized_adjacency(2, [(0, 1)])
    features = torch.tensor([[1.0, -1.0], [3.0, 1.0]], dtype=DTYPE)
    out = gcn_encode(adjacency, features, [torch.eye(2, dtype=DTYPE)])
    # both rows become relu(mean of the two feature rows)
    assert torch.allclose(out, torch.tensor([[2.0, 0.0], [2.0, 0.0]], dtype=DTYPE))


def test_attend_neighbors_uniform_when_scores_tie():
    weights = attend_neighbors(
        torch.ones(3, dtype=DTYPE),
        torch.ones(4, 3, dtype=DTYPE),
        torch.eye(3, dtype=DTYPE),
        torch.ones(6, dtype=DTYPE),
    )
    assert torch.allclose(weights, torch.full((4,), 0.25, dtype=DTYPE))
    assert attend_neighbors(torch.ones(3), torch.zeros(0, 3), torch.eye(3), torch.ones(6)).numel() == 0


def test_pool_weights_sum_to_one():
    rng = np.random.default_rng(1)
    W_pool = torch.tensor(rng.normal(size=(5, 5)), dtype=DTYPE)
    for _ in range(1000):
        hidden = torch.tensor(rng.normal(size=(int(rng.integers(1, 30)), 5)), dtype=DTYPE)
        h_graph, weights = pool_graph(hidden, W_pool)
        assert abs(float(weights.sum()) - 1.0) < 1e-9
        assert h_graph.shape == (5,)
    with pytest.raises(EmptyGraphError):
        pool_graph(torch.zeros(0, 5, dtype=DTYPE), W_pool)


def test_ntn_hand_example():
    h_q = torch.tensor([1.0, 0.0], dtype=DTYPE)
    h_p = torch.tensor([0.0, 1.0], dtype=DTYPE)
    W = torch.zeros(2, 2, 1, dtype=DTYPE)
    W[0, 1, 0] = 0.5
    V = torch.tensor([[0.1, 0.0, 0.0, 0.2]], dtype=DTYPE)
    b = torch.tensor([0.1], dtype=DTYPE)
    assert math.isclose(float(ntn_score(h_q, h_p, W, V, b)[0]), math.tanh(0.5 + 0.1 + 0.2 + 0.1))
    with pytest.raises(ShapeMismatchError):
        ntn_score(torch.zeros(3, dtype=DTYPE), h_p, W, V, b)


def test_score_is_a_probability(chain_graph, attack_graph, tiny_config):
    table = random_table([chain_graph, attack_graph])
    model = build_model(tiny_config, seed=0)
    score = forward(chain_graph, attack_graph, table, model)
    assert 0.0 < score < 1.0


def test_same_seed_same_parameters(tiny_config):
    first, second = build_model(tiny_config, 3), build_model(tiny_config, 3)
    for (name, a), (_, b) in zip(first.state_dict().items(), second.state_dict().items()):
        assert torch.equal(a, b), name
    assert float(first.prov_encoder.layers[0].epsilon) == 1.0


def test_input_width_must_match_table(chain_graph, tiny_config):
    table = random_table([chain_graph], d_w=5)
    with pytest.raises(ShapeMismatchError):
        forward(chain_graph, chain_graph, table, build_model(tiny_config, 0))


def test_empty_graph_rejected(chain_graph):
    with pytest.raises(EmptyGraphError):
        prepare_graph(Graph(), random_table([chain_graph]))


def test_permutation_invariance(tiny_config):
    rng = np.random.default_rng(5)
    model = build_model(tiny_config, seed=1)
    for _ in range(100):
        query, prov = _random_pair(rng)
        table = random_table([query, prov])
        base = forward(query, prov, table, model)
        # reversed prefixes flip the sorted node order
        q_ids, p_ids = query.node_ids, prov.node_ids
        q_map = {old: f"{len(q_ids) - i:02d}-{old}" for i, old in enumerate(q_ids)}
        p_map = {old: f"{len(p_ids) - i:02d}-{old}" for i, old in enumerate(p_ids)}
        moved = forward(_relabel(query, q_map), _relabel(prov, p_map), table, model)
        assert abs(base - moved) < 1e-9


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    config = ModelConfig(
        input_dim=8, hidden_dim=8, attention_dim=4, prov_layers=2, query_layers=2, ntn_slices=4, head_hidden=4
    )
    model = build_model(config, seed=2)
    pairs = [_random_pair(rng) for _ in range(2)]
    table = random_table([g for pair in pairs for g in pair], d_w=8)
    batch = [
        PairExample(prepare_graph(q, table), prepare_graph(p, table), label=float(i % 2))
        for i, (q, p) in enumerate(pairs)
    ]
    analytic = gradients(batch, model)
    params = dict(model.named_parameters())
    assert set(analytic) == set(params)

    h = 1e-5
    checked = 0
    for name, param in params.items():
        flat = param.data.view(-1)
        picks = rng.choice(flat.numel(), size=min(8, flat.numel()), replace=False)
        for index in picks:
            index = int(index)
            original = float(flat[index])
            with torch.no_grad():
                flat[index] = original + h
                plus = float(loss(batch, model))
                flat[index] = original - h
                minus = float(loss(batch, model))
                flat[index] = original
            numeric = (plus - minus) / (2 * h)
            exact = float(analytic[name].view(-1)[index])
            assert abs(exact - numeric) <= 1e-3 * max(abs(exact), abs(numeric)) + 1e-7, (name, index)
            checked += 1
    assert checked >= 200


def test_onehot_mode_freezes_attention(chain_graph):
    from services.embed import EmbeddingTable, node_tokens

    tokens = sorted({t for node in chain_graph.nodes for t in node_tokens(node)})
    table = EmbeddingTable.one_hot(tokens)
    config = ModelConfig(
        input_dim=table.d_w, hidden_dim=4, attention_dim=3, prov_layers=1, query_layers=1,
        ntn_slices=2, head_hidden=2, feature_mode="onehot",
    )
    model = build_model(config, seed=0)
    graph = prepare_graph(chain_graph, table)
    grads = gradients([PairExample(graph, graph, 1.0)], model)
    assert torch.count_nonzero(grads["attr_attention.W_a"]) == 0
    assert not model.attr_attention.a.requires_grad
    # one-hot with uniform attention: h0 is the mean of the node's token rows
    features = model.node_features(graph)
    assert torch.allclose(features.sum(dim=1), torch.ones(graph.num_nodes, dtype=DTYPE))


# --- per-layer arithmetic ---
def _tensors(num_nodes: int, pairs: list[tuple[int, int]], width: int = 2) -> GraphTensors:
    center = [u for u, v in pairs] + [v for u, v in pairs]
    neighbor = [v for u, v in pairs] + [u for u, v in pairs]
    return GraphTensors(
        node_ids=tuple(f"n{i}" for i in range(num_nodes)),
        token_vectors=torch.zeros(0, width, dtype=DTYPE),
        token_owner=torch.zeros(0, dtype=torch.long),
        center=torch.tensor(center, dtype=torch.long),
        neighbor=torch.tensor(neighbor, dtype=torch.long),
        adjacency=normalized_adjacency(num_nodes, pairs),
    )


def _identity_mlp(in_dim: int, out_dim: int) -> MLP:
    # identity on non-negative inputs; with in_dim > out_dim the blocks are summed
    mlp = MLP(in_dim, in_dim, out_dim)
    with torch.no_grad():
        mlp.W1.copy_(torch.eye(in_dim, dtype=DTYPE))
        mlp.W2.copy_(torch.cat([torch.eye(out_dim, dtype=DTYPE)] * (in_dim // out_dim)))
    return mlp


def _identity_layer(epsilon: float) -> ProvenanceLayer:
    layer = ProvenanceLayer(2, 2)
    layer.mlp = _identity_mlp(2, 2)
    with torch.no_grad():
        layer.epsilon.fill_(epsilon)
    return layer


def test_gcn_encode_three_node_path():
    adjacency = normalized_adjacency(3, [(0, 1), (1, 2)])
    features = torch.tensor([[1.0], [0.0], [0.0]], dtype=DTYPE)
    out = gcn_encode(adjacency, features, [torch.ones(1, 1, dtype=DTYPE)])
    assert torch.allclose(out[:, 0], torch.tensor([0.5, 1 / math.sqrt(6), 0.0], dtype=DTYPE))


def test_attend_neighbors_hand_set_scores():
    # scores ln 9 and 0 give weights 9/10 and 1/10
    weights = attend_neighbors(
        torch.zeros(1, dtype=DTYPE),
        torch.tensor([[math.log(9)], [0.0]], dtype=DTYPE),
        torch.ones(1, 1, dtype=DTYPE),
        torch.tensor([0.0, 1.0], dtype=DTYPE),
    )
    assert torch.allclose(weights, torch.tensor([0.9, 0.1], dtype=DTYPE))
    single = attend_neighbors(
        torch.ones(2, dtype=DTYPE), torch.ones(1, 2, dtype=DTYPE), torch.eye(2, dtype=DTYPE), torch.ones(4, dtype=DTYPE)
    )
    assert torch.allclose(single, torch.ones(1, dtype=DTYPE))


def test_prov_layer_examples():
    hidden = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=DTYPE)
    out = prov_layer(_tensors(2, [(0, 1)]), hidden, _identity_layer(0.5))
    assert torch.allclose(out, torch.tensor([[0.5, 1.0], [1.0, 0.5]], dtype=DTYPE))

    lonely = torch.tensor([[0.3, 2.0]], dtype=DTYPE)
    assert torch.allclose(prov_layer(_tensors(1, []), lonely, _identity_layer(1.0)), lonely)

    # two neighbors in the same state s: the convex combination is s
    star = torch.tensor([[5.0, 5.0], [2.0, 3.0], [2.0, 3.0]], dtype=DTYPE)
    layer = _identity_layer(0.0)
    with torch.no_grad():
        layer.att.copy_(torch.tensor([0.3, -0.2, 0.7, 0.1], dtype=DTYPE))
    out = prov_layer(_tensors(3, [(0, 1), (0, 2)]), star, layer)
    assert torch.allclose(out[0], torch.tensor([2.0, 3.0], dtype=DTYPE))

    with pytest.raises(ShapeMismatchError):
        prov_layer(_tensors(3, []), hidden, layer)


def test_prov_layer_agrees_with_per_node_attention(chain_graph, tiny_config):
    table = random_table([chain_graph])
    graph = prepare_graph(chain_graph, table)
    model = build_model(tiny_config, seed=4)
    layer = model.prov_encoder.layers[0]
    with torch.no_grad():
        hidden = model.node_features(graph)
        batched = prov_layer(graph, hidden, layer)
        for u in range(graph.num_nodes):
            neighbors = hidden[graph.neighbor[graph.center == u]]
            alpha = attend_neighbors(hidden[u], neighbors, layer.W_n, layer.att)
            expected = layer.mlp(layer.epsilon * hidden[u] + alpha @ neighbors)
            assert torch.allclose(batched[u], expected, atol=1e-12)


def test_node_features_agree_with_single_node_form(chain_graph, tiny_config):
    table = random_table([chain_graph])
    model = build_model(tiny_config, seed=6)
    graph = prepare_graph(chain_graph, table)
    with torch.no_grad():
        batched = model.node_features(graph)
        for row, node_id in enumerate(graph.node_ids):
            single = node_input_feature(chain_graph.node(node_id), table, model.attr_attention)
            assert torch.allclose(batched[row], single, atol=1e-12)


def test_dense_concat_examples():
    h0 = torch.tensor([[1.0, 2.0]], dtype=DTYPE)
    h1 = torch.tensor([[3.0, 4.0]], dtype=DTYPE)
    assert torch.allclose(dense_concat([h0, h1], _identity_mlp(4, 2)), torch.tensor([[4.0, 6.0]], dtype=DTYPE))
    assert torch.allclose(dense_concat([h0], _identity_mlp(2, 2)), h0)
    with pytest.raises(ShapeMismatchError):
        dense_concat([h0, torch.zeros(2, 2, dtype=DTYPE)], _identity_mlp(4, 2))


def test_provenance_encoder_is_k_hop_local():
    ids = [f"p{i}" for i in range(6)]
    chain = make_graph([(i, "process", {"name": f"{i}.exe"}) for i in ids], list(zip(ids, ids[1:], ["fork"] * 5)))
    config = ModelConfig(
        input_dim=8, hidden_dim=8, attention_dim=4, prov_layers=2, query_layers=1, ntn_slices=2, head_hidden=2
    )
    model = build_model(config, seed=3)
    graph = prepare_graph(chain, random_table([chain]))
    with torch.no_grad():
        features = model.node_features(graph)
        nudged = features.clone()
        nudged[graph.node_ids.index("p0")] += 1.0
        before = model.prov_encoder(features, graph)
        after = model.prov_encoder(nudged, graph)
    far = [graph.node_ids.index(node_id) for node_id in ("p3", "p4", "p5")]
    assert torch.allclose(before[far], after[far], atol=1e-12)


def test_forward_golden_values(chain_graph, attack_graph, tiny_config):
    table = random_table([chain_graph, attack_graph])
    model = build_model(tiny_config, seed=0)
    with torch.no_grad():
        for param in model.parameters():
            param.zero_()
        model.head.b2.fill_(math.log(3))
    # all-zero network: the NTN outputs 0 and the score is sigmoid(ln 3)
    assert forward(chain_graph, attack_graph, table, model) == pytest.approx(0.75, abs=1e-12)

    seeded = forward(chain_graph, attack_graph, table, build_model(tiny_config, seed=9))
    assert forward(chain_graph, attack_graph, table, build_model(tiny_config, seed=9)) == seeded
