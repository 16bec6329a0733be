"""
Graph pattern matching network.

Query graphs go through a GCN, provenance graphs through an attention
aggregator with layer-wise dense connections. Each side is pooled into one
vector with context-aware attention, the two vectors are related by a neural
tensor network, and a small dense head turns that into a score in (0, 1).
Everything runs in float64 on CPU.
"""
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from config import ModelConfig
from errors import EmptyGraphError, ShapeMismatchError
from models import Graph
from services.embed import AttrAttention, EmbeddingTable, node_tokens
from services.ops import DTYPE, segment_softmax, uniform_

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2


# --- GRAPH TENSORS ---
@dataclass(frozen=True)
class GraphTensors:
    """ Everything the network needs from one graph, in sorted-node-id order """
    node_ids: tuple[str, ...]
    token_vectors: torch.Tensor   # (T, d_w) frozen attribute vectors
    token_owner: torch.Tensor     # (T,) node index of each token
    center: torch.Tensor          # (M,) neighbor pairs, both edge directions
    neighbor: torch.Tensor        # (M,)
    adjacency: torch.Tensor       # (N, N) symmetric-normalized with self-loops

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)


def normalized_adjacency(num_nodes: int, pairs: list[tuple[int, int]]) -> torch.Tensor:
    """ D^-1/2 (A_sym + I) D^-1/2 """
    adjacency = torch.eye(num_nodes, dtype=DTYPE)
    for u, v in pairs:
        adjacency[u, v] = 1.0
        adjacency[v, u] = 1.0
    inv_sqrt = adjacency.sum(dim=1).rsqrt()
    return inv_sqrt[:, None] * adjacency * inv_sqrt[None, :]


def prepare_graph(graph: Graph, table: EmbeddingTable) -> GraphTensors:
    """ Tokens, neighbor pairs and GCN adjacency for `graph`. """
    if len(graph) == 0:
        raise EmptyGraphError("graph: no nodes")
    order = sorted(graph.node_ids)
    index = {node_id: i for i, node_id in enumerate(order)}

    rows: list[int] = []
    owner: list[int] = []
    missing = 0
    for i, node_id in enumerate(order):
        found, oov = table.lookup(node_tokens(graph.node(node_id)))
        rows.extend(found)
        owner.extend([i] * len(found))
        missing += len(oov)
    if missing:
        logger.warning(f"{missing} attribute token(s) not in vocabulary; they contribute zero vectors")

    center: list[int] = []
    neighbor: list[int] = []
    pairs: set[tuple[int, int]] = set()
    for node_id in order:
        u = index[node_id]
        for other in graph.neighbor_ids(node_id, "both"):
            v = index[other]
            center.append(u)
            neighbor.append(v)
            pairs.add((min(u, v), max(u, v)))

    vectors = table.as_tensor()
    return GraphTensors(
        node_ids=tuple(order),
        token_vectors=vectors[torch.tensor(rows, dtype=torch.long)] if rows else torch.zeros(0, table.d_w, dtype=DTYPE),
        token_owner=torch.tensor(owner, dtype=torch.long),
        center=torch.tensor(center, dtype=torch.long),
        neighbor=torch.tensor(neighbor, dtype=torch.long),
        adjacency=normalized_adjacency(len(order), sorted(pairs)),
    )


# --- BUILDING BLOCKS ---
class MLP(nn.Module):
    """ One hidden layer with ReLU: relu(x W1 + b1) W2 + b2 """

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.W1 = nn.Parameter(torch.zeros(in_dim, hidden_dim, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.zeros(hidden_dim, dtype=DTYPE))
        self.W2 = nn.Parameter(torch.zeros(hidden_dim, out_dim, dtype=DTYPE))
        self.b2 = nn.Parameter(torch.zeros(out_dim, dtype=DTYPE))

    def reset_parameters(self, generator: torch.Generator) -> None:
        in_dim, hidden_dim = self.W1.shape
        uniform_(self.W1, in_dim, generator)
        uniform_(self.b1, in_dim, generator)
        uniform_(self.W2, hidden_dim, generator)
        uniform_(self.b2, hidden_dim, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.W1.shape[0]:
            raise ShapeMismatchError(f"mlp: expected width {self.W1.shape[0]}, got {x.shape[-1]}")
        return F.relu(x @ self.W1 + self.b1) @ self.W2 + self.b2


def gcn_encode(adjacency: torch.Tensor, features: torch.Tensor, weights: list[torch.Tensor]) -> torch.Tensor:
    """ H <- ReLU(A_norm H W) for each layer weight W """
    if adjacency.shape[0] != features.shape[0]:
        raise ShapeMismatchError(f"features: {features.shape[0]} rows for {adjacency.shape[0]} nodes")
    hidden = features
    for layer, weight in enumerate(weights):
        if hidden.shape[1] != weight.shape[0]:
            raise ShapeMismatchError(f"query_encoder.{layer}: expected width {weight.shape[0]}, got {hidden.shape[1]}")
        hidden = F.relu(adjacency @ hidden @ weight)
    return hidden


def _neighbor_scores(
    center_states: torch.Tensor, neighbor_states: torch.Tensor, W_n: torch.Tensor, att: torch.Tensor
) -> torch.Tensor:
    width = W_n.shape[1]
    return F.leaky_relu(
        (center_states @ W_n) @ att[:width] + (neighbor_states @ W_n) @ att[width:],
        negative_slope=LEAKY_SLOPE,
    )


def attend_neighbors(
    u_state: torch.Tensor, neighbor_states: torch.Tensor, W_n: torch.Tensor, att: torch.Tensor
) -> torch.Tensor:
    """
    GAT-style weights of one node's neighbors:
    e_v = LeakyReLU(att . [u W_n ; v W_n]), softmax over the neighbors.
    Per-node form of what `ProvenanceLayer.forward` computes for every node
    at once with `segment_softmax`.
    """
    if neighbor_states.shape[0] == 0:
        return torch.zeros(0, dtype=DTYPE)
    centers = u_state.expand(neighbor_states.shape[0], -1)
    return torch.softmax(_neighbor_scores(centers, neighbor_states, W_n, att), dim=0)


class ProvenanceLayer(nn.Module):
    """ h_u <- MLP(eps * h_u + sum_v alpha_v h_v) over both edge directions """

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.epsilon = nn.Parameter(torch.ones((), dtype=DTYPE))
        self.W_n = nn.Parameter(torch.zeros(in_dim, in_dim, dtype=DTYPE))
        self.att = nn.Parameter(torch.zeros(2 * in_dim, dtype=DTYPE))
        self.mlp = MLP(in_dim, out_dim, out_dim)

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            self.epsilon.fill_(1.0)
        uniform_(self.W_n, self.W_n.shape[0], generator)
        uniform_(self.att, self.att.shape[0], generator)
        self.mlp.reset_parameters(generator)

    def forward(self, hidden: torch.Tensor, graph: GraphTensors) -> torch.Tensor:
        if hidden.shape[0] != graph.num_nodes:
            raise ShapeMismatchError(f"prov_layer: {hidden.shape[0]} rows for {graph.num_nodes} nodes")
        aggregated = torch.zeros_like(hidden)
        if graph.center.numel():
            scores = _neighbor_scores(hidden[graph.center], hidden[graph.neighbor], self.W_n, self.att)
            alpha = segment_softmax(scores, graph.center, graph.num_nodes)
            aggregated = aggregated.index_add(0, graph.center, alpha[:, None] * hidden[graph.neighbor])
        return self.mlp(self.epsilon * hidden + aggregated)


def prov_layer(graph: GraphTensors, hidden: torch.Tensor, layer: ProvenanceLayer) -> torch.Tensor:
    return layer(hidden, graph)


def dense_concat(states: list[torch.Tensor], mlp: MLP) -> torch.Tensor:
    """ MLP([h0; h1; ...; hK]) per node """
    rows = {state.shape[0] for state in states}
    if len(rows) != 1:
        raise ShapeMismatchError(f"dense_concat: layer states have differing row counts {sorted(rows)}")
    return mlp(torch.cat(states, dim=1))


def pool_graph(hidden: torch.Tensor, W_pool: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Context-aware attention pooling: c = tanh(mean(H) W), node weights are a
    softmax over H c across all nodes. Returns (h_G, weights).
    """
    if hidden.shape[0] == 0:
        raise EmptyGraphError("pool_graph: graph has no nodes")
    context = torch.tanh(hidden.mean(dim=0) @ W_pool)
    weights = torch.softmax(hidden @ context, dim=0)
    return weights @ hidden, weights


def ntn_score(h_q: torch.Tensor, h_p: torch.Tensor, W: torch.Tensor, V: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """ tanh(h_q^T W_k h_p + V_k [h_q; h_p] + b_k) for every slice k """
    if h_q.shape[0] != W.shape[0] or h_p.shape[0] != W.shape[1]:
        raise ShapeMismatchError(f"ntn: expected width {W.shape[0]}, got {h_q.shape[0]} and {h_p.shape[0]}")
    bilinear = torch.einsum("i,ijk,j->k", h_q, W, h_p)
    return torch.tanh(bilinear + V @ torch.cat([h_q, h_p]) + b)


# --- ENCODERS ---
class QueryEncoder(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, layers: int):
        super().__init__()
        widths = [in_dim] + [hidden_dim] * layers
        self.weights = nn.ParameterList(
            nn.Parameter(torch.zeros(widths[i], widths[i + 1], dtype=DTYPE)) for i in range(layers)
        )
        self.W_pool = nn.Parameter(torch.zeros(hidden_dim, hidden_dim, dtype=DTYPE))

    def reset_parameters(self, generator: torch.Generator) -> None:
        for weight in self.weights:
            uniform_(weight, weight.shape[0], generator)
        uniform_(self.W_pool, self.W_pool.shape[0], generator)

    def forward(self, features: torch.Tensor, graph: GraphTensors) -> torch.Tensor:
        return gcn_encode(graph.adjacency, features, list(self.weights))


class ProvenanceEncoder(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, layers: int):
        super().__init__()
        self.layers = nn.ModuleList(
            ProvenanceLayer(in_dim if k == 0 else hidden_dim, hidden_dim) for k in range(layers)
        )
        self.dense = MLP(in_dim + layers * hidden_dim, hidden_dim, hidden_dim)
        self.W_pool = nn.Parameter(torch.zeros(hidden_dim, hidden_dim, dtype=DTYPE))

    def reset_parameters(self, generator: torch.Generator) -> None:
        for layer in self.layers:
            layer.reset_parameters(generator)
        self.dense.reset_parameters(generator)
        uniform_(self.W_pool, self.W_pool.shape[0], generator)

    def forward(self, features: torch.Tensor, graph: GraphTensors) -> torch.Tensor:
        states = [features]
        for layer in self.layers:
            states.append(prov_layer(graph, states[-1], layer))
        return dense_concat(states, self.dense)


class NeuralTensorNetwork(nn.Module):
    def __init__(self, dim: int, slices: int):
        super().__init__()
        self.W = nn.Parameter(torch.zeros(dim, dim, slices, dtype=DTYPE))
        self.V = nn.Parameter(torch.zeros(slices, 2 * dim, dtype=DTYPE))
        self.b = nn.Parameter(torch.zeros(slices, dtype=DTYPE))

    def reset_parameters(self, generator: torch.Generator) -> None:
        dim = self.W.shape[0]
        uniform_(self.W, dim, generator)
        uniform_(self.V, 2 * dim, generator)
        uniform_(self.b, 2 * dim, generator)

    def forward(self, h_q: torch.Tensor, h_p: torch.Tensor) -> torch.Tensor:
        return ntn_score(h_q, h_p, self.W, self.V, self.b)


# --- MODEL ---
class MatchingModel(nn.Module):
    """
    **Graph Matching Model**

    `model(query, prov)` returns the matching score as a 0-d tensor. The
    attribute attention is shared by both branches.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.attr_attention = AttrAttention(config.input_dim, config.attention_dim)
        self.query_encoder = QueryEncoder(config.input_dim, config.hidden_dim, config.query_layers)
        self.prov_encoder = ProvenanceEncoder(config.input_dim, config.hidden_dim, config.prov_layers)
        self.ntn = NeuralTensorNetwork(config.hidden_dim, config.ntn_slices)
        self.head = MLP(config.ntn_slices, config.head_hidden, 1)
        if config.feature_mode == "onehot":
            self.attr_attention.freeze_uniform()

    def reset_parameters(self, seed: int) -> "MatchingModel":
        """ Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; epsilon starts at 1. """
        generator = torch.Generator().manual_seed(seed)
        if self.config.feature_mode == "attention":
            self.attr_attention.reset_parameters(generator)
        self.query_encoder.reset_parameters(generator)
        self.prov_encoder.reset_parameters(generator)
        self.ntn.reset_parameters(generator)
        self.head.reset_parameters(generator)
        return self

    def node_features(self, graph: GraphTensors) -> torch.Tensor:
        if graph.token_vectors.shape[1] != self.config.input_dim:
            raise ShapeMismatchError(
                f"input_dim: model expects {self.config.input_dim}, features have {graph.token_vectors.shape[1]}"
            )
        return self.attr_attention(graph.token_vectors, graph.token_owner, graph.num_nodes)

    def embed_query(self, graph: GraphTensors) -> torch.Tensor:
        hidden = self.query_encoder(self.node_features(graph), graph)
        return pool_graph(hidden, self.query_encoder.W_pool)[0]

    def embed_prov(self, graph: GraphTensors) -> torch.Tensor:
        hidden = self.prov_encoder(self.node_features(graph), graph)
        return pool_graph(hidden, self.prov_encoder.W_pool)[0]

    def forward(self, query: GraphTensors, prov: GraphTensors) -> torch.Tensor:
        relation = self.ntn(self.embed_query(query), self.embed_prov(prov))
        return torch.sigmoid(self.head(relation)).squeeze(-1)


def build_model(config: ModelConfig, seed: int) -> MatchingModel:
    return MatchingModel(config).reset_parameters(seed)


def forward(
    query_graph: Graph,
    prov_graph: Graph,
    table: EmbeddingTable,
    model: MatchingModel,
) -> float:
    """ Matching score of one (query, provenance) pair. """
    with torch.no_grad():
        return float(model(prepare_graph(query_graph, table), prepare_graph(prov_graph, table)))
