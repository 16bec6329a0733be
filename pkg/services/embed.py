import logging
import re
import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from gensim.models import Word2Vec
from torch import nn

from errors import EmptyCorpusError, ShapeMismatchError
from models import Graph, Node
from schemas import EmbeddingManifest
from services.ops import DTYPE, segment_softmax, uniform_

logger = logging.getLogger(__name__)

_PATH_SEPARATOR = re.compile(r"[\\/]+")
_SPLIT_PATH_ATTRS = {"file_name", "key_name"}


# --- TOKENS ---
def attribute_tokens(node: Node) -> list[str]:
    """
    Tokens of a node's non-null attributes. File and registry paths become a
    base name token followed by a directory token, process arguments are
    split on whitespace.
    """
    tokens: list[str] = []
    for key, value in node.attrs.items():
        if value is None or value == "":
            continue
        if key in _SPLIT_PATH_ATTRS:
            parts = [part for part in _PATH_SEPARATOR.split(value) if part]
            if len(parts) > 1:
                separator = "\\" if "\\" in value else "/"
                tokens.extend([parts[-1], separator.join(parts[:-1])])
                continue
            tokens.append(value)
        elif key == "args":
            tokens.extend(value.split())
        else:
            tokens.append(value)
    return tokens


def node_tokens(node: Node) -> list[str]:
    """ The kind token counts as one of the node's attributes, so this is never empty. """
    return [node.kind.value] + attribute_tokens(node)


def paths_to_sentences(graph: Graph, max_len: int = 3) -> list[list[str]]:
    """
    **Path-to-Sentence Translation**

    Every path of up to `max_len` edges, starting from every node, becomes one
    sentence: ``[kind, attrs..., relation, kind, attrs..., ...]``.
    Null attributes emit nothing.
    """
    sentences: list[list[str]] = []
    for start in graph.node_ids:
        for path in graph.paths_up_to(start, max_len):
            sentence = node_tokens(graph.node(path[0]))
            for prev, current in zip(path, path[1:]):
                sentence.extend(rel.value for rel in graph.relations_between(prev, current))
                sentence.extend(node_tokens(graph.node(current)))
            sentences.append(sentence)
    return sentences


# --- EMBEDDING TABLE ---
@dataclass
class EmbeddingTable:
    """ Attribute token -> frozen dense vector (one row per vocab entry) """
    vocab: dict[str, int]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.vocab):
            raise ShapeMismatchError(
                f"vectors: expected {len(self.vocab)} rows, got shape {self.vectors.shape}"
            )
        if not np.isfinite(self.vectors).all():
            raise ShapeMismatchError("vectors: non-finite values in embedding table")

    @property
    def d_w(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def tokens(self) -> list[str]:
        return sorted(self.vocab, key=self.vocab.__getitem__)

    def __contains__(self, token: object) -> bool:
        return token in self.vocab

    def lookup(self, tokens: Iterable[str]) -> tuple[list[int], list[str]]:
        """ (row indices of known tokens, unknown tokens) """
        rows, oov = [], []
        for token in tokens:
            if token in self.vocab:
                rows.append(self.vocab[token])
            else:
                oov.append(token)
        return rows, oov

    def as_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.vectors).to(DTYPE)

    @classmethod
    def one_hot(cls, tokens: Sequence[str]) -> "EmbeddingTable":
        """ Identity table over `tokens`, for the one-hot feature variant. """
        return cls(vocab={token: i for i, token in enumerate(tokens)}, vectors=np.eye(len(tokens)))

    def to_manifest(self) -> EmbeddingManifest:
        return EmbeddingManifest(d_w=self.d_w, vocab=self.tokens, vectors=self.vectors.reshape(-1).tolist())

    @classmethod
    def from_manifest(cls, manifest: EmbeddingManifest) -> "EmbeddingTable":
        vectors = np.asarray(manifest.vectors, dtype=np.float64).reshape(len(manifest.vocab), manifest.d_w)
        return cls(vocab={token: i for i, token in enumerate(manifest.vocab)}, vectors=vectors)


def _stable_hash(text: str) -> int:
    # builtin hash() is salted per process
    return zlib.crc32(text.encode("utf-8"))


def train_skipgram(
    sentences: Sequence[Sequence[str]],
    d_w: int = 64,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    seed: int = 0,
) -> EmbeddingTable:
    """
    **Skip-Gram Training**

    Skip-gram with negative sampling over the path sentences (gensim). Every
    token seen at least once enters the vocabulary; subsampling is off. A
    single worker with a fixed seed makes the table reproducible.
    """
    corpus = [list(sentence) for sentence in sentences if sentence]
    if not corpus:
        raise EmptyCorpusError("sentences: corpus is empty")
    if d_w < 2:
        raise ValueError("d_w: must be >= 2")

    model = Word2Vec(
        sentences=corpus,
        vector_size=d_w,
        window=window,
        negative=negatives,
        epochs=epochs,
        sg=1,
        hs=0,
        min_count=1,
        sample=0,
        workers=1,
        seed=seed,
        hashfxn=_stable_hash,
    )
    tokens = list(model.wv.index_to_key)
    vectors = np.stack([model.wv[token] for token in tokens]).astype(np.float64)
    logger.info(f"Trained skip-gram: {len(tokens)} tokens, d_w={d_w}, {len(corpus)} sentences")
    return EmbeddingTable(vocab={token: i for i, token in enumerate(tokens)}, vectors=vectors)


# --- ATTRIBUTE ATTENTION ---
class AttrAttention(nn.Module):
    """
    Additive attention over a node's attribute vectors:
    alpha_i = softmax_i(a . tanh(v_i W_a)), h0_u = sum_i alpha_i v_i.
    """

    def __init__(self, d_w: int, d_a: int):
        super().__init__()
        self.W_a = nn.Parameter(torch.zeros(d_w, d_a, dtype=DTYPE))
        self.a = nn.Parameter(torch.zeros(d_a, dtype=DTYPE))

    def reset_parameters(self, generator: torch.Generator) -> None:
        uniform_(self.W_a, self.W_a.shape[0], generator)
        uniform_(self.a, self.a.shape[0], generator)

    def freeze_uniform(self) -> None:
        """ Zero scores everywhere, so every node averages its attributes. """
        with torch.no_grad():
            self.W_a.zero_()
            self.a.zero_()
        self.W_a.requires_grad_(False)
        self.a.requires_grad_(False)

    def weights(self, vectors: torch.Tensor, owner: torch.Tensor, num_nodes: int) -> torch.Tensor:
        scores = torch.tanh(vectors @ self.W_a) @ self.a
        return segment_softmax(scores, owner, num_nodes)

    def forward(self, vectors: torch.Tensor, owner: torch.Tensor, num_nodes: int) -> torch.Tensor:
        if vectors.shape[0] == 0:
            return torch.zeros(num_nodes, self.W_a.shape[0], dtype=DTYPE)
        alpha = self.weights(vectors, owner, num_nodes)
        return torch.zeros(num_nodes, vectors.shape[1], dtype=DTYPE).index_add(0, owner, alpha[:, None] * vectors)


def node_input_feature(node: Node, table: EmbeddingTable, attn: AttrAttention) -> torch.Tensor:
    """
    **Node Input Feature**

    Attention-weighted sum of the node's attribute vectors. Tokens missing
    from the table contribute nothing (logged); an all-OOV node gets the
    zero vector. Single-node form of `MatchingModel.node_features`, which
    runs the same attention over every token of a graph in one batch.
    """
    rows, oov = table.lookup(node_tokens(node))
    if oov:
        logger.warning(f"Node '{node.id}': tokens not in vocabulary: {oov}")
    if not rows:
        return torch.zeros(table.d_w, dtype=DTYPE)
    vectors = table.as_tensor()[torch.tensor(rows)]
    owner = torch.zeros(len(rows), dtype=torch.long)
    return attn(vectors, owner, 1)[0]
