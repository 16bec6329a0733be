import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
from tqdm import tqdm

from config import ModelConfig, TrainConfig
from errors import EmptyBatchError, NonFiniteGradientError, SchemaError, SingleClassError, TrainingDivergedError
from schemas import CheckpointManifest, SampleFile, TensorRecord
from services.embed import EmbeddingTable
from services.gnn import GraphTensors, MatchingModel, build_model, prepare_graph
from services.ops import DTYPE
from storage import graph_from_file, read_model, write_model

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairExample:
    query: GraphTensors
    prov: GraphTensors
    label: float
    name: str = ""


@dataclass
class TrainingResult:
    model: MatchingModel
    history: list[dict[str, Optional[float]]] = field(default_factory=list)


def prepare_pairs(samples: Sequence[tuple[str, SampleFile]], table: EmbeddingTable) -> list[PairExample]:
    return [
        PairExample(
            query=prepare_graph(graph_from_file(sample.query), table),
            prov=prepare_graph(graph_from_file(sample.prov), table),
            label=float(sample.label),
            name=name,
        )
        for name, sample in samples
    ]


def loss(batch: Sequence[PairExample], model: MatchingModel) -> torch.Tensor:
    """ Sum of squared errors between scores and labels over the batch. """
    if not batch:
        raise EmptyBatchError("batch: no pairs")
    total = torch.zeros((), dtype=DTYPE)
    for example in batch:
        total = total + (model(example.query, example.prov) - example.label) ** 2
    return total


def gradients(batch: Sequence[PairExample], model: MatchingModel) -> dict[str, torch.Tensor]:
    """
    **Exact Gradients**

    d loss / d theta for every learnable tensor, keyed by parameter name.
    Frozen tensors (the one-hot variant's attention) come back as zeros.

    **Raises:** `NonFiniteGradientError` naming the first bad tensor.
    """
    model.zero_grad(set_to_none=True)
    value = loss(batch, model)
    if not torch.isfinite(value):
        raise NonFiniteGradientError("loss", f"loss: non-finite value {float(value)}")
    value.backward()
    grads: dict[str, torch.Tensor] = {}
    for name, param in model.named_parameters():
        grad = param.grad if param.grad is not None else torch.zeros_like(param)
        if not torch.isfinite(grad).all():
            raise NonFiniteGradientError(name)
        grads[name] = grad.detach().clone()
    return grads


def predict(model: MatchingModel, examples: Sequence[PairExample]) -> list[float]:
    with torch.no_grad():
        return [float(model(example.query, example.prov)) for example in examples]


def accuracy(scores: Sequence[float], labels: Sequence[float], threshold: float = 0.5) -> float:
    hits = sum(int(score > threshold) == int(label) for score, label in zip(scores, labels))
    return hits / len(scores) if scores else 0.0


def train(
    dataset: Sequence[PairExample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    seed: int,
    threshold: float = 0.5,
    progress: bool = True,
) -> TrainingResult:
    """
    **Mini-batch SGD**

    Splits off a seeded validation slice, then runs plain SGD on the summed
    squared error. Per-epoch train loss (mean per pair) and validation
    accuracy are logged and kept in the history.

    **Raises:** `TrainingDivergedError` carrying the parameters of the last
    epoch that finished with a finite loss.
    """
    labels = {example.label for example in dataset}
    if labels != {0.0, 1.0}:
        raise SingleClassError("dataset: both labels 0 and 1 must be present")

    generator = torch.Generator().manual_seed(seed)
    model = build_model(model_config, seed)
    order = torch.randperm(len(dataset), generator=generator).tolist()
    n_val = int(len(dataset) * train_config.val_fraction)
    validation = [dataset[i] for i in order[:n_val]]
    training = [dataset[i] for i in order[n_val:]]
    optimizer = torch.optim.SGD([p for p in model.parameters() if p.requires_grad], lr=train_config.lr)

    history: list[dict[str, Optional[float]]] = []
    last_good = copy.deepcopy(model.state_dict())
    epochs = tqdm(range(1, train_config.epochs + 1), desc="train", disable=not progress)
    for epoch in epochs:
        permutation = torch.randperm(len(training), generator=generator).tolist()
        epoch_loss = 0.0
        for start in range(0, len(training), train_config.batch_size):
            batch = [training[i] for i in permutation[start:start + train_config.batch_size]]
            optimizer.zero_grad(set_to_none=True)
            value = loss(batch, model)
            if not torch.isfinite(value):
                logger.warning(f"Loss diverged in epoch {epoch}; restoring last good parameters")
                raise TrainingDivergedError(epoch, last_good, history)
            value.backward()
            optimizer.step()
            epoch_loss += float(value)

        train_loss = epoch_loss / max(len(training), 1)
        if not math.isfinite(train_loss):
            raise TrainingDivergedError(epoch, last_good, history)
        val_accuracy = None
        if validation:
            val_accuracy = accuracy(predict(model, validation), [e.label for e in validation], threshold)
        history.append({"epoch": float(epoch), "train_loss": train_loss, "val_accuracy": val_accuracy})
        logger.info(f"Epoch {epoch}: train_loss={train_loss:.6f} val_accuracy={val_accuracy}")
        epochs.set_postfix(loss=f"{train_loss:.4f}")
        last_good = copy.deepcopy(model.state_dict())

    return TrainingResult(model=model, history=history)


# --- CHECKPOINTS ---
def to_manifest(
    model: MatchingModel, history: Sequence[dict] = (), table: Optional[EmbeddingTable] = None
) -> CheckpointManifest:
    return CheckpointManifest(
        config=model.config.model_dump(),
        tensors=[
            TensorRecord(name=name, shape=list(tensor.shape), data=tensor.detach().reshape(-1).tolist())
            for name, tensor in model.state_dict().items()
        ],
        history=list(history),
        embedding=table.to_manifest() if table is not None else None,
    )


def from_manifest(manifest: CheckpointManifest) -> MatchingModel:
    model = MatchingModel(ModelConfig(**manifest.config))
    expected = model.state_dict()
    state = {}
    for record in manifest.tensors:
        if record.name not in expected:
            raise SchemaError(f"tensors.{record.name}: unknown tensor")
        tensor = torch.tensor(record.data, dtype=DTYPE).reshape(record.shape)
        if tensor.shape != expected[record.name].shape:
            raise SchemaError(f"tensors.{record.name}: shape {list(tensor.shape)} does not match the config")
        state[record.name] = tensor
    missing = set(expected) - set(state)
    if missing:
        raise SchemaError(f"tensors.{sorted(missing)[0]}: missing from checkpoint")
    model.load_state_dict(state)
    return model


def save_checkpoint(
    path: Path, model: MatchingModel, history: Sequence[dict] = (), table: Optional[EmbeddingTable] = None
) -> Path:
    return write_model(path, to_manifest(model, history, table))


def load_checkpoint(path: Path) -> tuple[MatchingModel, Optional[EmbeddingTable]]:
    """ Model plus the embedding table stored with it, if any. """
    manifest = read_model(path, CheckpointManifest)
    table = EmbeddingTable.from_manifest(manifest.embedding) if manifest.embedding is not None else None
    return from_manifest(manifest), table


def load_state(model_config: ModelConfig, state: dict) -> MatchingModel:
    model = MatchingModel(model_config)
    model.load_state_dict(state)
    return model
