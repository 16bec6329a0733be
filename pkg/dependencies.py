import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import typer
from pydantic import BaseModel

from config import Settings, derive_seed, load_settings
from errors import MissingFileError, SchemaError
from schemas import EmbeddingManifest
from services.embed import EmbeddingTable
from services.gnn import MatchingModel
from services.trainer import load_checkpoint
from storage import read_model

logger = logging.getLogger(__name__)


@dataclass
class CliState:
    """ Global flags, set once by the app callback and shared by every command. """
    config: Optional[Path] = None
    seed: Optional[int] = None
    quiet: bool = False


def get_state(ctx: typer.Context) -> CliState:
    state = ctx.find_object(CliState)
    return state if state is not None else CliState()


def get_settings(ctx: typer.Context, config: Optional[Path] = None, **overrides: Any) -> Settings:
    """
    **Settings Dependency**

    Config file first (a command-level `--config` replaces the global one),
    then the global `--seed`, then command flags. Flags left unset (None) do
    not override anything.

    **Raises:** `MissingFileError`, `SchemaError` for an unreadable config,
    `pydantic.ValidationError` for an invalid one.
    """
    state = get_state(ctx)
    config_path = config if config is not None else state.config
    if config_path is not None and not config_path.is_file():
        raise MissingFileError(f"{config_path}: config file not found")
    merged: dict[str, Any] = {"seed": state.seed}
    merged.update({key: value for key, value in overrides.items() if value is not None})
    try:
        return load_settings(config_path, merged)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{config_path}: invalid JSON ({exc.msg})") from exc


def seed_for(settings: Settings, stage: str) -> int:
    seed = derive_seed(settings.seed, stage)
    logger.debug(f"Stage '{stage}' uses seed {seed}")
    return seed


def show_progress(ctx: typer.Context) -> bool:
    return not get_state(ctx).quiet


def load_table(path: Path) -> EmbeddingTable:
    return EmbeddingTable.from_manifest(read_model(path, EmbeddingManifest))


def load_model(model_path: Path, emb_path: Optional[Path] = None) -> tuple[MatchingModel, EmbeddingTable]:
    """
    **Model Dependency**

    Checkpoint plus its embedding table. `--emb` wins over the table stored in
    the checkpoint; one of the two must exist.
    """
    model, stored = load_checkpoint(model_path)
    table = load_table(emb_path) if emb_path is not None else stored
    if table is None:
        raise MissingFileError(f"{model_path}: checkpoint has no embedding table, pass --emb")
    return model, table


def emit(document: BaseModel, as_json: bool, summary: str) -> None:
    """ Machine-readable JSON on --json, a one-line summary otherwise. """
    typer.echo(document.model_dump_json(indent=1) if as_json else summary)


def parse_range(value: str, low: int = 1, high: int = 10) -> range:
    """ "3" or "1..10" -> inclusive range within [low, high] """
    try:
        if ".." in value:
            start, stop = (int(part) for part in value.split("..", 1))
        else:
            start = stop = int(value)
    except ValueError:
        raise typer.BadParameter(f"'{value}' is not N or N..M") from None
    if not low <= start <= stop <= high:
        raise typer.BadParameter(f"'{value}' must lie within {low}..{high}")
    return range(start, stop + 1)
