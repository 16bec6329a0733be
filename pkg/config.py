import hashlib
import json
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


# --- SECTIONS ---
class EmbedConfig(BaseModel):
    """ Skip-gram settings for attribute tokens """
    dim: int = Field(default=64, ge=2)
    window: int = Field(default=5, ge=1)
    negatives: int = Field(default=5, ge=1)
    epochs: int = Field(default=5, ge=1)
    max_path_len: int = Field(default=3, ge=1)


class ModelConfig(BaseModel):
    """ Shape of the matching network """
    input_dim: int = Field(default=64, ge=1)      # d_w, must equal the embedding width
    hidden_dim: int = Field(default=64, ge=1)     # d
    attention_dim: int = Field(default=16, ge=1)  # d_a for attribute attention
    prov_layers: int = Field(default=3, ge=0)     # K
    query_layers: int = Field(default=3, ge=1)    # L_q
    ntn_slices: int = Field(default=16, ge=1)     # K_ntn
    head_hidden: int = Field(default=16, ge=1)
    feature_mode: Literal["attention", "onehot"] = "attention"


class TrainConfig(BaseModel):
    lr: float = Field(default=0.01, ge=0.0)
    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=50, ge=0)
    val_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)


class NoiseConfig(BaseModel):
    """ Noise applied to summarized graphs when building positive queries """
    p_drop_edge: float = Field(default=0.1, ge=0.0, le=1.0)
    p_drop_object_node: float = Field(default=0.1, ge=0.0, le=1.0)
    p_drop_attr: float = Field(default=0.1, ge=0.0, le=1.0)
    seed: int = 0


class TrainsetConfig(BaseModel):
    max_path_len: int = Field(default=3, ge=1)
    max_name_overlap: float = Field(default=0.9, ge=0.0, le=1.0)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)


class EvalConfig(BaseModel):
    threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    ged_exact_max_nodes: int = Field(default=12, ge=0)
    wl_min_iterations: int = Field(default=1, ge=1, le=10)
    wl_max_iterations: int = Field(default=10, ge=1, le=10)

    @model_validator(mode="after")
    def check_wl_range(self) -> "EvalConfig":
        if self.wl_min_iterations > self.wl_max_iterations:
            raise ValueError("wl_min_iterations must not exceed wl_max_iterations")
        return self


class Settings(BaseSettings):
    """
    **Run Configuration**

    One document holding every stage's defaults. Values come from (lowest to
    highest priority) the field defaults, `PROVHUNT_*` environment variables,
    the `.env` file, a JSON config file, and CLI flags.
    """
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="PROVHUNT_",
        env_nested_delimiter="__",
        extra="ignore",
    )

    seed: int = 0
    embed: EmbedConfig = Field(default_factory=EmbedConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    trainset: TrainsetConfig = Field(default_factory=TrainsetConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)


def _deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if value is None:
            continue
        if isinstance(value, dict):
            merged[key] = _deep_merge(merged.get(key) if isinstance(merged.get(key), dict) else {}, value)
        else:
            merged[key] = value
    return merged


def load_settings(config_path: Path | None = None, overrides: dict[str, Any] | None = None) -> Settings:
    """
    **Settings Loader**

    Reads the optional JSON config file, merges flag overrides on top (flags
    win, `None` means "flag not given") and validates the whole document.
    Raises `pydantic.ValidationError` before any stage starts.
    """
    data: dict[str, Any] = {}
    if config_path is not None:
        data = json.loads(Path(config_path).read_text(encoding="utf-8"))
    if overrides:
        data = _deep_merge(data, overrides)
    return Settings(**data)


def derive_seed(seed: int, stage: str) -> int:
    """ Per-stage seed: sha256 of "<seed>:<stage>" folded to 32 bits. """
    digest = hashlib.sha256(f"{seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")
