"""Run configuration: one flat JSON object holding every hyperparameter."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .gnn import ModelConfig

SEED_ENV = "HACT_SEED"


@dataclass
class HactConfig:
    # architecture
    model: str = "hact"
    layer_type: str = "pna"
    n_layers_cg: int = 3
    n_layers_tg: int = 3
    hidden_dim: int = 64
    mlp_layers: int = 2
    jk: str = "lstm"
    embedding_dim: int = 128
    classifier_hidden: int = 128
    classifier_layers: int = 2
    gin_eps: float = 0.0
    # optimization
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    standardize_features: bool = True
    seed: int = 0
    # graph construction
    k: int = 5
    d_min: float = 50.0
    n_segments: int = 100
    compactness: float = 10.0
    similarity_threshold: float = 0.08
    feature_mode: str = "handcrafted"
    patch_size_cell: int = 72
    patch_size_tissue: int = 144

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def validate(self) -> None:
        self.model_config().validate()
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("batch_size must be >= 1, epochs and learning_rate >= 0")
        if self.k < 1 or self.d_min <= 0:
            raise ValueError("k must be >= 1 and d_min positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "HactConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg


def load_config(path=None, overrides: dict | None = None, env=os.environ) -> HactConfig:
    """Defaults, then the JSON file, then ``overrides``, then the seed environment variable."""
    obj = json.loads(Path(path).read_text()) if path else {}
    obj.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if env.get(SEED_ENV):
        obj["seed"] = int(env[SEED_ENV])
    return HactConfig.from_json(obj)
