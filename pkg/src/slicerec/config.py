"""Flat declarative run configuration.

One ``key = value`` file drives every command; ablation grids are config
diffs. Unknown keys are rejected. Environment variables with the
``SLICEREC_`` prefix override file values (e.g. SLICEREC_SEED=3), and every
run writes its resolved configuration next to its outputs. Run directories
are named by the resolved config hash plus the seed.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, fields

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

ENV_PREFIX = "SLICEREC_"


@dataclass
class RunConfig:
    # data
    data_dir: str = ""
    out_dir: str = "runs"
    # model
    embed_dim: int = 16
    num_layers: int = 2
    fusion_mode: str = "gru_per_side"
    graph_mode: str = "time_sliced"
    slice_rnn: bool = True
    concat_id: bool = True
    side_mode: str = "both"
    dropout: float = 0.0
    dropout_sites: str = "mlp"   # comma separated
    slice_input: str = "chained"
    # optimization
    batch_size: int = 100
    learning_rate: float = 5e-4
    l2: float = 1e-4
    beta: float = 1e-3
    neg_per_pos_train: int = 1
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    window: str = "sliding"
    min_history: int = 0
    clip_norm: float = 5.0
    # evaluation
    eval_k: int = 10
    eval_negatives: int = 100

    def model_config(self) -> ModelConfig:
        sites = tuple(s for s in self.dropout_sites.split(",") if s)
        return ModelConfig(
            embed_dim=self.embed_dim, num_layers=self.num_layers,
            fusion_mode=self.fusion_mode, graph_mode=self.graph_mode,
            slice_rnn=self.slice_rnn, concat_id=self.concat_id,
            side_mode=self.side_mode, dropout=self.dropout,
            dropout_sites=sites, slice_input=self.slice_input,
        ).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            l2=self.l2, beta=self.beta, neg_per_pos_train=self.neg_per_pos_train,
            max_epochs=self.max_epochs, patience=self.patience, seed=self.seed,
            window=self.window, min_history=self.min_history, clip_norm=self.clip_norm,
            eval_k=self.eval_k, eval_negatives=self.eval_negatives,
        ).validate()

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def config_hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_dir(self) -> str:
        return os.path.join(self.out_dir, f"{self.config_hash()}-s{self.seed}")

    def write_resolved(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for name, value in self.as_dict().items():
                fh.write(f"{name} = {value}\n")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected {kind}, got {raw!r}") from None
    return raw


def parse_overrides(pairs) -> dict:
    """key=value strings (CLI --set / grid entries) to typed values."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load(path=None, overrides=None, env=None) -> RunConfig:
    """Resolve defaults < file < environment < explicit overrides."""
    values = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
                key, raw = line.split("=", 1)
                key = key.strip()
                if key not in _FIELD_TYPES:
                    raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
                values[key] = _coerce(key, raw)
    env = os.environ if env is None else env
    for key in _FIELD_TYPES:
        env_name = ENV_PREFIX + key.upper()
        if env_name in env:
            values[key] = _coerce(key, env[env_name])
    if overrides:
        values.update(overrides)
    cfg = RunConfig(**values)
    cfg.model_config()   # validate eagerly
    cfg.train_config()
    return cfg
