"""Run configuration: ``key=value`` files and command-line overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .checkpoint import read_kv
from .models import SeqVaeConfig, VectorVaeConfig
from .objectives import ObjectiveConfig

OUTPUT_ENV = "ISOVAE_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def _opt_float(v):
    return None if v in (None, "", "none", "None") else float(v)


def _opt_int(v):
    return None if v in (None, "", "none", "None") else int(v)


def _opt_str(v):
    return None if v in (None, "", "none", "None") else str(v)


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_tuple(v):
    if isinstance(v, (tuple, list)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).split(",") if x.strip())


@dataclass
class RunConfig:
    run_id: str = "run"
    model: str = "seq"
    model_kind: str = "vae"
    geometry: str = "isotropic"
    objective: str = "constrained"
    target_c: float | None = None
    beta: float | None = None
    iwae_k: int | None = None
    c_warmup_steps: int | None = None
    embed_dim: int = 32
    hidden_dim: int = 64
    latent_dim: int = 8
    max_decode_len: int = 20
    word_dropout: float = 0.3
    prior: str = "standard_normal"
    prior_components: int = 5
    hidden_dims: tuple = (64, 64)
    vector_dim: int = 64
    vector_classes: int = 4
    vector_noise: float = 0.1
    vector_train: int = 2000
    vector_dev: int = 200
    vector_test: int = 200
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.0005
    clip: float | None = 5.0
    seed: int = 0
    data: str | None = None
    dev_data: str | None = None
    test_data: str | None = None
    labeled: bool = False
    synthetic: str | None = None
    min_freq: int = 1
    max_vocab: int | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.model not in ("seq", "vector"):
            raise ConfigError(f"model must be 'seq' or 'vector', got {self.model!r}")
        if self.objective == "constrained" and self.target_c is None:
            self.target_c = 5.0
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch_size and lr must be positive")
        try:
            self.objective_config(1)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # -- conversion ---------------------------------------------------------------------------

    @classmethod
    def from_mapping(cls, kv: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(kv) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            values = {k: _CONVERT[k](v) for k, v in kv.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from None
        return cls(**values)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        try:
            kv = read_kv(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        kv.update(overrides or {})
        return cls.from_mapping(kv)

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            out[f.name] = "none" if v is None else str(v)
        return out

    def replace(self, **changes) -> "RunConfig":
        kv = self.to_mapping()
        kv.update({k: v for k, v in changes.items()})
        return RunConfig.from_mapping(kv)

    # -- derived settings ---------------------------------------------------------------------

    def output_root(self) -> str:
        return self.output_dir or os.environ.get(OUTPUT_ENV, "runs")

    def objective_config(self, steps_per_epoch: int) -> ObjectiveConfig:
        warm = self.c_warmup_steps
        if self.objective == "constrained" and warm is None:
            # linear 0 -> C over the first 20% of steps for sequence models
            warm = int(0.2 * self.epochs * steps_per_epoch) if self.model == "seq" else 0
        return ObjectiveConfig(self.objective, target_c=self.target_c if self.objective == "constrained" else None,
                               beta=self.beta, iwae_k=self.iwae_k,
                               c_warmup_steps=warm if self.objective == "constrained" else 0)

    def seq_model_config(self, vocab_size: int, steps_per_epoch: int) -> SeqVaeConfig:
        return SeqVaeConfig(vocab_size, self.embed_dim, self.hidden_dim, self.latent_dim, self.geometry,
                            self.objective_config(steps_per_epoch), self.max_decode_len, self.model_kind,
                            self.prior, self.prior_components, self.word_dropout)

    def vector_model_config(self, steps_per_epoch: int) -> VectorVaeConfig:
        return VectorVaeConfig(self.vector_dim, tuple(self.hidden_dims), self.latent_dim, self.geometry,
                               self.objective_config(steps_per_epoch), self.iwae_k or 1, self.model_kind,
                               self.prior, self.prior_components)


_CONVERT = {
    "run_id": str, "model": str, "model_kind": str, "geometry": str, "objective": str,
    "target_c": _opt_float, "beta": _opt_float, "iwae_k": _opt_int, "c_warmup_steps": _opt_int,
    "embed_dim": int, "hidden_dim": int, "latent_dim": int, "max_decode_len": int, "word_dropout": float,
    "prior": str, "prior_components": int, "hidden_dims": _int_tuple, "vector_dim": int, "vector_classes": int,
    "vector_noise": float, "vector_train": int, "vector_dev": int, "vector_test": int,
    "epochs": int, "batch_size": int, "lr": float, "clip": _opt_float, "seed": int,
    "data": _opt_str, "dev_data": _opt_str, "test_data": _opt_str, "labeled": _bool, "synthetic": _opt_str,
    "min_freq": int, "max_vocab": _opt_int, "output_dir": _opt_str,
}
