"""Loss assembly for the plain, target-KL, beta and importance-weighted objectives.

Every loss here is a quantity to *minimize*. Arguments may be Python floats
or scalar tensors; with tensors the result stays on the active tape.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor

KINDS = ("plain", "constrained", "beta", "iwae")


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


@dataclass
class ObjectiveConfig:
    kind: str = "constrained"
    target_c: float | None = None
    beta: float | None = None
    iwae_k: int | None = None
    c_warmup_steps: int = 0
    c_warmup_start: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"objective must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "constrained":
            if self.target_c is None or self.target_c < 0:
                raise ValueError("constrained objective needs target_c >= 0")
            if self.beta is None:
                self.beta = 1.0
        elif self.target_c is not None:
            raise ValueError(f"target_c is only valid for the constrained objective, not {self.kind}")
        if self.kind == "beta" and (self.beta is None or self.beta <= 0):
            raise ValueError("beta objective needs beta > 0")
        if self.kind in ("plain", "iwae") and self.beta is not None:
            raise ValueError(f"beta is not a setting of the {self.kind} objective")
        if self.kind == "iwae":
            if self.iwae_k is None or self.iwae_k < 1:
                raise ValueError("iwae objective needs iwae_k >= 1")
        elif self.iwae_k is not None:
            raise ValueError("iwae_k is only valid for the iwae objective")
        if self.c_warmup_steps < 0:
            raise ValueError("c_warmup_steps must be >= 0")

    def target_at(self, step: int) -> float:
        """Target KL at optimizer step ``step``, with optional linear warm-up."""
        if self.target_c is None:
            raise ValueError("no target for this objective")
        if self.c_warmup_steps <= 0 or step >= self.c_warmup_steps:
            return self.target_c
        frac = step / self.c_warmup_steps
        return self.c_warmup_start + frac * (self.target_c - self.c_warmup_start)


def elbo_loss(rec_loss, kl):
    """Negative ELBO: reconstruction NLL plus KL."""
    if _value(kl) < 0:
        raise ValueError(f"kl must be non-negative, got {_value(kl)}")
    return rec_loss + kl


def constrained_loss(rec_loss, kl, c: float, beta: float = 1.0):
    """``rec + beta * |kl - C|``; the subgradient at ``kl == C`` is 0."""
    if c < 0:
        raise ValueError(f"C must be non-negative, got {c}")
    if isinstance(kl, Tensor):
        return rec_loss + ad.abs_(kl - c) * beta
    return rec_loss + beta * abs(kl - c)


def beta_loss(rec_loss, kl, beta: float):
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if beta == 1.0:
        # same expression as elbo_loss, so the two agree bitwise
        return rec_loss + kl
    return rec_loss + kl * beta


def objective_loss(cfg: ObjectiveConfig, rec_loss, kl, step: int = 0):
    """Dispatch on ``cfg.kind`` (iwae losses are assembled by the model)."""
    if cfg.kind == "plain":
        return rec_loss + kl
    if cfg.kind == "constrained":
        return constrained_loss(rec_loss, kl, cfg.target_at(step), cfg.beta)
    if cfg.kind == "beta":
        return beta_loss(rec_loss, kl, cfg.beta)
    raise ValueError("iwae loss is computed by the model's bound, not from (rec, kl)")


@dataclass
class CapacityDiagnostics:
    distortion: float
    rate: float
    rate_bound_gap: float


def capacity_diagnostics(rec_loss_mean: float, kl_mean: float, target_c: float | None = None) -> CapacityDiagnostics:
    """Distortion D and rate R for the bound ``H - D <= I(x; z) <= R``.

    ``rate_bound_gap`` is ``R - C`` when a target is given, else ``R``.
    """
    rate = float(kl_mean)
    gap = rate - target_c if target_c is not None else rate
    return CapacityDiagnostics(float(rec_loss_mean), rate, gap)
