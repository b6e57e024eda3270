"""In-memory training loops and evaluation passes shared by the runner."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Batch, LabeledCorpus, batch_iter
from .models import SeqVae, VectorVae, _LatentModel
from .objectives import capacity_diagnostics
from .optim import Adam

log = logging.getLogger(__name__)

STREAMS = ("init", "shuffle", "reparam", "dropout", "eval", "classifier")


def stream(seed: int, name: str) -> np.random.Generator:
    """Named RNG stream derived deterministically from the run seed."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS.index(name),)))


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class EpochStats:
    epoch: int
    loss: float
    rec_loss: float
    kl: float
    dev_loss: float | None = None
    dev_rec_loss: float | None = None
    dev_kl: float | None = None
    distortion: float = 0.0
    rate: float = 0.0


@dataclass
class FitResult:
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int | None = None
    best_params: dict[str, np.ndarray] | None = None
    steps: int = 0


class VectorData:
    """Minimal batching for (N, D) arrays to mirror :func:`batch_iter`."""

    def __init__(self, x: np.ndarray):
        self.x = np.asarray(x, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.x)

    def batches(self, batch_size: int, shuffle: bool, seed, epoch: int):
        order = np.arange(len(self.x))
        if shuffle:
            order = np.random.default_rng([int(seed), int(epoch)]).permutation(len(self.x))
        for s in range(0, len(order), batch_size):
            yield ad.constant(self.x[order[s:s + batch_size]])


def _iter(data, batch_size, shuffle, seed, epoch):
    if isinstance(data, VectorData):
        return data.batches(batch_size, shuffle, seed, epoch)
    return batch_iter(data, batch_size, shuffle=shuffle, seed=seed, epoch=epoch)


def _size(batch) -> int:
    return batch.ids.shape[0] if isinstance(batch, Batch) else batch.shape[0]


def snapshot(model) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.params.items()}


def restore(model, params: dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        model.params[k].data = v.copy()


def evaluate(model: _LatentModel, data, batch_size: int = 256, seed: int = 0, step: int | None = None):
    """Mean (objective, rec_loss, kl) over ``data`` with fixed evaluation noise."""
    rng = stream(seed, "eval")
    tot = rec_sum = kl_sum = 0.0
    n = 0
    for b in _iter(data, batch_size, False, seed, 0):
        loss, rec, kl = model.loss(b, rng, step=10 ** 12 if step is None else step)
        m = _size(b)
        tot += float(loss.data) * m
        rec_sum += float(rec.data.sum())
        kl_sum += float(kl.data.sum())
        n += m
    return tot / n, rec_sum / n, kl_sum / n


def fit(model: _LatentModel, train, epochs: int, batch_size: int, lr: float, seed: int,
        dev=None, clip: float | None = 5.0, on_epoch=None, step_offset: int = 0) -> FitResult:
    """Train ``model`` in place; keeps the parameters with the best dev objective."""
    opt = Adam(model.parameters(), lr=lr, clip=clip)
    reparam = stream(seed, "reparam")
    dropout = stream(seed, "dropout")
    result = FitResult(steps=step_offset)
    best = np.inf
    for epoch in range(epochs):
        tot = rec_sum = kl_sum = 0.0
        n = 0
        for bi, b in enumerate(_iter(train, batch_size, True, seed, epoch)):
            opt.zero_grad()
            with ad.Tape() as tape:
                loss, rec, kl = model.loss(b, reparam, step=result.steps, drop_rng=dropout)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {bi}, step {result.steps}")
            tape.backward(loss)
            opt.step()
            result.steps += 1
            m = _size(b)
            tot += value * m
            rec_sum += float(rec.data.sum())
            kl_sum += float(kl.data.sum())
            n += m
        diag = capacity_diagnostics(rec_sum / n, kl_sum / n)
        stats = EpochStats(epoch, tot / n, rec_sum / n, kl_sum / n, distortion=diag.distortion, rate=diag.rate)
        if dev is not None and len(dev):
            stats.dev_loss, stats.dev_rec_loss, stats.dev_kl = evaluate(model, dev, seed=seed)
            if stats.dev_loss < best:
                best = stats.dev_loss
                result.best_epoch = epoch
                result.best_params = snapshot(model)
        log.debug("epoch %d loss %.4f rec %.4f kl %.4f", epoch, stats.loss, stats.rec_loss, stats.kl)
        result.history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return result


def posterior_means(model: _LatentModel, data, batch_size: int = 256) -> np.ndarray:
    """Posterior means for every example, in corpus order."""
    rows = []
    for b in _iter(data, batch_size, False, 0, 0):
        rows.append(model.encode(b).mean.data.copy())
    return np.concatenate(rows, axis=0)


def posterior_samples(model: _LatentModel, data, seed: int = 0, batch_size: int = 256) -> np.ndarray:
    """One ``z ~ q(z|x)`` per example: unbiased draws from the aggregated posterior."""
    rng = stream(seed, "eval")
    rows = []
    for b in _iter(data, batch_size, False, 0, 0):
        post = model.encode(b)
        rows.append(post.mean.data + post.sigma() * rng.standard_normal(post.mean.shape))
    return np.concatenate(rows, axis=0)


def as_data(model, corpus):
    """Wrap raw arrays for vector models; corpora pass through."""
    if isinstance(model, VectorVae) and not isinstance(corpus, VectorData):
        return VectorData(corpus)
    return corpus


__all__ = ["fit", "evaluate", "posterior_means", "posterior_samples", "stream", "snapshot", "restore",
           "VectorData", "FitResult", "EpochStats", "NonFiniteLoss", "as_data", "SeqVae", "LabeledCorpus"]
