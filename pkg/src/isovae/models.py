"""Sequence and vector VAEs with diagonal or isotropic posterior heads.

The sequence model is an LSTM encoder/decoder; the latent code is
concatenated to the word embedding at every decoder step. The vector model is
an MLP pair with a Bernoulli likelihood. Both expose the same loss surface:
``reconstruction`` (per-example NLL), ``kl`` and ``iwae_bound``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import EOS, PAD, SOS, UNK, Batch, pad_batch
from .distributions import (DIAGONAL, ISOTROPIC, GaussianPosterior, Prior, kl_term, log_density)
from .objectives import ObjectiveConfig, objective_loss

PRIORS = ("standard_normal", "mog", "moig")


def _uniform(rng, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return ad.tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Differentiable row gather (the embedding op applied to a 2-D tensor)."""
    return ad.embedding(x, idx)


def run_lstm(xproj: Tensor, w_hh: Tensor, hidden: int, mask=None, extra: Tensor | None = None):
    """Unroll an LSTM over ``xproj`` of shape ``(B, T, 4H)``.

    ``extra`` (``(B, 4H)``) is added to every step's projection; ``mask`` is a
    ``(B, T)`` 0/1 array freezing the state on padded steps. Returns the list
    of per-step hidden states.
    """
    B, T = xproj.shape[0], xproj.shape[1]
    h = ad.constant(np.zeros((B, hidden)))
    c = ad.constant(np.zeros((B, hidden)))
    hs = []
    for t in range(T):
        xp = ad.reshape(xproj[:, t, :], (B, 4 * hidden))
        if extra is not None:
            xp = xp + extra
        hc = ad.lstm_cell(xp, h, c, w_hh, None if mask is None else mask[:, t])
        h = hc[:, :hidden]
        c = hc[:, hidden:]
        hs.append(h)
    return hs


def _project_sequence(table: Tensor, ids: np.ndarray, w_ih: Tensor, b: Tensor) -> Tensor:
    B, T = ids.shape
    emb = ad.embedding(table, ids.reshape(-1))
    return ad.reshape(ad.add_bias(ad.matmul(emb, w_ih), b), (B, T, w_ih.shape[1]))


def _check_geometry(geometry: str) -> None:
    if geometry not in (DIAGONAL, ISOTROPIC):
        raise ValueError(f"geometry must be {DIAGONAL!r} or {ISOTROPIC!r}, got {geometry!r}")


class _LatentModel:
    """Shared posterior/prior/objective plumbing."""

    params: dict[str, Tensor]
    geometry: str
    latent_dim: int
    prior: Prior
    objective: ObjectiveConfig
    kind: str

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _init_prior(self, prior: str, k: int, rng) -> None:
        if prior not in PRIORS:
            raise ValueError(f"prior must be one of {PRIORS}, got {prior!r}")
        if prior == "standard_normal":
            self.prior = Prior()
            return
        geo = ISOTROPIC if prior == "moig" else DIAGONAL
        self.prior = Prior.mixture(k, self.latent_dim, geo, rng=rng)
        self.params["prior.means"] = self.prior.means
        self.params["prior.log_vars"] = self.prior.log_vars

    def _head(self, h: Tensor) -> GaussianPosterior:
        p = self.params
        mu = ad.add_bias(ad.matmul(h, p["head.w_mu"]), p["head.b_mu"])
        lv = ad.add_bias(ad.matmul(h, p["head.w_lv"]), p["head.b_lv"])
        return GaussianPosterior(mu, lv, self.geometry)

    def _head_params(self, rng, hidden: int) -> None:
        d = self.latent_dim
        lv_out = 1 if self.geometry == ISOTROPIC else d
        self.params["head.w_mu"] = _uniform(rng, hidden, (hidden, d))
        self.params["head.b_mu"] = _uniform(rng, hidden, (d,))
        self.params["head.w_lv"] = _uniform(rng, hidden, (hidden, lv_out))
        self.params["head.b_lv"] = _uniform(rng, hidden, (lv_out,))

    def kl(self, post: GaussianPosterior, z: Tensor | None = None) -> Tensor:
        return kl_term(post, self.prior, z)

    def sample(self, post: GaussianPosterior, eps) -> Tensor:
        sigma = ad.exp(post.full_log_var() * 0.5)
        return post.mean + sigma * ad.constant(eps)

    def reconstruction(self, x, z: Tensor, drop_rng=None) -> Tensor:
        raise NotImplementedError

    def loss(self, x, rng: np.random.Generator | None = None, step: int = 0, eps=None, drop_rng=None):
        """Training loss and per-example diagnostics for one batch.

        Returns ``(loss, rec, kl)`` where ``rec`` and ``kl`` are per-example
        tensors and ``loss`` is the batch-mean objective. ``drop_rng`` enables
        decoder input word dropout (training only).
        """
        post = self.encode(x)
        B, d = post.mean.shape
        if self.kind == "ae":
            rec = self.reconstruction(x, post.mean, drop_rng)
            kl = ad.constant(np.zeros(B))
            return ad.mean(rec), rec, kl
        if self.objective.kind == "iwae":
            k = self.objective.iwae_k
            if eps is None:
                eps = rng.standard_normal((k, B, d))
            bound, rec, kl = self._iwae(x, post, eps, drop_rng)
            return ad.mean(bound) * -1.0, rec, kl
        if eps is None:
            eps = rng.standard_normal((B, d))
        z = self.sample(post, eps)
        rec = self.reconstruction(x, z, drop_rng)
        kl = self.kl(post, z)
        # target-KL is applied to the batch-mean KL
        loss = objective_loss(self.objective, ad.mean(rec), ad.mean(kl), step)
        return loss, rec, kl

    def _iwae(self, x, post: GaussianPosterior, eps, drop_rng=None):
        eps = np.asarray(eps, dtype=np.float64)
        k, B, d = eps.shape
        idx = np.tile(np.arange(B), k)
        mu = gather_rows(post.mean, idx)
        lv = gather_rows(post.log_var, idx)
        rep = GaussianPosterior(mu, lv, post.geometry)
        z = mu + ad.exp(rep.full_log_var() * 0.5) * ad.constant(eps.reshape(k * B, d))
        rec = self.reconstruction(self._repeat_input(x, idx), z, drop_rng)
        logw = rec * -1.0 + log_density(self.prior, z) - log_density(rep, z)
        bound = ad.logsumexp(ad.reshape(logw, (k, B)), axis=0) - math.log(k)
        kl_samples = ad.reshape(log_density(rep, z) - log_density(self.prior, z), (k, B))
        rec_mean = ad.mean(ad.reshape(rec, (k, B)), axis=0)
        return bound, rec_mean, ad.mean(kl_samples, axis=0)

    def elbo_estimate(self, x, eps) -> Tensor:
        """Single-sample ``log p(x|z) + log p(z) - log q(z|x)`` per example."""
        eps = np.asarray(eps, dtype=np.float64)
        post = self.encode(x)
        z = self.sample(post, eps)
        rec = self.reconstruction(x, z)
        return rec * -1.0 + log_density(self.prior, z) - log_density(post, z)


# -- sequence model ----------------------------------------------------------------------

@dataclass
class SeqVaeConfig:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 64
    latent_dim: int = 8
    geometry: str = ISOTROPIC
    objective: ObjectiveConfig = field(default_factory=lambda: ObjectiveConfig("constrained", target_c=5.0))
    max_decode_len: int = 20
    model_kind: str = "vae"
    prior: str = "standard_normal"
    prior_components: int = 5
    word_dropout: float = 0.0
    sos_id: int = SOS
    eos_id: int = EOS

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "hidden_dim", "latent_dim", "max_decode_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        _check_geometry(self.geometry)
        if self.model_kind not in ("vae", "ae"):
            raise ValueError(f"model_kind must be 'vae' or 'ae', got {self.model_kind!r}")
        if not 0.0 <= self.word_dropout < 1.0:
            raise ValueError("word_dropout must lie in [0, 1)")


class SeqVae(_LatentModel):
    def __init__(self, config: SeqVaeConfig, rng=None):
        self.config = config
        self.geometry = config.geometry
        self.latent_dim = config.latent_dim
        self.objective = config.objective
        self.kind = config.model_kind
        rng = np.random.default_rng(rng)
        V, E, H, d = config.vocab_size, config.embed_dim, config.hidden_dim, config.latent_dim
        # separate embedding tables for encoder and decoder
        self.params = {
            "enc.embed": _uniform(rng, E, (V, E)),
            "enc.w_ih": _uniform(rng, E, (E, 4 * H)),
            "enc.w_hh": _uniform(rng, H, (H, 4 * H)),
            "enc.b": _uniform(rng, H, (4 * H,)),
        }
        self._head_params(rng, H)
        self.params.update({
            "dec.embed": _uniform(rng, E, (V, E)),
            "dec.w_ih": _uniform(rng, E + d, (E, 4 * H)),
            "dec.w_z": _uniform(rng, E + d, (d, 4 * H)),
            "dec.w_hh": _uniform(rng, H, (H, 4 * H)),
            "dec.b": _uniform(rng, H, (4 * H,)),
            "out.w": _uniform(rng, H, (H, V)),
            "out.b": _uniform(rng, H, (V,)),
        })
        self._init_prior(config.prior, config.prior_components, rng)

    # inputs are either a Batch or a single token list
    @staticmethod
    def _as_batch(x) -> Batch:
        if isinstance(x, Batch):
            return x
        if len(x) and not isinstance(x[0], (int, np.integer)):
            return pad_batch([list(s) for s in x])
        return pad_batch([list(x)])

    def _check_tokens(self, batch: Batch) -> None:
        if batch.ids.size == 0 or np.any(batch.lengths < 1):
            raise ValueError("encode: empty input sequence")
        valid = np.arange(batch.ids.shape[1])[None, :] < batch.lengths[:, None]
        ids = batch.ids[valid]
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise IndexError(f"token id out of vocabulary (size {self.config.vocab_size})")

    def encode(self, x) -> GaussianPosterior:
        batch = self._as_batch(x)
        self._check_tokens(batch)
        p, H = self.params, self.config.hidden_dim
        xproj = _project_sequence(p["enc.embed"], batch.ids, p["enc.w_ih"], p["enc.b"])
        mask = (np.arange(batch.ids.shape[1])[None, :] < batch.lengths[:, None]).astype(np.float64)
        hs = run_lstm(xproj, p["enc.w_hh"], H, mask)
        return self._head(hs[-1])

    def _targets(self, batch: Batch):
        B, T = batch.ids.shape
        tgt = np.full((B, T + 1), PAD, dtype=np.int64)
        tgt[:, :T] = batch.ids
        tgt[np.arange(B), batch.lengths] = self.config.eos_id
        return tgt, batch.lengths + 1

    def reconstruction(self, x, z: Tensor, drop_rng=None) -> Tensor:
        """Per-example NLL of the sentence plus end-of-sequence, teacher forced."""
        batch = self._as_batch(x)
        tgt, lengths = self._targets(batch)
        return self.decode_teacher_forced(z, tgt, lengths, drop_rng)

    def decode_teacher_forced(self, z: Tensor, targets, lengths=None, drop_rng=None) -> Tensor:
        """Summed softmax cross-entropy of ``targets`` given ``z``; shape ``(B,)``.

        Step inputs are ``[embedding(previous token); z]`` starting from the
        start-of-sequence token.
        """
        targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
        B, T = targets.shape
        if T == 0:
            raise ValueError("decode_teacher_forced: empty target")
        if lengths is None:
            lengths = np.full(B, T)
        if z.ndim == 1:
            z = ad.reshape(z, (1, z.shape[0]))
        if z.shape != (B, self.latent_dim):
            raise ad.ShapeError(f"decode_teacher_forced: z shape {z.shape}, expected {(B, self.latent_dim)}")
        p, H = self.params, self.config.hidden_dim
        inputs = np.empty_like(targets)
        inputs[:, 0] = self.config.sos_id
        inputs[:, 1:] = targets[:, :-1]
        if drop_rng is not None and self.config.word_dropout > 0:
            drop = drop_rng.random(inputs.shape) < self.config.word_dropout
            drop[:, 0] = False
            inputs[drop] = UNK
        xproj = _project_sequence(p["dec.embed"], inputs, p["dec.w_ih"], p["dec.b"])
        zproj = ad.matmul(z, p["dec.w_z"])
        hs = run_lstm(xproj, p["dec.w_hh"], H, extra=zproj)
        flat = ad.concat(hs, axis=0)                                        # (T*B, H), time-major
        logits = ad.add_bias(ad.matmul(flat, p["out.w"]), p["out.b"])
        tgt_tm = targets.T.reshape(-1)
        mask = (np.arange(T)[:, None] < np.asarray(lengths)[None, :]).astype(np.float64).reshape(-1)
        safe = np.where(mask > 0, tgt_tm, 0)
        ce = ad.softmax_cross_entropy(logits, safe) * ad.constant(mask)
        return ad.sum_(ad.reshape(ce, (T, B)), axis=0)

    def greedy_decode(self, z, max_len: int | None = None) -> list[list[int]]:
        """Argmax decoding; stops at end-of-sequence or ``max_len`` tokens."""
        if max_len is None:
            max_len = self.config.max_decode_len
        zd = np.atleast_2d(z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64))
        if zd.shape[1] != self.latent_dim:
            raise ad.ShapeError(f"greedy_decode: z dim {zd.shape[1]}, expected {self.latent_dim}")
        B = zd.shape[0]
        out = [[] for _ in range(B)]
        if max_len <= 0:
            return out
        p = {k: v.data for k, v in self.params.items()}
        H = self.config.hidden_dim
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        zproj = zd @ p["dec.w_z"] + p["dec.b"]
        prev = np.full(B, self.config.sos_id, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        banned = [i for i in (PAD, self.config.sos_id) if i != self.config.eos_id and i < self.config.vocab_size]
        for _ in range(max_len):
            xp = ad.constant(p["dec.embed"][prev] @ p["dec.w_ih"] + zproj)
            hc = ad.lstm_cell(xp, ad.constant(h), ad.constant(c), ad.constant(p["dec.w_hh"])).data
            h, c = hc[:, :H], hc[:, H:]
            logits = h @ p["out.w"] + p["out.b"]
            logits[:, banned] = -np.inf
            nxt = logits.argmax(axis=1)
            for r in range(B):
                if done[r]:
                    continue
                if nxt[r] == self.config.eos_id:
                    done[r] = True
                else:
                    out[r].append(int(nxt[r]))
            if done.all():
                break
            prev = nxt
        return out

    def _repeat_input(self, x, idx):
        batch = self._as_batch(x)
        return Batch(batch.ids[idx], batch.lengths[idx], batch.index[idx])


# -- vector model ------------------------------------------------------------------------

@dataclass
class VectorVaeConfig:
    input_dim: int = 64
    hidden_dims: tuple[int, ...] = (64, 64)
    latent_dim: int = 8
    geometry: str = ISOTROPIC
    objective: ObjectiveConfig = field(default_factory=lambda: ObjectiveConfig("plain"))
    iwae_k: int = 1
    model_kind: str = "vae"
    prior: str = "standard_normal"
    prior_components: int = 5

    def __post_init__(self):
        if self.input_dim < 1 or self.latent_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("vector VAE dims must be positive")
        if self.iwae_k < 1:
            raise ValueError("iwae_k must be >= 1")
        self.hidden_dims = tuple(self.hidden_dims)
        _check_geometry(self.geometry)


class VectorVae(_LatentModel):
    """MLP encoder/decoder with tanh hidden layers and Bernoulli outputs."""

    def __init__(self, config: VectorVaeConfig, rng=None):
        self.config = config
        self.geometry = config.geometry
        self.latent_dim = config.latent_dim
        self.objective = config.objective
        self.kind = config.model_kind
        rng = np.random.default_rng(rng)
        self.params = {}
        sizes = (config.input_dim,) + config.hidden_dims
        for i in range(len(config.hidden_dims)):
            self.params[f"enc.w{i}"] = _uniform(rng, sizes[i], (sizes[i], sizes[i + 1]))
            self.params[f"enc.b{i}"] = _uniform(rng, sizes[i], (sizes[i + 1],))
        self._head_params(rng, sizes[-1])
        dsizes = (config.latent_dim,) + tuple(reversed(config.hidden_dims)) + (config.input_dim,)
        for i in range(len(dsizes) - 1):
            self.params[f"dec.w{i}"] = _uniform(rng, dsizes[i], (dsizes[i], dsizes[i + 1]))
            self.params[f"dec.b{i}"] = _uniform(rng, dsizes[i], (dsizes[i + 1],))
        self._n_dec = len(dsizes) - 1
        self._init_prior(config.prior, config.prior_components, rng)

    def _check_input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else ad.constant(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        if x.shape[-1] != self.config.input_dim:
            raise ad.ShapeError(f"input dim {x.shape[-1]}, expected {self.config.input_dim}")
        if np.any(x.data < 0) or np.any(x.data > 1):
            raise ValueError("vector input entries must lie in [0, 1]")
        return x

    def encode(self, x) -> GaussianPosterior:
        h = self._check_input(x)
        for i in range(len(self.config.hidden_dims)):
            h = ad.tanh(ad.add_bias(ad.matmul(h, self.params[f"enc.w{i}"]), self.params[f"enc.b{i}"]))
        return self._head(h)

    def decoder_logits(self, z: Tensor) -> Tensor:
        h = z
        for i in range(self._n_dec):
            h = ad.add_bias(ad.matmul(h, self.params[f"dec.w{i}"]), self.params[f"dec.b{i}"])
            if i < self._n_dec - 1:
                h = ad.tanh(h)
        return h

    def reconstruction(self, x, z: Tensor, drop_rng=None) -> Tensor:
        """Bernoulli NLL from logits, summed over input dims; shape ``(B,)``."""
        x = self._check_input(x)
        logits = self.decoder_logits(z)
        return ad.sum_(ad.softplus(logits) - x * logits, axis=-1)

    def _repeat_input(self, x, idx):
        x = self._check_input(x)
        return ad.constant(x.data[idx])


def vector_forward(model: VectorVae, x, eps=None):
    """Posterior and per-example Bernoulli NLL; ``eps=None`` decodes from the mean."""
    post = model.encode(x)
    z = post.mean if eps is None else model.sample(post, eps)
    return post, model.reconstruction(x, z)


def iwae_bound(model: _LatentModel, x, k: int, seed=0, eps=None) -> Tensor:
    """k-sample importance-weighted lower bound on ``log p(x)``, per example."""
    if k < 1:
        raise ValueError("k must be >= 1")
    post = model.encode(x)
    B, d = post.mean.shape
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal((k, B, d))
    bound, _, _ = model._iwae(x, post, eps)
    return bound


def ae_forward(model: _LatentModel, x) -> Tensor:
    """Deterministic reconstruction with ``z`` = posterior mean and no KL term."""
    post = model.encode(x)
    return model.reconstruction(x, post.mean)


def untie_warm_start(model: SeqVae | VectorVae):
    """Copy an isotropic model into a diagonal one with replicated variance head."""
    if model.geometry != ISOTROPIC:
        raise ValueError("untie_warm_start needs an isotropic source model")
    d = model.latent_dim
    cfg = replace(model.config, geometry=DIAGONAL)
    target = type(model)(cfg, rng=0)
    for name, t in model.params.items():
        data = t.data.copy()
        if name == "head.w_lv":
            data = np.repeat(data, d, axis=1)
        elif name == "head.b_lv":
            data = np.repeat(data, d)
        if target.params[name].shape != data.shape:
            raise ad.ShapeError(f"untie: parameter {name} shape {data.shape} vs {target.params[name].shape}")
        target.params[name].data = data
    return target


# -- language model for perplexity ----------------------------------------------------------

class LanguageModel:
    """LSTM language model scoring token sequences with an end-of-sequence token."""

    def __init__(self, vocab_size: int, embed_dim: int = 32, hidden_dim: int = 64, rng=None):
        rng = np.random.default_rng(rng)
        E, H, V = embed_dim, hidden_dim, vocab_size
        self.vocab_size, self.hidden_dim = V, H
        self.params = {
            "embed": _uniform(rng, E, (V, E)),
            "w_ih": _uniform(rng, E, (E, 4 * H)),
            "w_hh": _uniform(rng, H, (H, 4 * H)),
            "b": _uniform(rng, H, (4 * H,)),
            "out.w": _uniform(rng, H, (H, V)),
            "out.b": _uniform(rng, H, (V,)),
        }

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def nll(self, batch: Batch) -> Tensor:
        """Summed token NLL per sentence (end-of-sequence included); shape ``(B,)``."""
        p, H = self.params, self.hidden_dim
        B, T = batch.ids.shape
        tgt = np.full((B, T + 1), PAD, dtype=np.int64)
        tgt[:, :T] = batch.ids
        tgt[np.arange(B), batch.lengths] = EOS
        inputs = np.empty_like(tgt)
        inputs[:, 0] = SOS
        inputs[:, 1:] = tgt[:, :-1]
        xproj = _project_sequence(p["embed"], inputs, p["w_ih"], p["b"])
        hs = run_lstm(xproj, p["w_hh"], H)
        logits = ad.add_bias(ad.matmul(ad.concat(hs, axis=0), p["out.w"]), p["out.b"])
        mask = (np.arange(T + 1)[:, None] < (batch.lengths + 1)[None, :]).astype(np.float64).reshape(-1)
        ce = ad.softmax_cross_entropy(logits, np.where(mask > 0, tgt.T.reshape(-1), 0)) * ad.constant(mask)
        return ad.sum_(ad.reshape(ce, (T + 1, B)), axis=0)
