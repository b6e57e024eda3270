"""Gaussian posteriors, priors, KL terms and reparameterized sampling.

A posterior is *diagonal* (one log-variance per latent dimension) or
*isotropic* (a single log-variance shared by every dimension). Means and
log-variances are :class:`~isovae.autodiff.Tensor` objects, batched along the
leading axis, so the same code serves training and analysis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, erfc

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tensor

DIAGONAL = "diagonal"
ISOTROPIC = "isotropic"
LOG_2PI = math.log(2.0 * math.pi)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.tensor(x)


def expand_last(x: Tensor, d: int) -> Tensor:
    """Repeat a trailing axis of length 1 to length ``d`` (explicit, via matmul)."""
    if x.shape[-1] == d:
        return x
    if x.shape[-1] != 1:
        raise ShapeError(f"expand_last: trailing extent must be 1 or {d}, got {x.shape}")
    ones = ad.constant(np.ones((1, d)))
    if x.ndim == 1:
        return ad.reshape(ad.matmul(ad.reshape(x, (1, 1)), ones), (d,))
    return ad.matmul(x, ones)


@dataclass
class GaussianPosterior:
    mean: Tensor
    log_var: Tensor
    geometry: str = DIAGONAL

    def __post_init__(self):
        self.mean = _as_tensor(self.mean)
        self.log_var = _as_tensor(self.log_var)
        if self.geometry not in (DIAGONAL, ISOTROPIC):
            raise ValueError(f"unknown geometry {self.geometry!r}")
        want = 1 if self.geometry == ISOTROPIC else self.dim
        if self.log_var.shape[-1] != want or self.log_var.shape[:-1] != self.mean.shape[:-1]:
            raise ShapeError(
                f"{self.geometry} posterior: log_var shape {self.log_var.shape} does not fit mean {self.mean.shape}")
        if not (np.all(np.isfinite(self.mean.data)) and np.all(np.isfinite(self.log_var.data))):
            raise NonFiniteError("posterior parameters must be finite")
        with np.errstate(over="ignore", under="ignore"):
            var = np.exp(self.log_var.data)
        if not np.all(np.isfinite(var)) or np.any(var <= 0):
            raise NonFiniteError("posterior variance must be positive and finite")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def full_log_var(self) -> Tensor:
        return expand_last(self.log_var, self.dim)

    def sigma(self) -> np.ndarray:
        """Per-dimension standard deviations (no gradient)."""
        return np.broadcast_to(np.exp(0.5 * self.log_var.data), self.mean.shape).copy()


@dataclass
class LatentSample:
    z: Tensor
    eps: np.ndarray


@dataclass
class Prior:
    """Standard normal, or a uniform-weight mixture of ``K`` Gaussians."""
    kind: str = "standard_normal"
    means: Tensor | None = None
    log_vars: Tensor | None = None
    geometry: str = DIAGONAL

    def __post_init__(self):
        if self.kind == "standard_normal":
            return
        if self.kind != "mixture":
            raise ValueError(f"unknown prior kind {self.kind!r}")
        self.means = _as_tensor(self.means)
        self.log_vars = _as_tensor(self.log_vars)
        if self.means.ndim != 2 or self.means.shape[0] < 1:
            raise ShapeError("mixture prior needs means of shape (K, d) with K >= 1")
        want = 1 if self.geometry == ISOTROPIC else self.means.shape[1]
        if self.log_vars.shape != (self.means.shape[0], want):
            raise ShapeError(f"mixture log_vars shape {self.log_vars.shape}, expected {(self.means.shape[0], want)}")

    @property
    def n_components(self) -> int:
        return 1 if self.kind == "standard_normal" else self.means.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n_components, 1.0 / self.n_components)

    @classmethod
    def mixture(cls, k: int, d: int, geometry: str = DIAGONAL, rng=None, trainable: bool = True) -> "Prior":
        """Mixture with component means drawn from N(0, I) and unit variances."""
        rng = np.random.default_rng(rng)
        means = ad.tensor(rng.standard_normal((k, d)), requires_grad=trainable)
        lv = ad.tensor(np.zeros((k, 1 if geometry == ISOTROPIC else d)), requires_grad=trainable)
        return cls("mixture", means, lv, geometry)

    def parameters(self) -> list[Tensor]:
        if self.kind == "standard_normal":
            return []
        return [t for t in (self.means, self.log_vars) if t.requires_grad]


def kl_to_standard_normal(p: GaussianPosterior) -> Tensor:
    """Closed-form KL(q || N(0, I)), summed over the last axis."""
    lv = p.full_log_var()
    mu = p.mean
    inner = mu * mu + ad.exp(lv) - lv - 1.0
    return ad.sum_(inner, axis=-1) * 0.5


def sample_reparameterized(p: GaussianPosterior, eps) -> LatentSample:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != p.mean.shape:
        raise ShapeError(f"sample_reparameterized: noise shape {eps.shape} vs mean {p.mean.shape}")
    sigma = ad.exp(p.full_log_var() * 0.5)
    z = p.mean + sigma * ad.constant(eps)
    return LatentSample(z, eps)


def tie_variances(p: GaussianPosterior) -> GaussianPosterior:
    """Isotropic posterior with the same mean and sigma = min_i sigma_i."""
    if p.geometry != DIAGONAL:
        raise ValueError("tie_variances expects a diagonal posterior")
    lv = p.log_var.data.min(axis=-1, keepdims=True)
    return GaussianPosterior(ad.tensor(p.mean.data), ad.tensor(lv), ISOTROPIC)


def box_probability(p: GaussianPosterior, eps: float):
    """Probability that every coordinate lies within ``eps`` of its mean."""
    if not eps > 0:
        raise ValueError(f"box_probability: eps must be positive, got {eps}")
    return np.exp(log_box_probability(p, eps))


def log_box_probability(p: GaussianPosterior, eps: float):
    if not eps > 0:
        raise ValueError(f"box_probability: eps must be positive, got {eps}")
    sigma = p.sigma()
    # log(erf(a)) via log1p(-erfc(a)) keeps precision near 1
    return np.log1p(-erfc(eps / (math.sqrt(2.0) * sigma))).sum(axis=-1)


def box_mass_1d(sigma, eps: float):
    """Mass of N(0, sigma^2) on (-eps, eps); strictly decreasing in sigma."""
    return erf(eps / (math.sqrt(2.0) * np.asarray(sigma, dtype=np.float64)))


@dataclass
class Theorem1Report:
    n_trials: int
    d: int
    eps_values: tuple[float, ...]
    kl_violations: int
    box_violations: int
    monotone_violations: int
    worst_kl_slack: float
    worst_box_slack: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.kl_violations == 0 and self.box_violations == 0 and self.monotone_violations == 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} tied-variance check: trials={self.n_trials} d={self.d} "
                f"kl_violations={self.kl_violations} box_violations={self.box_violations} "
                f"monotone_violations={self.monotone_violations} "
                f"worst_kl_slack={self.worst_kl_slack:.6g} worst_box_slack={self.worst_box_slack:.6g}")


def verify_theorem1(n_trials: int, d: int, seed=0, eps_values=(0.1, 1.0),
                    sigma_range=(0.05, 5.0), grid_points: int = 50, tol: float = 1e-12) -> Theorem1Report:
    """Check KL(diag) <= KL(tied) and box(diag) <= box(tied) on random posteriors.

    Slack is ``tied - diagonal`` (log-probabilities for the box claim); a
    violation is slack below ``-tol``. Monotone decrease of the 1-D box mass in
    sigma is checked on a ``grid_points`` grid over ``sigma_range`` via erfc,
    which does not saturate at 1.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = sigma_range
    mu = rng.standard_normal((n_trials, d))
    sigma = rng.uniform(lo, hi, size=(n_trials, d))
    p = GaussianPosterior(ad.tensor(mu), ad.tensor(2.0 * np.log(sigma)), DIAGONAL)
    q = tie_variances(p)

    kl_slack = kl_to_standard_normal(q).data - kl_to_standard_normal(p).data
    box_slack = np.stack([log_box_probability(q, e) - log_box_probability(p, e) for e in eps_values])

    grid = np.linspace(lo, hi, grid_points)
    monotone = 0
    for e in eps_values:
        tail = erfc(e / (math.sqrt(2.0) * grid))  # 1 - f(sigma)
        monotone += int(np.sum(np.diff(tail) <= 0))

    return Theorem1Report(
        n_trials=n_trials, d=d, eps_values=tuple(eps_values),
        kl_violations=int(np.sum(kl_slack < -tol)),
        box_violations=int(np.sum(box_slack < -tol)),
        monotone_violations=monotone,
        worst_kl_slack=float(kl_slack.min()),
        worst_box_slack=float(box_slack.min()),
        tol=tol,
    )


def log_density(dist, z) -> Tensor:
    """Exact log density of ``z`` under a posterior or prior (summed over latent dims)."""
    z = _as_tensor(z)
    if isinstance(dist, GaussianPosterior):
        if z.shape != dist.mean.shape:
            raise ShapeError(f"log_density: z shape {z.shape} vs mean {dist.mean.shape}")
        lv = dist.full_log_var()
        diff = z - dist.mean
        quad = diff * diff * ad.exp(-lv)
        return ad.sum_(quad + lv, axis=-1) * -0.5 - 0.5 * dist.dim * LOG_2PI
    if not isinstance(dist, Prior):
        raise TypeError(f"log_density: unsupported distribution {type(dist).__name__}")
    d = z.shape[-1]
    if dist.kind == "standard_normal":
        return ad.sum_(z * z, axis=-1) * -0.5 - 0.5 * d * LOG_2PI
    if d != dist.means.shape[1]:
        raise ShapeError(f"log_density: z dim {d} vs prior dim {dist.means.shape[1]}")
    squeeze = z.ndim == 1
    zz = ad.reshape(z, (1, d)) if squeeze else z
    B = zz.shape[0]
    ones_col = ad.constant(np.ones((B, 1)))
    cols = []
    for k in range(dist.n_components):
        mean_k = ad.reshape(dist.means[k], (d,))
        lv_k = ad.reshape(dist.log_vars[k:k + 1], (-1, 1))
        if lv_k.shape[0] == 1:
            lv_col = ad.matmul(ad.constant(np.ones((d, 1))), lv_k)
        else:
            lv_col = lv_k
        diff = ad.add_bias(zz, -mean_k)
        quad = ad.matmul(diff * diff, ad.exp(-lv_col))            # (B, 1)
        logdet = ad.reshape(ad.sum_(lv_col), (1, 1))              # (1, 1)
        comp = (quad + ad.matmul(ones_col, logdet)) * -0.5
        cols.append(comp)
    stacked = ad.concat(cols, axis=1)                              # (B, K)
    out = ad.logsumexp(stacked, axis=1) - math.log(dist.n_components) - 0.5 * d * LOG_2PI
    return ad.reshape(out, ()) if squeeze else out


def kl_term(p: GaussianPosterior, prior: Prior, z: Tensor | None = None) -> Tensor:
    """KL used in training: closed form for N(0, I), single-sample estimate otherwise."""
    if prior.kind == "standard_normal":
        return kl_to_standard_normal(p)
    if z is None:
        raise ValueError("mixture-prior KL needs the sampled z")
    return log_density(p, z) - log_density(prior, z)


def mc_kl_terms(p: GaussianPosterior, prior: Prior, n: int, seed=0) -> np.ndarray:
    """``n`` draws of ``log q(z) - log prior(z)`` with ``z ~ q`` for a single posterior."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if p.mean.ndim != 1:
        raise ShapeError("mc_kl_terms expects an unbatched posterior")
    rng = np.random.default_rng(seed)
    d = p.dim
    eps = rng.standard_normal((n, d))
    mu = p.mean.data
    lv = np.broadcast_to(p.log_var.data, (d,))
    zs = mu + np.exp(0.5 * lv) * eps
    rep = GaussianPosterior(ad.constant(np.tile(mu, (n, 1))), ad.constant(np.tile(p.log_var.data, (n, 1))), p.geometry)
    frozen = prior
    if prior.kind == "mixture":
        frozen = Prior("mixture", ad.constant(prior.means.data), ad.constant(prior.log_vars.data), prior.geometry)
    z = ad.constant(zs)
    return log_density(rep, z).data - log_density(frozen, z).data


def mc_kl_estimate(p: GaussianPosterior, prior: Prior, n: int, seed=0) -> float:
    return float(mc_kl_terms(p, prior, n, seed).mean())
