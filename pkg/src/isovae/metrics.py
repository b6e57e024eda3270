"""Evaluation battery: active units, BLEU/ROUGE, perplexities, agreement,
corruption helpers and aggregated-posterior shape statistics."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import LabeledCorpus, batch_iter
from .models import LanguageModel
from .optim import Adam

BLEU_EPS = 1e-9


def active_units(means: np.ndarray, threshold: float = 0.01) -> int:
    """Dimensions whose posterior mean varies across examples by more than ``threshold``."""
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 2 or means.shape[0] < 2:
        raise ValueError("active_units needs an (N, d) matrix with N >= 2")
    return int(np.sum(means.var(axis=0) > threshold))


# -- n-gram metrics -------------------------------------------------------------------------

def _tokens(s) -> list[str]:
    return s.split() if isinstance(s, str) else [str(t) for t in s]


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _paired(hypotheses, references):
    hyps = [_tokens(h) for h in hypotheses]
    refs = [_tokens(r) for r in references]
    if not hyps or len(hyps) != len(refs):
        raise ValueError("need a non-empty, equally sized hypothesis/reference corpus")
    return hyps, refs


def modified_precision(hypotheses, references, n: int) -> tuple[int, int]:
    """Corpus totals ``(clipped matches, hypothesis n-grams)`` for order ``n``."""
    hyps, refs = _paired(hypotheses, references)
    match = total = 0
    for h, r in zip(hyps, refs):
        hc, rc = ngrams(h, n), ngrams(r, n)
        match += sum(min(c, rc[g]) for g, c in hc.items())
        total += sum(hc.values())
    return match, total


def bleu_n(hypotheses, references, n: int = 4) -> float:
    """Corpus BLEU with uniform weights over orders 1..n and a brevity penalty.

    Zero match counts are floored at ``BLEU_EPS``.
    """
    hyps, refs = _paired(hypotheses, references)
    if n < 1:
        raise ValueError("n must be >= 1")
    log_p = 0.0
    for k in range(1, n + 1):
        match, total = modified_precision(hyps, refs, k)
        log_p += math.log(max(match, BLEU_EPS) / max(total, 1))
    c = sum(len(h) for h in hyps)
    r = sum(len(x) for x in refs)
    if c == 0:
        return 0.0
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / n)


@dataclass
class RougeScore:
    score: float
    skipped: int


def rouge_n(hypotheses, references, n: int = 2, return_skipped: bool = False):
    """Mean per-pair n-gram recall; references shorter than ``n`` are skipped."""
    hyps, refs = _paired(hypotheses, references)
    recalls = []
    skipped = 0
    for h, r in zip(hyps, refs):
        rc = ngrams(r, n)
        if not rc:
            skipped += 1
            continue
        hc = ngrams(h, n)
        recalls.append(sum(min(c, hc[g]) for g, c in rc.items()) / sum(rc.values()))
    score = float(np.mean(recalls)) if recalls else 0.0
    return RougeScore(score, skipped) if return_skipped else score


# -- perplexity -----------------------------------------------------------------------------

@dataclass
class LMConfig:
    embed_dim: int = 32
    hidden_dim: int = 64
    epochs: int = 10
    batch_size: int = 32
    lr: float = 5e-3


def perplexity_from_nll(total_nll: float, n_tokens: int) -> float:
    if n_tokens < 1:
        raise ValueError("perplexity needs at least one token")
    return math.exp(total_nll / n_tokens)


def train_language_model(corpus: LabeledCorpus, vocab_size: int, config: LMConfig | None = None,
                         seed: int = 0) -> LanguageModel:
    if not len(corpus):
        raise ValueError("cannot train a language model on an empty corpus")
    config = config or LMConfig()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(101,)))
    lm = LanguageModel(vocab_size, config.embed_dim, config.hidden_dim, rng=rng)
    opt = Adam(lm.parameters(), lr=config.lr)
    for epoch in range(config.epochs):
        for b in batch_iter(corpus, config.batch_size, shuffle=True, seed=seed, epoch=epoch):
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = ad.mean(lm.nll(b))
            tape.backward(loss)
            opt.step()
    return lm


def corpus_perplexity(lm: LanguageModel, corpus: LabeledCorpus, batch_size: int = 256) -> float:
    """``exp`` of the mean per-token NLL, end-of-sequence tokens included."""
    if not len(corpus):
        raise ValueError("cannot score an empty corpus")
    nll = 0.0
    n = 0
    for b in batch_iter(corpus, batch_size):
        nll += float(lm.nll(b).data.sum())
        n += int(b.lengths.sum() + len(b.lengths))
    return perplexity_from_nll(nll, n)


def forward_reverse_perplexity(real_train: LabeledCorpus, real_test: LabeledCorpus, generated: LabeledCorpus,
                               vocab_size: int, lm_config: LMConfig | None = None, seed: int = 0):
    """Forward: real-trained LM scored on generated text. Reverse: generated-trained LM on real test."""
    for name, c in (("real_train", real_train), ("real_test", real_test), ("generated", generated)):
        if not len(c):
            raise ValueError(f"{name} corpus is empty")
    real_lm = train_language_model(real_train, vocab_size, lm_config, seed)
    gen_lm = train_language_model(generated, vocab_size, lm_config, seed)
    return corpus_perplexity(real_lm, generated), corpus_perplexity(gen_lm, real_test)


# -- label agreement --------------------------------------------------------------------------

def macro_f1(y_true, y_pred, labels=None) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if labels is None:
        labels = np.unique(np.concatenate([y_true, y_pred]))
    scores = []
    for c in labels:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def agreement(classifier, reconstructed_test, original_test, labels) -> float:
    """Macro-F1 on reconstructions divided by macro-F1 on the originals."""
    classes = np.unique(labels)
    base = macro_f1(labels, classifier.predict(original_test), classes)
    if base == 0:
        raise ZeroDivisionError("classifier has zero macro-F1 on the original test set")
    return macro_f1(labels, classifier.predict(reconstructed_test), classes) / base


# -- corruption ----------------------------------------------------------------------------------

def word_dropout(sentence, rate: float = 0.3, rng=None) -> list:
    """Delete each token independently with probability ``rate``; keep at least one."""
    sentence = list(sentence)
    if not sentence:
        raise ValueError("word_dropout: empty sentence")
    if rate <= 0:
        return sentence
    rng = np.random.default_rng(rng)
    keep = rng.random(len(sentence)) >= rate
    if not keep.any():
        keep[int(rng.integers(len(sentence)))] = True
    return [t for t, k in zip(sentence, keep) if k]


def impute(sentence, keep_fraction: float = 0.25) -> list:
    """Leading ``ceil(keep_fraction * L)`` tokens of the sentence."""
    sentence = list(sentence)
    if not sentence:
        raise ValueError("impute: empty sentence")
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    return sentence[:math.ceil(keep_fraction * len(sentence) - 1e-12)]


# -- aggregated posterior shape -------------------------------------------------------------------

@dataclass
class LatentSummary:
    means: np.ndarray
    samples: np.ndarray

    def __post_init__(self):
        if self.means.shape[0] != self.samples.shape[0]:
            raise ValueError("means and samples must have equal row counts")
        if not (np.all(np.isfinite(self.means)) and np.all(np.isfinite(self.samples))):
            raise ValueError("latent summary contains non-finite entries")


class SingularCovariance(np.linalg.LinAlgError):
    pass


def posterior_shape(samples: np.ndarray, jitter: float = 1e-8) -> tuple[float, float]:
    """``(||mean||^2, log det Cov)`` of aggregated-posterior samples."""
    samples = np.asarray(samples, dtype=np.float64)
    N, d = samples.shape
    if N <= d:
        raise SingularCovariance(f"need more samples than dimensions (N={N}, d={d})")
    mu = samples.mean(axis=0)
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    eig = np.linalg.eigvalsh(cov)
    if eig.min() <= 1e-12 * max(1.0, eig.max()):
        raise SingularCovariance("sample covariance is singular")
    chol = np.linalg.cholesky(cov + jitter * np.eye(d))
    return float(mu @ mu), float(2.0 * np.log(np.diag(chol)).sum())


# -- reports ----------------------------------------------------------------------------------------

SCALARS = ("rec_loss", "kl", "au", "bleu2", "bleu4", "rouge2", "rouge4", "fwd_ppl", "rev_ppl",
           "agreement", "robustness_acc", "accuracy", "logdetcov", "mu_norm_sq")


@dataclass
class MetricReport:
    run_id: str
    scalars: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    timestamp: str | None = None
    kind: str = "eval"

    def validate(self, latent_dim: int | None = None) -> None:
        s = self.scalars
        if "au" in s and latent_dim is not None and not 0 <= s["au"] <= latent_dim:
            raise ValueError(f"au {s['au']} outside [0, {latent_dim}]")
        for k in ("bleu2", "bleu4", "rouge2", "rouge4"):
            if k in s and not 0.0 <= s[k] <= 1.0:
                raise ValueError(f"{k} = {s[k]} outside [0, 1]")
        for k in ("fwd_ppl", "rev_ppl"):
            if k in s and s[k] < 1.0:
                raise ValueError(f"{k} = {s[k]} below 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricReport":
        return cls(**json.loads(line))
