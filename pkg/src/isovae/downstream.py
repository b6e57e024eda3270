"""Frozen-encoder evaluation: MLP probes on posterior means, few-shot
subsampling, robustness to word deletion, and the text classifier used for
label agreement."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import LabeledCorpus, batch_iter, pad_batch
from .metrics import LatentSummary, word_dropout
from .models import _project_sequence, _uniform, run_lstm
from .optim import Adam
from .trainer import posterior_means, posterior_samples


@dataclass
class ClassifierConfig:
    hidden: tuple[int, ...] = (128, 128)
    lr: float = 1e-3
    epochs: int = 20
    repetitions: int = 10
    test_fraction: float = 0.2
    val_fraction: float = 0.2
    batch_size: int = 32

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.test_fraction < 0 or self.val_fraction < 0 or self.test_fraction + self.val_fraction > 1:
            raise ValueError("split fractions must be non-negative and sum to at most 1")


class MLPClassifier:
    """ReLU MLP trained with Adam; keeps the parameters with the best validation accuracy."""

    def __init__(self, in_dim: int, n_classes: int, hidden=(128, 128), rng=None):
        rng = np.random.default_rng(rng)
        sizes = (in_dim,) + tuple(hidden) + (n_classes,)
        self.params = {}
        for i in range(len(sizes) - 1):
            self.params[f"w{i}"] = _uniform(rng, sizes[i], (sizes[i], sizes[i + 1]))
            self.params[f"b{i}"] = _uniform(rng, sizes[i], (sizes[i + 1],))
        self.n_layers = len(sizes) - 1

    def logits(self, x) -> ad.Tensor:
        h = x if isinstance(x, ad.Tensor) else ad.constant(np.asarray(x, dtype=np.float64))
        for i in range(self.n_layers):
            h = ad.add_bias(ad.matmul(h, self.params[f"w{i}"]), self.params[f"b{i}"])
            if i < self.n_layers - 1:
                h = ad.relu(h)
        return h

    def predict(self, x) -> np.ndarray:
        return self.logits(x).data.argmax(axis=1)

    def fit(self, x, y, epochs: int, lr: float, batch_size: int, rng, x_val=None, y_val=None):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y)
        opt = Adam(list(self.params.values()), lr=lr, clip=None)
        best, best_params = -1.0, None
        for _ in range(epochs):
            order = rng.permutation(len(x))
            for s in range(0, len(x), batch_size):
                idx = order[s:s + batch_size]
                opt.zero_grad()
                with ad.Tape() as tape:
                    loss = ad.mean(ad.softmax_cross_entropy(self.logits(x[idx]), y[idx]))
                tape.backward(loss)
                opt.step()
            if x_val is not None and len(x_val):
                acc = float(np.mean(self.predict(x_val) == y_val))
                if acc > best:
                    best, best_params = acc, {k: v.data.copy() for k, v in self.params.items()}
        if best_params is not None:
            for k, v in best_params.items():
                self.params[k].data = v
        return self


def extract_means(encoder, corpus) -> LatentSummary:
    """Posterior means (and one sample each) from a frozen encoder."""
    if not len(corpus):
        raise ValueError("extract_means: empty corpus")
    return LatentSummary(posterior_means(encoder, corpus), posterior_samples(encoder, corpus))


@dataclass
class ClassifyResult:
    mean: float
    std: float
    accuracies: list[float] = field(default_factory=list)
    classifiers: list[MLPClassifier] = field(default_factory=list, repr=False)
    test_index: np.ndarray | None = field(default=None, repr=False)


def split_indices(n: int, config: ClassifierConfig, seed: int):
    """Representation-level split: test, then validation carved from the training part."""
    order = np.random.default_rng([seed, 7]).permutation(n)
    n_test = int(round(config.test_fraction * n))
    test, rest = order[:n_test], order[n_test:]
    n_val = int(round(config.val_fraction * len(rest)))
    return rest[n_val:], rest[:n_val], test


def classify(features, labels, config: ClassifierConfig | None = None, seed: int = 0) -> ClassifyResult:
    """Mean and std test accuracy of ``repetitions`` randomly initialised MLPs."""
    config = config or ClassifierConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("classify needs at least two classes")
    train, val, test = split_indices(len(x), config, seed)
    missing = set(classes.tolist()) - set(y[train].tolist())
    if missing:
        raise ValueError(f"classes {sorted(missing)} are missing from the training split")
    n_classes = int(classes.max()) + 1
    accs, models = [], []
    for rep in range(config.repetitions):
        rng = np.random.default_rng([seed, rep])
        clf = MLPClassifier(x.shape[1], n_classes, config.hidden, rng=rng)
        clf.fit(x[train], y[train], config.epochs, config.lr, config.batch_size, rng, x[val], y[val])
        accs.append(float(np.mean(clf.predict(x[test]) == y[test])))
        models.append(clf)
    return ClassifyResult(float(np.mean(accs)), float(np.std(accs)), accs, models, test)


def nested_subsets(n: int, fractions, seed: int = 0) -> dict[float, np.ndarray]:
    """Prefixes of one fixed permutation, so smaller fractions nest in larger ones."""
    order = np.random.default_rng([seed, 11]).permutation(n)
    return {f: np.sort(order[:max(1, math.ceil(f * n))]) for f in sorted(fractions)}


def few_shot(train: LabeledCorpus, test: LabeledCorpus, pipeline, fractions=(0.001, 0.01, 0.1, 1.0),
             seed: int = 0, config: ClassifierConfig | None = None) -> dict[float, ClassifyResult]:
    """Train an encoder on nested training subsamples and probe it on the test pool.

    ``pipeline(subset, seed)`` must return a trained encoder.
    """
    if train.labels is None or test.labels is None:
        raise ValueError("few_shot needs labeled corpora")
    classes = set(train.labels)
    subsets = nested_subsets(len(train), fractions, seed)
    for f, idx in subsets.items():
        seen = {train.labels[i] for i in idx}
        if seen != classes:
            raise ValueError(f"fraction {f} yields {len(idx)} examples, fewer than one per class")
    out = {}
    for f, idx in subsets.items():
        encoder = pipeline(train.subset(idx), seed)
        out[f] = classify(posterior_means(encoder, test), test.labels, config, seed)
    return out


def corrupt_corpus(corpus: LabeledCorpus, rate: float, seed: int) -> LabeledCorpus:
    rng = np.random.default_rng([seed, 13])
    return LabeledCorpus([word_dropout(s, rate, rng) for s in corpus.sentences], corpus.labels, corpus.split)


def robustness_eval(encoder, classifier: MLPClassifier, corpus: LabeledCorpus, rate: float = 0.3,
                    seed: int = 0) -> float:
    """Accuracy of a clean-trained classifier on re-encoded, word-dropped sentences."""
    if corpus.labels is None:
        raise ValueError("robustness_eval needs a labeled corpus")
    polluted = corrupt_corpus(corpus, rate, seed)
    pred = classifier.predict(posterior_means(encoder, polluted))
    return float(np.mean(pred == np.asarray(corpus.labels)))


class TextClassifier:
    """LSTM sentence encoder followed by a ReLU MLP, trained on raw token ids."""

    def __init__(self, vocab_size: int, n_classes: int, embed_dim: int = 32, hidden_dim: int = 64,
                 mlp=(128, 128), rng=None):
        rng = np.random.default_rng(rng)
        E, H = embed_dim, hidden_dim
        self.hidden_dim = H
        self.params = {
            "embed": _uniform(rng, E, (vocab_size, E)),
            "w_ih": _uniform(rng, E, (E, 4 * H)),
            "w_hh": _uniform(rng, H, (H, 4 * H)),
            "b": _uniform(rng, H, (4 * H,)),
        }
        self.head = MLPClassifier(H, n_classes, mlp, rng=rng)

    def parameters(self):
        return list(self.params.values()) + list(self.head.params.values())

    def _features(self, batch) -> ad.Tensor:
        p = self.params
        xproj = _project_sequence(p["embed"], batch.ids, p["w_ih"], p["b"])
        mask = (np.arange(batch.ids.shape[1])[None, :] < batch.lengths[:, None]).astype(np.float64)
        return run_lstm(xproj, p["w_hh"], self.hidden_dim, mask)[-1]

    def predict(self, sentences) -> np.ndarray:
        if isinstance(sentences, LabeledCorpus):
            sentences = sentences.sentences
        out = []
        for s in range(0, len(sentences), 256):
            chunk = [list(x) if len(x) else [0] for x in sentences[s:s + 256]]
            out.append(self.head.predict(self._features(pad_batch(chunk))))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def fit(self, corpus: LabeledCorpus, epochs: int = 5, lr: float = 5e-3, batch_size: int = 32, seed: int = 0):
        opt = Adam(self.parameters(), lr=lr)
        y = np.asarray(corpus.labels)
        for epoch in range(epochs):
            for b in batch_iter(corpus, batch_size, shuffle=True, seed=seed, epoch=epoch):
                opt.zero_grad()
                with ad.Tape() as tape:
                    loss = ad.mean(ad.softmax_cross_entropy(self.head.logits(self._features(b)), y[b.index]))
                tape.backward(loss)
                opt.step()
        return self
