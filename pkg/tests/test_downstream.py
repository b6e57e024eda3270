import hashlib

import numpy as np
import pytest

from isovae.data import LabeledCorpus, SyntheticSpec, build_vocab, encode_corpus, generate_synthetic_text
from isovae.distributions import DIAGONAL
from isovae.downstream import (ClassifierConfig, TextClassifier, classify, corrupt_corpus, extract_means, few_shot,
                               nested_subsets, robustness_eval)
from isovae.models import SeqVae, SeqVaeConfig
from isovae.objectives import ObjectiveConfig
from isovae.trainer import fit

FAST = ClassifierConfig(hidden=(16,), epochs=10, repetitions=3, lr=1e-2)


@pytest.fixture(scope="module")
def corpus():
    sc = generate_synthetic_text(SyntheticSpec(n_train=400, n_dev=20, n_test=200, seed=0))
    vocab = build_vocab(sc.train)
    return vocab, encode_corpus(vocab, *sc.split("train"), "train"), encode_corpus(vocab, *sc.split("test"), "test")


def small_vae(vocab_size, seed=0):
    cfg = SeqVaeConfig(vocab_size, embed_dim=8, hidden_dim=16, latent_dim=4, geometry=DIAGONAL,
                       objective=ObjectiveConfig("constrained", target_c=3.0), word_dropout=0.3)
    return SeqVae(cfg, rng=seed)


def param_hash(model):
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(model.params[k].data.tobytes())
    return h.hexdigest()


def test_separable_features():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 400)
    x = rng.standard_normal((400, 3)) + 6.0 * y[:, None]
    res = classify(x, y, FAST, seed=0)
    assert res.mean > 0.99 and len(res.accuracies) == FAST.repetitions
    assert 0 <= res.std and 0 <= res.mean <= 1


def test_shuffled_labels_near_chance():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1000, 4))
    y = rng.integers(0, 4, 1000)
    res = classify(x, y, FAST, seed=0)
    assert abs(res.mean - 0.25) < 3 * np.sqrt(0.25 * 0.75 / 200) + 3 * res.std


def test_classify_errors():
    with pytest.raises(ValueError):
        classify(np.zeros((10, 2)), np.zeros(10, dtype=int), FAST)
    y = np.array([0] * 30 + [1])
    # the lone class-1 example lands in the test split for this seed
    seed = next(s for s in range(100) if 30 in __import__("isovae.downstream", fromlist=["x"]).split_indices(
        31, FAST, s)[2])
    with pytest.raises(ValueError):
        classify(np.random.default_rng(0).standard_normal((31, 2)), y, FAST, seed)
    with pytest.raises(ValueError):
        ClassifierConfig(repetitions=0)
    with pytest.raises(ValueError):
        ClassifierConfig(test_fraction=0.7, val_fraction=0.5)


def test_nested_subsets():
    subs = nested_subsets(1000, [0.001, 0.01, 0.1, 1.0], seed=3)
    fr = sorted(subs)
    for a, b in zip(fr, fr[1:]):
        assert set(subs[a]) <= set(subs[b])
    assert len(subs[1.0]) == 1000 and len(subs[0.001]) == 1


def test_few_shot_too_small_fraction(corpus):
    _, train, test = corpus
    with pytest.raises(ValueError):
        few_shot(train, test, lambda s, seed: None, fractions=(0.001,))


def test_extract_means_and_frozen_encoder(corpus):
    vocab, train, test = corpus
    m = small_vae(len(vocab))
    before = param_hash(m)
    a, b = extract_means(m, test), extract_means(m, test)
    np.testing.assert_array_equal(a.means, b.means)
    assert a.means.shape == (len(test), 4)
    res = classify(a.means, test.labels, FAST, seed=0)
    robustness_eval(m, res.classifiers[0], test.subset(res.test_index), 0.3, seed=0)
    assert param_hash(m) == before
    with pytest.raises(ValueError):
        extract_means(m, LabeledCorpus([]))


def test_robustness_identity_and_destruction(corpus):
    vocab, train, test = corpus
    m = small_vae(len(vocab))
    fit(m, train, epochs=3, batch_size=32, lr=5e-3, seed=0)
    feats = extract_means(m, test).means
    res = classify(feats, test.labels, FAST, seed=0)
    held = test.subset(res.test_index)
    clean = [robustness_eval(m, c, held, 0.0, seed=0) for c in res.classifiers]
    assert clean == res.accuracies
    assert robustness_eval(m, res.classifiers[0], held, 0.3, seed=5) == \
        robustness_eval(m, res.classifiers[0], held, 0.3, seed=5)
    wrecked = np.mean([robustness_eval(m, c, held, 0.99, seed=0) for c in res.classifiers])
    assert wrecked < res.mean
    assert all(len(s) >= 1 for s in corrupt_corpus(held, 0.99, 0).sentences)


def test_few_shot_trend(corpus):
    vocab, train, test = corpus

    def pipeline(subset, seed):
        m = small_vae(len(vocab), seed)
        fit(m, subset, epochs=4, batch_size=16, lr=5e-3, seed=seed)
        return m

    res = few_shot(train, test, pipeline, fractions=(0.025, 0.25, 1.0), seed=0, config=FAST)
    fr = sorted(res)
    for a, b in zip(fr, fr[1:]):
        assert res[b].mean >= res[a].mean - max(res[a].std, res[b].std)


def test_text_classifier_learns(corpus):
    vocab, train, test = corpus
    clf = TextClassifier(len(vocab), 4, embed_dim=8, hidden_dim=16, mlp=(16,), rng=0).fit(train, epochs=10)
    assert np.mean(clf.predict(test) == np.asarray(test.labels)) > 0.8
