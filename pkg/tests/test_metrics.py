import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isovae.data import LabeledCorpus
from isovae.metrics import (LMConfig, MetricReport, SingularCovariance, active_units, agreement, bleu_n,
                            corpus_perplexity, forward_reverse_perplexity, impute, macro_f1, modified_precision,
                            perplexity_from_nll, posterior_shape, rouge_n, train_language_model, word_dropout)

# -- active units -----------------------------------------------------------------------------------


def test_au_identical_means():
    assert active_units(np.ones((10, 4))) == 0


def test_au_standard_normal():
    assert active_units(np.random.default_rng(0).standard_normal((1000, 32))) == 32


def test_au_constructed_mixture_of_active_and_frozen():
    rng = np.random.default_rng(1)
    means = np.concatenate([rng.standard_normal((1000, 4)), 1e-3 * rng.standard_normal((1000, 28))], axis=1)
    assert active_units(means) == 4


def test_au_needs_two_rows():
    with pytest.raises(ValueError):
        active_units(np.zeros((1, 3)))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.integers(0, 1000))
def test_au_monotone_in_threshold(t1, t2, seed):
    means = np.random.default_rng(seed).standard_normal((20, 6)) * np.linspace(0.05, 1.5, 6)
    lo, hi = sorted((t1, t2))
    assert active_units(means, hi) <= active_units(means, lo)


# -- BLEU / ROUGE ------------------------------------------------------------------------------------

def test_bleu_identity():
    refs = ["the cat sat on the mat", "a dog ran home quickly"]
    assert bleu_n(refs, refs, 2) == pytest.approx(1.0, abs=1e-12)
    assert bleu_n(refs, refs, 4) == pytest.approx(1.0, abs=1e-12)


def test_bleu_disjoint_is_floored():
    assert bleu_n(["x y z w"], ["a b c d"], 2) < 1e-3


def test_bleu_clipping_example():
    assert modified_precision(["the the the"], ["the cat sat"], 1) == (1, 3)
    # bigram matches are zero and floored at 1e-9 over 2 candidates
    assert bleu_n(["the the the"], ["the cat sat"], 2) == pytest.approx(math.sqrt(1 / 3 * 0.5e-9), rel=1e-12)


def test_bleu_brevity_penalty():
    assert bleu_n(["a b c"], ["a b c d e"], 2) == pytest.approx(math.exp(1 - 5 / 3), rel=1e-12)


def test_bleu4_hand_worked():
    hyp, ref = "a b c d e f", "a b c d x f"
    # orders 1..4: 5/6, 3/5, 2/4, 1/3, equal lengths
    expect = (5 / 6 * 3 / 5 * 2 / 4 * 1 / 3) ** 0.25
    assert bleu_n([hyp], [ref], 4) == pytest.approx(expect, rel=1e-12)


def test_rouge_examples():
    assert rouge_n(["a b c d"], ["a b c d"], 2) == 1.0
    assert rouge_n(["x y"], ["a b"], 2) == 0.0
    assert rouge_n(["a b x d"], ["a b c d"], 2) == pytest.approx(1 / 3, abs=1e-15)


def test_rouge4_hand_worked_and_skips():
    r = rouge_n(["a b c d e", "q"], ["a b c d f", "short ref"], 4, return_skipped=True)
    assert r.skipped == 1
    assert r.score == pytest.approx(0.5, abs=1e-15)


def test_metric_errors():
    with pytest.raises(ValueError):
        bleu_n([], [], 2)
    with pytest.raises(ValueError):
        rouge_n(["a"], ["a", "b"], 2)


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(4)))
def test_corpus_order_invariance(perm):
    hyps = ["a b c d", "the cat sat", "x y", "one two three four five"]
    refs = ["a b c e", "the cat ran", "x y z", "one two three four"]
    h2, r2 = [hyps[i] for i in perm], [refs[i] for i in perm]
    assert bleu_n(h2, r2, 4) == pytest.approx(bleu_n(hyps, refs, 4), rel=1e-12)
    assert rouge_n(h2, r2, 2) == pytest.approx(rouge_n(hyps, refs, 2), rel=1e-12)


# -- perplexity ---------------------------------------------------------------------------------------

def test_uniform_predictor_perplexity_is_vocab_size():
    V, L = 37, 123
    assert perplexity_from_nll(L * math.log(V), L) == pytest.approx(V, rel=1e-12)
    with pytest.raises(ValueError):
        perplexity_from_nll(1.0, 0)


def test_memorizing_one_sentence_drives_perplexity_to_one():
    corpus = LabeledCorpus([[4, 5, 6, 7]] * 32)
    lm = train_language_model(corpus, 8, LMConfig(embed_dim=8, hidden_dim=16, epochs=40, lr=3e-2), seed=0)
    assert corpus_perplexity(lm, corpus) < 1.05


def _toy_corpora():
    rng = np.random.default_rng(0)
    # a deterministic "grammar": token t is followed by t+1
    real = [list(range(s, s + 5)) for s in rng.integers(4, 10, size=120)]
    noise = [list(rng.integers(4, 15, size=5)) for _ in range(120)]
    return LabeledCorpus(real[:100]), LabeledCorpus(real[100:]), LabeledCorpus(real[:100]), LabeledCorpus(noise)


def test_reverse_perplexity_direction_and_determinism():
    train, test, good, noise = _toy_corpora()
    cfg = LMConfig(embed_dim=8, hidden_dim=16, epochs=20, lr=2e-2)
    _, rev_good = forward_reverse_perplexity(train, test, good, 15, cfg, seed=0)
    fwd_noise, rev_noise = forward_reverse_perplexity(train, test, noise, 15, cfg, seed=0)
    assert rev_noise > 2 * rev_good
    assert fwd_noise > 10 * rev_good
    assert forward_reverse_perplexity(train, test, noise, 15, cfg, seed=0) == (fwd_noise, rev_noise)
    with pytest.raises(ValueError):
        forward_reverse_perplexity(train, test, LabeledCorpus([]), 15, cfg)


# -- agreement ------------------------------------------------------------------------------------------

def test_macro_f1_hand_worked():
    assert macro_f1([0, 0, 1, 1], [0, 1, 1, 1]) == pytest.approx((2 / 3 + 4 / 5) / 2, abs=1e-15)
    assert macro_f1([0, 1, 0, 1], [0, 1, 0, 1]) == 1.0


class _LookupClassifier:
    """Predicts the first token id modulo 2."""

    def predict(self, sentences):
        return np.array([s[0] % 2 for s in sentences])


def test_agreement_identity_and_noise():
    orig = [[4], [5], [6], [7]]
    labels = np.array([0, 1, 0, 1])
    clf = _LookupClassifier()
    assert agreement(clf, orig, orig, labels) == 1.0
    assert agreement(clf, [[4], [4], [4], [4]], orig, labels) == pytest.approx((2 / 3) / 2)
    with pytest.raises(ZeroDivisionError):
        agreement(clf, orig, orig, 1 - labels)


# -- corruption ---------------------------------------------------------------------------------------------

def test_word_dropout_boundaries():
    s = [4, 5, 6, 7]
    assert word_dropout(s, 0.0, 0) == s
    assert len(word_dropout(s, 0.999999, 0)) == 1
    with pytest.raises(ValueError):
        word_dropout([], 0.3)


def test_word_dropout_expected_length():
    rng = np.random.default_rng(0)
    L = 10
    lengths = [len(word_dropout(list(range(L)), 0.3, rng)) for _ in range(10_000)]
    # the keep-one floor adds 0.3**10 * 1, negligible
    assert np.mean(lengths) == pytest.approx(0.7 * L, abs=4 * math.sqrt(L * 0.21 / 10_000))


def test_impute_examples():
    s = list("abcdefgh")
    assert impute(s, 0.25) == ["a", "b"]
    assert impute(s, 1.0) == s
    assert impute("st. marys catholic high school is a private school".split()) == ["st.", "marys", "catholic"]
    with pytest.raises(ValueError):
        impute([])


# -- posterior shape -------------------------------------------------------------------------------------

def test_shape_standard_normal():
    mu2, logdet = posterior_shape(np.random.default_rng(0).standard_normal((100_000, 2)))
    assert abs(mu2) < 0.05 and abs(logdet) < 0.05


def test_shape_singular():
    with pytest.raises(SingularCovariance):
        posterior_shape(np.ones((50, 3)))
    with pytest.raises(SingularCovariance):
        posterior_shape(np.random.default_rng(0).standard_normal((3, 3)))


def test_shape_scaling_law():
    x = np.random.default_rng(2).standard_normal((500, 4)) @ np.array([[1, 0.3, 0, 0], [0, 1, 0, 0],
                                                                        [0, 0, 2, 0], [0, 0, 0.1, 1]])
    _, a = posterior_shape(x)
    _, b = posterior_shape(2 * x)
    assert b - a == pytest.approx(4 * math.log(4), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 0.95), st.integers(0, 100))
def test_shape_decreases_when_spread_shrinks(scale, seed):
    x = np.random.default_rng(seed).standard_normal((200, 3))
    assert posterior_shape(scale * x)[1] < posterior_shape(x)[1]


# -- reports -------------------------------------------------------------------------------------------

def test_report_round_trip_and_validation():
    rep = MetricReport("r1", {"au": 3, "bleu2": 0.5, "fwd_ppl": 12.0}, seed=2, kind="eval")
    line = rep.to_json()
    assert json.loads(line)["run_id"] == "r1"
    assert MetricReport.from_json(line) == rep
    rep.validate(latent_dim=8)
    with pytest.raises(ValueError):
        MetricReport("r", {"au": 9}).validate(8)
    with pytest.raises(ValueError):
        MetricReport("r", {"rouge2": 1.5}).validate()
    with pytest.raises(ValueError):
        MetricReport("r", {"rev_ppl": 0.5}).validate()
