import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from isovae import autodiff as ad
from isovae.objectives import (ObjectiveConfig, beta_loss, capacity_diagnostics, constrained_loss, elbo_loss,
                               objective_loss)

finite = st.floats(0, 100)


def test_elbo_examples():
    assert elbo_loss(10.0, 0.0) == 10.0
    assert elbo_loss(10.0, 5.0) == 15.0
    with pytest.raises(ValueError):
        elbo_loss(1.0, -0.1)


def test_elbo_gradient_is_one_for_both_terms():
    rec, kl = ad.tensor(3.0, requires_grad=True), ad.tensor(2.0, requires_grad=True)
    with ad.Tape() as tape:
        loss = elbo_loss(rec, kl)
    tape.backward(loss)
    assert rec.grad == 1.0 and kl.grad == 1.0


def test_constrained_examples():
    assert constrained_loss(7.5, 5.0, 5.0) == 7.5
    assert constrained_loss(10.0, 3.0, 5.0, 1.0) == 12.0
    with pytest.raises(ValueError):
        constrained_loss(1.0, 1.0, -1.0)


@pytest.mark.parametrize("kl0, expected", [(3.0, -1.0), (7.0, 1.0), (5.0, 0.0)])
def test_constrained_subgradient(kl0, expected):
    kl = ad.tensor(kl0, requires_grad=True)
    with ad.Tape() as tape:
        loss = constrained_loss(ad.tensor(1.0), kl, 5.0)
    tape.backward(loss)
    assert kl.grad == expected


def test_beta_examples():
    assert beta_loss(10.0, 5.0, 0.2) == 11.0
    with pytest.raises(ValueError):
        beta_loss(1.0, 1.0, 0.0)


@given(finite, finite)
def test_beta_one_is_bitwise_elbo(rec, kl):
    assert beta_loss(rec, kl, 1.0) == elbo_loss(rec, kl)
    r, k = ad.tensor(rec), ad.tensor(kl)
    assert beta_loss(r, k, 1.0).data == elbo_loss(r, k).data


def test_beta_gradient_scales_linearly():
    grads = []
    for b in (0.8, 0.2):
        kl = ad.tensor(2.0, requires_grad=True)
        with ad.Tape() as tape:
            loss = beta_loss(ad.tensor(1.0), kl, b)
        tape.backward(loss)
        grads.append(float(kl.grad))
    assert grads[0] == pytest.approx(4 * grads[1])


@given(finite, finite, finite, st.sampled_from(["plain", "constrained", "beta"]))
def test_monotone_in_rec(r1, r2, kl, kind):
    cfg = ObjectiveConfig(kind, target_c=5.0 if kind == "constrained" else None, beta=0.5 if kind == "beta" else None)
    lo, hi = sorted((r1, r2))
    assert objective_loss(cfg, lo, kl) <= objective_loss(cfg, hi, kl)


def test_config_validation():
    with pytest.raises(ValueError):
        ObjectiveConfig("constrained")
    with pytest.raises(ValueError):
        ObjectiveConfig("beta")
    with pytest.raises(ValueError):
        ObjectiveConfig("plain", target_c=3.0)
    with pytest.raises(ValueError):
        ObjectiveConfig("iwae", iwae_k=0)
    with pytest.raises(ValueError):
        ObjectiveConfig("plain", iwae_k=5)
    with pytest.raises(ValueError):
        ObjectiveConfig("nope")
    assert ObjectiveConfig("constrained", target_c=0.0).beta == 1.0


def test_linear_warmup():
    cfg = ObjectiveConfig("constrained", target_c=5.0, c_warmup_steps=100)
    assert [cfg.target_at(s) for s in (0, 50, 100, 1000)] == [0.0, 2.5, 5.0, 5.0]
    assert ObjectiveConfig("constrained", target_c=5.0).target_at(0) == 5.0


def test_iwae_not_assembled_here():
    with pytest.raises(ValueError):
        objective_loss(ObjectiveConfig("iwae", iwae_k=2), 1.0, 1.0)


def test_capacity_diagnostics():
    d = capacity_diagnostics(20.0, 0.0)
    assert d.rate == 0.0 and d.distortion == 20.0
    kl_mean = float(np.mean([1.1, 2.3, 4.0]))
    d = capacity_diagnostics(1.0, kl_mean, target_c=2.0)
    assert d.rate == kl_mean and d.rate_bound_gap == kl_mean - 2.0
