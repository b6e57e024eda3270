import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcases import op_cases, seq_vae_case
from isovae import autodiff as ad
from isovae.gradcheck import check_gradients, relative_error
from isovae.optim import Adam, AdamState, adam_step, clip_global_norm


def test_matmul_identity():
    x = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(x, ad.tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_sigmoid_zero():
    assert ad.sigmoid(ad.tensor([0.0])).data[0] == 0.5


def test_sigmoid_is_stable_for_large_inputs():
    out = ad.sigmoid(ad.tensor([-800.0, 800.0])).data
    np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-300)


def test_softmax_cross_entropy_uniform():
    loss = ad.softmax_cross_entropy(ad.tensor([[0.0, 0.0, 0.0]]), np.array([1]))
    assert loss.data[0] == pytest.approx(math.log(3), abs=1e-15)


def test_sum_grad_is_ones():
    x = ad.tensor([1.0, -2.0, 3.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_square_grad():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_(x * x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_backward_accumulates_exactly_twice():
    fn, params = op_cases(3)["lstm_cell"]
    for p in params:
        p.zero_grad()
    with ad.Tape() as tape:
        loss = fn()
    tape.backward(loss)
    once = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    for _ in range(2):
        with ad.Tape() as tape:
            loss = fn()
        tape.backward(loss)
    for p, g in zip(params, once):
        np.testing.assert_array_equal(p.grad, 2 * g)


def test_intermediate_reuse_accumulates():
    x = ad.tensor([3.0], requires_grad=True)
    with ad.Tape() as tape:
        y = x * x
        loss = ad.sum_(y * y + y)
    tape.backward(loss)
    assert x.grad[0] == pytest.approx(4 * 27 + 6)


def test_backward_is_deterministic():
    grads = []
    for _ in range(2):
        fn, params = op_cases(5)["matmul"]
        with ad.Tape() as tape:
            loss = fn()
        tape.backward(loss)
        grads.append([p.grad.copy() for p in params])
    for g1, g2 in zip(*grads):
        np.testing.assert_array_equal(g1, g2)


@pytest.mark.parametrize("name", sorted(op_cases()))
def test_op_gradients_match_finite_differences(name):
    fn, params = op_cases()[name]
    assert check_gradients(fn, params) < 1e-4


@pytest.mark.parametrize("seed", [1, 2])
def test_op_gradients_other_seeds(seed):
    for name, (fn, params) in op_cases(seed).items():
        assert check_gradients(fn, params) < 1e-4, name


@pytest.mark.parametrize("geometry", ["isotropic", "diagonal"])
def test_seq_vae_end_to_end_gradient(geometry):
    fn, params = seq_vae_case(geometry)
    assert check_gradients(fn, params) < 1e-4


def test_non_scalar_loss_rejected():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ad.TapeError):
        tape.backward(y)


def test_loss_from_other_tape_rejected():
    x = ad.tensor([1.0], requires_grad=True)
    with ad.Tape():
        loss = ad.sum_(x * x)
    with ad.Tape() as other, pytest.raises(ad.TapeError):
        other.backward(loss)


def test_nothing_recorded_without_grad():
    with ad.Tape() as tape:
        ad.tanh(ad.tensor([1.0, 2.0]))
    assert len(tape) == 0


@pytest.mark.parametrize("op", [ad.add, ad.mul, ad.matmul])
def test_shape_error_names_op_and_shapes(op):
    with pytest.raises(ad.ShapeError) as info:
        op(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((4, 5))))
    msg = str(info.value)
    assert op.__name__ in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_no_implicit_broadcast():
    with pytest.raises(ad.ShapeError):
        ad.add(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones(3)))
    with pytest.raises(ad.ShapeError):
        ad.add_bias(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones(2)))


def test_non_finite_inputs_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.exp(ad.tensor([np.inf]))
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.tensor([np.nan]))


def test_lstm_mask_carries_state():
    rng = np.random.default_rng(0)
    h, c = ad.tensor(rng.standard_normal((2, 3))), ad.tensor(rng.standard_normal((2, 3)))
    out = ad.lstm_cell(ad.tensor(rng.standard_normal((2, 12))), h, c, ad.tensor(rng.standard_normal((3, 12))),
                       mask=np.array([1.0, 0.0])).data
    np.testing.assert_array_equal(out[1], np.concatenate([h.data[1], c.data[1]]))
    assert not np.allclose(out[0, :3], h.data[0])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)))
def test_tanh_gradient_property(x0):
    x = ad.tensor(x0, requires_grad=True)
    assert check_gradients(lambda: ad.sum_(ad.tanh(x) * ad.sigmoid(x)), [x]) < 1e-4


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-20, 20)))
def test_logsumexp_matches_reference(x0):
    got = ad.logsumexp(ad.tensor(x0), axis=1).data
    ref = np.log(np.sum(np.exp(x0 - x0.max(axis=1, keepdims=True)), axis=1)) + x0.max(axis=1)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_relative_error_zero_for_equal():
    assert relative_error(np.ones(3), np.ones(3)) == 0.0


# -- Adam --------------------------------------------------------------------------------------

def test_adam_zero_grad_is_noop():
    p = ad.tensor([1.0, -2.0], requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_moves_by_lr():
    p = ad.tensor([0.5], requires_grad=True)
    adam_step([p], [np.ones(1)], AdamState.for_params([p]), lr=0.001)
    assert p.data[0] == pytest.approx(0.5 - 0.001, abs=1e-10)


def _hand_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_two_step_trace():
    p = ad.tensor([0.3], requires_grad=True)
    state = AdamState.for_params([p])
    for g in (0.7, -0.2):
        adam_step([p], [np.array([g])], state, lr=0.01)
    assert p.data[0] == _hand_adam(0.3, [0.7, -0.2], 0.01)


def test_adam_shape_mismatch():
    p = ad.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.ShapeError):
        adam_step([p], [np.zeros(3)], AdamState.for_params([p]), lr=0.1)


def test_clip_global_norm():
    gs = [np.array([3.0]), np.array([4.0])]
    assert clip_global_norm(gs, 1.0) == pytest.approx(5.0)
    assert math.hypot(gs[0][0], gs[1][0]) == pytest.approx(1.0)
    small = [np.array([0.3])]
    clip_global_norm(small, 5.0)
    assert small[0][0] == 0.3


def test_adam_wrapper_minimizes_quadratic():
    x = ad.tensor([2.0, -3.0], requires_grad=True)
    opt = Adam([x], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        with ad.Tape() as tape:
            loss = ad.sum_(x * x)
        tape.backward(loss)
        opt.step()
    assert np.abs(x.data).max() < 1e-2
