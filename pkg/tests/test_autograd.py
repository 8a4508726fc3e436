import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import fdcheck
from avspeaker import autograd as ag


@pytest.mark.parametrize("name", sorted(fdcheck.CASES))
def test_finite_differences(name):
    worst = max(fdcheck.run_case(name, seed) for seed in range(100))
    assert worst < fdcheck.TOL


def test_encoder_forward_finite_differences():
    assert max(fdcheck.tiny_encoder_error(seed) for seed in range(3)) < fdcheck.TOL


def test_matmul_hand_cases():
    x = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(ag.matmul(ag.tensor(np.eye(3)), ag.tensor(x)).data, x)
    out = ag.matmul(ag.tensor([[1.0, 2.0], [3.0, 4.0]]), ag.tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        ag.matmul(ag.tensor(np.ones((2, 3))), ag.tensor(np.ones((2, 3))))


def test_softmax_rows_examples():
    np.testing.assert_allclose(ag.softmax_rows(ag.tensor(np.zeros((1, 4)))).data, 0.25, rtol=0, atol=1e-15)
    out = ag.softmax_rows(ag.tensor([[0.0, math.log(3.0)]])).data
    np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_simplex_and_shift(x, c):
    y = ag.softmax_rows(ag.tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ag.softmax_rows(ag.tensor(x + c)).data, y, atol=1e-12)


@pytest.mark.parametrize("k", [2, 7, 32])
def test_cross_entropy_uniform_is_log_k(k):
    loss = ag.cross_entropy(ag.tensor(np.zeros((5, k))), np.arange(5) % k)
    assert abs(float(loss.data) - math.log(k)) <= 1e-12


def test_cross_entropy_confident_and_masked():
    logits = np.full((3, 4), -50.0)
    logits[np.arange(3), [1, 2, 3]] = 50.0
    assert float(ag.cross_entropy(ag.tensor(logits), [1, 2, 3]).data) < 1e-30
    z = ag.parameter(np.random.default_rng(0).normal(size=(4, 3)))
    mask = np.array([True, False, True, False])
    ag.backward(ag.cross_entropy(z, [0, 1, 2, 0], mask))
    assert np.all(z.grad[~mask] == 0)
    p = np.exp(z.data) / np.exp(z.data).sum(axis=1, keepdims=True)
    onehot = np.eye(3)[[0, 1, 2, 0]]
    np.testing.assert_allclose(z.grad[mask], ((p - onehot) / 2)[mask], atol=1e-14)


def test_cross_entropy_errors():
    with pytest.raises(ValueError, match="at least one"):
        ag.cross_entropy(ag.tensor(np.zeros((2, 3))), [0, 1], np.zeros(2, dtype=bool))
    with pytest.raises(ValueError, match="targets"):
        ag.cross_entropy(ag.tensor(np.zeros((2, 3))), [0, 3])


def test_backward_examples():
    x = ag.parameter([3.0])
    ag.backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [6.0])
    y = ag.parameter([1.0, 2.0])
    ag.backward((x * x).sum())
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        ag.backward(ag.parameter([1.0, 2.0]) * 2.0)


def test_non_finite_inputs_rejected():
    with pytest.raises(FloatingPointError):
        ag.tensor([1.0, np.nan])
    with pytest.raises(ag.NonFiniteError):
        ag.adam_step({"w": ag.parameter([1.0])}, {"w": np.array([np.inf])}, ag.AdamState(), 1e-3)


def test_std_zero_variance_gradient_is_zero():
    x = ag.parameter(np.ones((2, 5)))
    out = ag.std(x, axis=1)
    np.testing.assert_array_equal(out.data, 0.0)
    ag.backward(out.sum())
    np.testing.assert_array_equal(x.grad, 0.0)


def test_adam_zero_gradient_keeps_parameters():
    p = ag.parameter([1.0, -2.0])
    ag.adam_step({"p": p}, {"p": np.zeros(2)}, ag.AdamState(), 1e-3)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


@pytest.mark.parametrize("g", [1e-3, -0.7, 42.0])
def test_adam_first_step_moves_by_lr(g):
    p = ag.parameter([0.5])
    state = ag.AdamState()
    ag.adam_step({"p": p}, {"p": np.array([g])}, state, 1e-3)
    assert state.step == 1
    np.testing.assert_allclose(0.5 - p.data[0], math.copysign(1e-3, g), rtol=1e-4)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        ag.adam_step({"p": ag.parameter([1.0])}, {"p": np.zeros(2)}, ag.AdamState(), 1e-3)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(3)
        p = ag.parameter(rng.normal(size=5))
        st_ = ag.AdamState()
        for _ in range(20):
            ag.adam_step({"p": p}, {"p": rng.normal(size=5)}, st_, 1e-2)
        return p.data
    assert run().tobytes() == run().tobytes()


def test_lr_schedule_examples():
    s = ag.LrSchedule(total_steps=300)
    assert ag.lr_at(s, 0) == 0.0
    assert ag.lr_at(s, 100) == pytest.approx(1e-3, abs=1e-15)
    assert ag.lr_at(s, 200) == pytest.approx(5e-4, abs=1e-15)
    assert ag.lr_at(s, 300) == 0.0
    with pytest.raises(ValueError):
        ag.lr_at(s, 301)
    with pytest.raises(ValueError):
        ag.LrSchedule(total_steps=10, warmup_fraction=1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 5000))
def test_lr_schedule_peak_and_continuity(total):
    s = ag.LrSchedule(total_steps=total)
    lrs = np.array([s(i) for i in range(total + 1)])
    assert lrs.max() <= 1e-3 + 1e-18
    assert np.all(np.abs(np.diff(lrs)) <= 1e-3 / (total / 3) * 1.5 + 1e-18)
