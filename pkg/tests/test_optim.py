import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geovista.core import Parameter
from geovista.optim import AdamW, adamw_step
from geovista.training import lr_at

import oracles


def one_param(value, grad=None):
    p = Parameter(np.array([value]))
    p.grad = None if grad is None else np.array([grad])
    return p


def test_zero_grad_no_decay_leaves_param():
    p = Parameter(np.array([[1.5, -2.0]]))
    p.grad = np.zeros((1, 2))
    adamw_step(AdamW({"w": p}.items(), lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [[1.5, -2.0]])


def test_single_step_matches_hand_computation():
    p = one_param(1.0, 1.0)
    AdamW({"w": p}.items(), lr=0.1, weight_decay=0.0, no_decay=set()).step()
    # m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps)
    assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert p.data[0] == pytest.approx(0.9 + 1e-9, abs=1e-15)


def test_pure_decoupled_decay():
    p = Parameter(np.full((2, 2), 3.0))
    p.grad = np.zeros((2, 2))
    AdamW({"w": p}.items(), lr=0.1, weight_decay=0.05).step()
    np.testing.assert_allclose(p.data, 3.0 * (1 - 0.1 * 0.05), rtol=0, atol=1e-15)


def test_grads_zeroed_and_moment_shapes():
    p = Parameter(np.ones((3, 2)))
    p.grad = np.ones((3, 2))
    opt = AdamW({"w": p}.items(), lr=0.01)
    opt.step()
    assert p.grad is None
    assert opt.state.m["w"].shape == p.shape and opt.state.v["w"].shape == p.shape
    assert opt.state.step == 1


def test_one_dim_params_skip_decay_by_default():
    w, b = Parameter(np.ones((2, 2))), Parameter(np.ones(2))
    opt = AdamW({"w": w, "b": b}.items(), lr=0.1, weight_decay=0.5)
    assert opt.no_decay == {"b"}


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.lists(st.floats(-5, 5), min_size=1, max_size=6),
       st.floats(1e-4, 0.3), st.floats(0, 0.2))
def test_matches_scalar_reference(p0, grads, lr, wd):
    p = Parameter(np.array([[p0]]))
    opt = AdamW({"w": p}.items(), lr=lr, weight_decay=wd, no_decay=set())
    for g in grads:
        p.grad = np.array([[g]])
        opt.step()
    assert p.data[0, 0] == pytest.approx(oracles.adamw_reference(p0, grads, lr, wd=wd),
                                         rel=1e-12, abs=1e-12)


def test_state_round_trip():
    p = one_param(0.3, 0.7)
    opt = AdamW({"w": p}.items(), lr=0.01)
    opt.step()
    q = one_param(float(p.data[0]))
    opt2 = AdamW({"w": q}.items(), lr=0.01)
    opt2.load_state_arrays(opt.state_arrays(), opt.state.step)
    p.grad, q.grad = np.array([0.2]), np.array([0.2])
    opt.step()
    opt2.step()
    assert p.data[0] == q.data[0]


# ---------------------------------------------------------------- schedule

def test_lr_endpoints_exact():
    assert lr_at(0, 3e-4, 10, 100) == 0.0
    assert lr_at(10, 3e-4, 10, 100) == 3e-4
    assert lr_at(100, 3e-4, 10, 100) == 0.0
    assert lr_at(55, 3e-4, 10, 100) == pytest.approx(1.5e-4, rel=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 50), st.integers(1, 200), st.integers(0, 400))
def test_lr_matches_reference_and_is_bounded(warm, extra, step):
    total = warm + extra
    got = lr_at(step, 1.0, warm, total)
    assert got == pytest.approx(oracles.warmup_cosine(step, 1.0, warm, total), abs=1e-15)
    assert 0.0 <= got <= 1.0


def test_lr_rejects_negative_step():
    with pytest.raises(ValueError):
        lr_at(-1, 1.0, 2, 10)


def test_cosine_monotone_after_warmup():
    vals = [lr_at(s, 1.0, 5, 50) for s in range(5, 51)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert math.isclose(vals[0], 1.0)
