"""Finite-difference checker and Adam optimizer unit tests."""

import numpy as np
import pytest

from shadowforge.diffcore import (
    AdamState,
    DiffOp,
    adam_step,
    build_gradcheck_case,
    finite_diff_check,
    gradcheck_case_names,
)


def _quadratic_op():
    # f(x, y) = sum(x**2) * sum(y), gradients known in closed form.
    def forward(inputs):
        x, y = inputs
        return np.asarray((x ** 2).sum() * y.sum())

    def vjp(inputs, cotangent):
        x, y = inputs
        ct = float(cotangent)
        return [ct * 2.0 * x * y.sum(), ct * (x ** 2).sum() * np.ones_like(y)]

    return DiffOp(name="quadratic", forward=forward, vjp=vjp, diff_mask=(True, True))


def test_finite_diff_check_accepts_correct_vjp():
    rng = np.random.default_rng(3)
    report = finite_diff_check(
        _quadratic_op(), [rng.normal(size=5), rng.normal(size=4)], tol=1e-6
    )
    assert report.passed
    assert max(report.max_rel_errors) < 1e-6


def test_finite_diff_check_rejects_wrong_vjp():
    def forward(inputs):
        return np.asarray((inputs[0] ** 2).sum())

    def vjp(inputs, cotangent):
        return [float(cotangent) * 3.0 * inputs[0]]  # wrong factor

    op = DiffOp(name="broken", forward=forward, vjp=vjp, diff_mask=(True,))
    report = finite_diff_check(op, [np.array([1.0, -2.0, 0.5])])
    assert not report.passed


def test_finite_diff_check_respects_diff_mask():
    # Second input marked non-differentiable: its VJP (deliberately wrong)
    # must never be probed.
    def forward(inputs):
        return np.asarray(inputs[0].sum() + inputs[1].sum())

    def vjp(inputs, cotangent):
        return [float(cotangent) * np.ones_like(inputs[0]), None]

    op = DiffOp(name="masked", forward=forward, vjp=vjp, diff_mask=(True, False))
    report = finite_diff_check(op, [np.ones(3), np.ones(2)], tol=1e-6)
    assert report.passed


def test_adam_first_step_matches_hand_computation():
    # With m = v = 0 and t = 0, one step moves by lr * g / (sqrt(g^2) + eps)
    # after bias correction, i.e. almost exactly lr * sign(g).
    params = np.array([1.0, -2.0])
    grads = np.array([0.5, -4.0])
    lr = 0.1
    new_params, state = adam_step(params, grads, AdamState.zeros(params.size), lr)
    m = 0.1 * grads
    v = 0.001 * grads ** 2
    m_hat = m / (1 - 0.9)
    v_hat = v / (1 - 0.999)
    expected = params - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(new_params, expected, rtol=0, atol=1e-15)
    assert state.t == 1
    np.testing.assert_allclose(state.m, m)
    np.testing.assert_allclose(state.v, v)


def test_adam_converges_on_quadratic():
    params = np.array([3.0, -2.0, 0.7])
    state = AdamState.zeros(params.size)
    for _ in range(400):
        params, state = adam_step(params, 2.0 * params, state, lr=0.05)
    assert np.abs(params).max() < 1e-3


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.ones(3), np.ones(3), AdamState.zeros(4), lr=0.1)


def test_gradcheck_registry_builds_named_cases():
    names = gradcheck_case_names()
    assert "losses.chamfer" in names
    assert "attack.total_loss" in names
    op, inputs, kwargs = build_gradcheck_case("losses.chamfer", seed=0)
    report = finite_diff_check(op, inputs, **kwargs)
    assert report.passed


def test_gradcheck_registry_rejects_unknown_name():
    with pytest.raises(KeyError):
        build_gradcheck_case("no.such.case", seed=0)
