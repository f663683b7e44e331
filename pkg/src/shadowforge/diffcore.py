"""Gradient infrastructure: forward/VJP contract, finite-difference checking, Adam.

The pipeline is a fixed DAG, so there is no general tape: each module exposes
its own vector-Jacobian product and the attack loop composes them in reverse
order. Everything here runs in 64-bit floats.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DiffOp",
    "AdamState",
    "GradCheckReport",
    "finite_diff_check",
    "adam_step",
    "register_gradcheck_case",
    "gradcheck_case_names",
    "build_gradcheck_case",
]


@dataclass
class DiffOp:
    """A differentiable operation under the uniform forward/VJP contract.

    ``forward`` maps a list of input arrays to one output array (0-d for
    scalars). ``vjp`` maps (inputs, output cotangent) to one cotangent per
    input, ``None`` for inputs masked non-differentiable. ``forward`` must be
    deterministic given its inputs.
    """

    name: str
    forward: Callable[[Sequence[np.ndarray]], np.ndarray]
    vjp: Callable[[Sequence[np.ndarray], np.ndarray], list]
    diff_mask: tuple[bool, ...]


@dataclass
class AdamState:
    """First/second moment estimates and the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_errors: list[float]
    tolerance: float
    passed: bool
    notes: list[str] = field(default_factory=list)

    def __str__(self):
        worst = max(self.max_rel_errors) if self.max_rel_errors else float("nan")
        state = "PASS" if self.passed else "FAIL"
        msg = f"{self.op_name}: {state} (max rel err {worst:.3e}, tol {self.tolerance:.1e})"
        if self.notes:
            msg += " [" + "; ".join(self.notes) + "]"
        return msg


def _as_flat(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).ravel()


def finite_diff_check(
    op: DiffOp,
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    probes: int = 3,
    cotangent: np.ndarray | None = None,
) -> GradCheckReport:
    """Compare ``op.vjp`` against central differences on random directions.

    The scalar probe is L(x) = <ct, f(x)> with a fixed random cotangent (ones
    for scalar outputs). For each differentiable input, ``probes`` random unit
    directions u are tested: the directional derivative (L(x+eps u) -
    L(x-eps u)) / (2 eps) must match <vjp, u> within ``tol`` relative error,
    where the denominator is max(1, |analytic|).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    rng = np.random.default_rng(seed)
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    y = np.asarray(op.forward(inputs), dtype=np.float64)
    notes: list[str] = []
    if not np.all(np.isfinite(y)):
        return GradCheckReport(op.name, [np.inf], tol, False, ["non-finite forward output"])
    if cotangent is None:
        ct = np.ones_like(y) if y.size == 1 else rng.normal(size=y.shape)
    else:
        ct = np.asarray(cotangent, dtype=np.float64)
    grads = op.vjp(inputs, ct)
    max_errs: list[float] = []
    for i, differentiable in enumerate(op.diff_mask):
        if not differentiable:
            continue
        g = grads[i]
        if g is None:
            return GradCheckReport(
                op.name, [np.inf], tol, False, [f"missing vjp for differentiable input {i}"]
            )
        g = _as_flat(g)
        if not np.all(np.isfinite(g)):
            return GradCheckReport(
                op.name, [np.inf], tol, False, [f"non-finite gradient for input {i}"]
            )
        worst = 0.0
        for _ in range(probes):
            u = rng.normal(size=inputs[i].shape)
            norm = np.linalg.norm(u)
            if norm == 0:
                continue
            u = u / norm
            xp = [x.copy() for x in inputs]
            xm = [x.copy() for x in inputs]
            xp[i] = inputs[i] + eps * u
            xm[i] = inputs[i] - eps * u
            yp = np.asarray(op.forward(xp), dtype=np.float64)
            ym = np.asarray(op.forward(xm), dtype=np.float64)
            if not (np.all(np.isfinite(yp)) and np.all(np.isfinite(ym))):
                return GradCheckReport(
                    op.name, [np.inf], tol, False, [f"non-finite perturbed forward, input {i}"]
                )
            numeric = float((ct * (yp - ym)).sum() / (2.0 * eps))
            analytic = float((g * u.ravel()).sum())
            rel = abs(numeric - analytic) / max(1.0, abs(analytic))
            worst = max(worst, rel)
        max_errs.append(worst)
    passed = bool(max_errs) and max(max_errs) <= tol
    if not max_errs:
        notes.append("no differentiable inputs checked")
        passed = False
    return GradCheckReport(op.name, max_errs, tol, passed, notes)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_hat: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    if not lr > 0:
        raise ValueError("lr must be positive")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps_hat)
    return new_params, AdamState(m=m, v=v, t=t)


# ---------------------------------------------------------------------------
# Gradcheck registry: modules register builders producing (op, inputs, kwargs)
# so the CLI and the property suite can enumerate every differentiable path.

_GRADCHECK_CASES: dict[str, Callable[[int], tuple]] = {}


def register_gradcheck_case(name: str, builder: Callable[[int], tuple]) -> None:
    """Register a builder seed -> (DiffOp, inputs, check_kwargs)."""
    _GRADCHECK_CASES[name] = builder


def gradcheck_case_names() -> list[str]:
    return sorted(_GRADCHECK_CASES)


def build_gradcheck_case(name: str, seed: int) -> tuple:
    if name not in _GRADCHECK_CASES:
        raise KeyError(f"unknown gradcheck case {name!r}; known: {gradcheck_case_names()}")
    return _GRADCHECK_CASES[name](seed)
