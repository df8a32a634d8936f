"""Gradient plumbing: parameter-gradient collection, the finite-difference
oracle, and the gradient checker used by the acceptance suite.

The checker is deliberately dumb: it perturbs one parameter coordinate at a
time and compares the central difference of the loss against whatever the
tape produced.  It shares no code with the backward rules it audits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import GradientError
from .tensor import Tensor, no_grad

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
_REL_FLOOR = 1e-12


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """d(loss)/d(theta) for every named parameter.

    Parameters the loss never touched come back as zeros.  Existing grads on
    the parameters are cleared first, so each call stands alone.
    """
    for p in params.values():
        p.zero_grad()
    loss.backward()
    return {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}


def finite_diff_grad(f: Callable[[np.ndarray], float], theta: np.ndarray,
                     h: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate."""
    theta = np.asarray(theta, dtype=np.float64)
    flat = theta.reshape(-1).copy()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(flat.reshape(theta.shape)))
        flat[i] = orig - h
        fm = float(f(flat.reshape(theta.shape)))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradientError(f"objective non-finite near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(theta.shape)


@dataclass
class GradReport:
    """Analytic-vs-numeric comparison over a named parameter set.

    Relative error uses max(|analytic|, |numeric|, 1e-12) as denominator.
    """

    step: float
    tol: float
    max_abs_err: float = 0.0
    max_rel_err: float = 0.0
    per_param: dict[str, tuple[float, float]] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        line = (f"{verdict} max_rel_err={self.max_rel_err:.3e} "
                f"max_abs_err={self.max_abs_err:.3e} (h={self.step:g}, tol={self.tol:g})")
        if self.failures:
            line += "\n  failing parameters: " + ", ".join(self.failures)
        return line


def gradcheck(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
              tol: float = DEFAULT_TOL, h: float = DEFAULT_STEP) -> GradReport:
    """Audit the tape against central finite differences.

    `loss_fn` must rebuild the scalar loss from the live parameter tensors
    and be deterministic call-to-call (eval mode, or a re-seeded rng).
    """
    analytic = backward(loss_fn(), params)

    def loss_value() -> float:
        with no_grad():
            return loss_fn().item()

    report = GradReport(step=h, tol=tol)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_value()
            flat[i] = orig - h
            fm = loss_value()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradientError(f"loss non-finite while perturbing {name}[{i}]")
            numeric[i] = (fp - fm) / (2.0 * h)
        a = analytic[name].reshape(-1)
        abs_err = np.abs(a - numeric)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), _REL_FLOOR)
        rel_err = abs_err / denom
        p_abs, p_rel = float(abs_err.max(initial=0.0)), float(rel_err.max(initial=0.0))
        report.per_param[name] = (p_abs, p_rel)
        report.max_abs_err = max(report.max_abs_err, p_abs)
        report.max_rel_err = max(report.max_rel_err, p_rel)
        if p_rel > tol:
            report.failures.append(name)
    return report
