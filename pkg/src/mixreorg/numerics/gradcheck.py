"""Central-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, no_grad, precision


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_input: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel error {self.max_rel_error:.3e} (tol {self.tolerance:.0e})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def _scalar(out) -> float:
    if not isinstance(out, Tensor):
        raise ShapeError("grad_check function must return a Tensor")
    if out.data.size != 1:
        raise ShapeError(f"grad_check function must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(()))


def numerical_grad(f: Callable, inputs: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` for every input entry."""
    grads = []
    for t in inputs:
        g = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        # only the scalar value is needed; skip recording the tape
        with no_grad():
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                plus = _scalar(f(*inputs))
                flat[j] = orig - h
                minus = _scalar(f(*inputs))
                flat[j] = orig
                gflat[j] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backward gradients of scalar ``f(*inputs)`` with central differences.

    Runs in 64-bit; inputs are promoted in place and marked ``requires_grad``.
    """
    with precision(np.float64):
        for t in inputs:
            t.data = np.array(t.data, dtype=np.float64)
            t.requires_grad = True
            t.grad = None
        out = f(*inputs)
        _scalar(out)
        out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
        numeric = numerical_grad(f, inputs, h)
    per_input = [float(relative_error(a, n, floor).max(initial=0.0)) for a, n in zip(analytic, numeric)]
    return GradCheckReport(max(per_input, default=0.0), tolerance, per_input)
