"""Finite-difference verification harness for the autodiff backward rules.

``grad_check`` compares every parameter coordinate's analytic gradient
against a central finite difference of the loss. Coordinates sitting on a
nondifferentiable kink (e.g. a ReLU input exactly at zero) are detected by
retrying after a small nudge; such coordinates are flagged and excluded
rather than failed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad, zero_grads


class NumericalError(RuntimeError):
    """Raised when the checked function produces a non-finite value."""


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: tuple[str, int] | None
    per_param: dict[str, float] = field(default_factory=dict)
    flagged: list[tuple[str, int]] = field(default_factory=list)
    tol: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / (max(abs(analytic), abs(numeric)) + 1e-4)


def _loss_value(f: Callable[[], Tensor]) -> float:
    with no_grad():
        value = f().item()
    return value


def _fd_grad(f: Callable[[], Tensor], flat: np.ndarray, i: int, step: float, where: str) -> float:
    orig = flat[i]
    flat[i] = orig + step
    up = _loss_value(f)
    flat[i] = orig - step
    down = _loss_value(f)
    flat[i] = orig
    if not (np.isfinite(up) and np.isfinite(down)):
        raise NumericalError(f"non-finite loss while perturbing {where}[{i}]")
    return (up - down) / (2.0 * step)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Check d(f)/d(param) for every coordinate of every parameter.

    ``f`` must be a deterministic scalar-valued function of ``params``
    (a closure over them). Requires ``0 < step <= 1e-2``.
    """
    if not (0.0 < step <= 1e-2):
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    tensors = dict(params)
    zero_grads(tensors.values())
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericalError("non-finite loss at the unperturbed point")
    loss.backward()
    analytic = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in tensors.items()
    }

    report = GradCheckReport(max_rel_err=0.0, worst=None, tol=tol)
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        worst_here = 0.0
        for i in range(flat.size):
            fd = _fd_grad(f, flat, i, step, name)
            err = _rel_err(a_flat[i], fd)
            if err > tol:
                # Possible kink exactly at the evaluation point: nudge the
                # coordinate, recompute both sides, and exclude if consistent.
                orig = flat[i]
                flat[i] = orig + 4.0 * step
                zero_grads(tensors.values())
                f().backward()
                a_nudged = np.zeros_like(flat) if t.grad is None else t.grad.reshape(-1)
                fd_nudged = _fd_grad(f, flat, i, step, name)
                err_nudged = _rel_err(a_nudged[i], fd_nudged)
                flat[i] = orig
                zero_grads(tensors.values())
                if err_nudged <= tol:
                    report.flagged.append((name, i))
                    continue
            worst_here = max(worst_here, err)
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst = (name, i)
        report.per_param[name] = worst_here
    zero_grads(tensors.values())
    return report
