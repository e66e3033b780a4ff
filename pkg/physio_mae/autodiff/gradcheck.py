"""Central finite-difference verification of reverse-mode gradients."""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_DELTA = 1e-5
# Denominator floor for the relative error.
RELATIVE_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    n_checked: int
    worst: str = ""
    message: str = ""
    analytic: Dict[str, np.ndarray] = field(default_factory=dict)
    per_tensor: Dict[str, float] = field(default_factory=dict)

    def rows(self) -> List[list]:
        return [[name, f"{err:.3e}"] for name, err in self.per_tensor.items()]


def relative_error(analytic, numeric):
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), RELATIVE_FLOOR)
    return np.abs(analytic - numeric) / denom


def _scalar(value):
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    if data.size != 1:
        return None
    return float(data.reshape(-1)[0])


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    tol: float = 1e-6,
    delta: float = DEFAULT_DELTA,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compares analytic gradients of ``loss_fn()`` against finite differences.

    Every element of every tensor in ``params`` is perturbed by ``±delta``
    unless ``max_elements`` caps the count per tensor, in which case a
    seeded random subset is used.
    """
    for tensor in params.values():
        tensor.zero_grad()
    loss = loss_fn()
    value = _scalar(loss)
    if value is None:
        return GradCheckReport(
            np.inf, tol, False, 0, message="loss is not scalar-valued"
        )
    if not np.isfinite(value):
        return GradCheckReport(
            np.inf, tol, False, 0, message=f"non-finite loss {value}"
        )
    loss.backward()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, tol, True, 0)
    for name, tensor in params.items():
        analytic = (
            np.zeros_like(tensor.data)
            if tensor.grad is None
            else tensor.grad.copy()
        )
        report.analytic[name] = analytic
        tensor.data = np.ascontiguousarray(tensor.data)
        flat = tensor.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            indices = np.sort(rng.choice(flat.size, max_elements, False))
        worst_here = 0.0
        for index in indices:
            original = flat[index]
            flat[index] = original + delta
            plus = _scalar(loss_fn())
            flat[index] = original - delta
            minus = _scalar(loss_fn())
            flat[index] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                report.passed = False
                report.max_rel_error = np.inf
                report.worst = f"{name}[{index}]"
                report.message = "non-finite loss under perturbation"
                return report
            numeric = (plus - minus) / (2.0 * delta)
            err = float(
                relative_error(analytic.reshape(-1)[index], numeric)
            )
            worst_here = max(worst_here, err)
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = f"{name}[{int(index)}]"
            report.n_checked += 1
        report.per_tensor[name] = worst_here

    report.passed = report.max_rel_error < tol
    if not report.passed:
        report.message = (
            f"max relative error {report.max_rel_error:.3e} at "
            f"{report.worst} exceeds {tol:.1e}"
        )
    log.debug(
        "Gradient check over %d elements: max rel err %.3e",
        report.n_checked,
        report.max_rel_error,
    )
    return report


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    tol: float = 1e-6,
    delta: float = DEFAULT_DELTA,
) -> GradCheckReport:
    """Checks ``d f(x) / d x`` for a scalar-valued ``f``."""
    if not isinstance(x, Tensor):
        x = Tensor(x, requires_grad=True)
    x.requires_grad = True
    return grad_check_params(lambda: f(x), {"x": x}, tol=tol, delta=delta)
