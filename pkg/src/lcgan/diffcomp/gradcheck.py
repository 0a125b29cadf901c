"""Central finite-difference gradient oracle."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_parameter_errors: Dict[str, float] = field(default_factory=dict)
    passed: bool = False
    tolerance: float = 1e-4
    # names whose analytic grad was absent (frozen or unreachable)
    no_grad: list = field(default_factory=list)
    # probed entries whose stencil straddled a kink (kink-aware mode only)
    kinks: int = 0

    def summary(self) -> str:
        lines = [f"{name}: {err:.3e}" for name, err in self.per_parameter_errors.items()]
        status = "PASS" if self.passed else "FAIL"
        if self.kinks:
            lines.append(f"{self.kinks} entries resolved with one-sided differences")
        lines.append(f"max relative error {self.max_relative_error:.3e} (tol {self.tolerance:g}) {status}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _probe_indices(size: int, max_entries: Optional[int], rng) -> np.ndarray:
    if max_entries is not None and size > max_entries:
        rng = rng or np.random.default_rng(0)
        return np.sort(rng.choice(size, size=max_entries, replace=False))
    return np.arange(size)


def one_sided_grads(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                    max_entries: Optional[int] = None, rng=None) -> tuple:
    """Forward and backward differences ``(idx, fwd, bwd)``; their mean is the central one."""
    flat = param.data.reshape(-1)
    idx = _probe_indices(flat.size, max_entries, rng)
    f0 = float(f().data)
    fwd = np.empty(len(idx), dtype=np.float64)
    bwd = np.empty(len(idx), dtype=np.float64)
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fwd[k] = (float(f().data) - f0) / h
        flat[i] = old - h
        bwd[k] = (f0 - float(f().data)) / h
        flat[i] = old
    return idx, fwd, bwd


def numeric_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                 max_entries: Optional[int] = None, rng=None) -> tuple:
    """Central differences of scalar ``f()`` w.r.t. entries of ``param.data``.

    Returns ``(flat_indices, values)``. With ``max_entries`` a random subset of
    entries is probed, which keeps checks on whole networks affordable.
    """
    flat = param.data.reshape(-1)
    idx = _probe_indices(flat.size, max_entries, rng)
    out = np.empty(len(idx), dtype=np.float64)
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = float(f().data)
        flat[i] = old - h
        fm = float(f().data)
        flat[i] = old
        out[k] = (fp - fm) / (2.0 * h)
    return idx, out


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], tolerance: float = 1e-4,
               h: float = 1e-5, max_entries: Optional[int] = None, seed: int = 0,
               kink_aware: bool = False) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must rebuild its graph on every call and be deterministic; run it in
    float64 for meaningful tolerances. Parameters whose analytic gradient is
    missing after backward are compared against a zero gradient.

    With ``kink_aware`` an entry whose central difference misses ``tolerance``
    is taken to straddle a ReLU-type kink and the one-sided difference closer
    to the analytic value is used instead, since the function is smooth on at
    least one side of the stencil. A wrong analytic gradient still disagrees
    with both sides.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = {name: (None if p.grad is None else p.grad.copy()) for name, p in params.items()}

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    missing = []
    kinks = 0
    for name, p in params.items():
        a = analytic[name]
        if a is None:
            missing.append(name)
            a = np.zeros(p.shape)
        if kink_aware:
            idx, fwd, bwd = one_sided_grads(f, p, h=h, max_entries=max_entries, rng=rng)
            a = a.reshape(-1)[idx].astype(np.float64)
            num = 0.5 * (fwd + bwd)
            closer = np.where(np.abs(fwd - a) <= np.abs(bwd - a), fwd, bwd)
            kinked = (relative_error(a, num) >= tolerance) & (relative_error(a, closer) < relative_error(a, num))
            num = np.where(kinked, closer, num)
            kinks += int(kinked.sum())
        else:
            idx, num = numeric_grad(f, p, h=h, max_entries=max_entries, rng=rng)
            a = a.reshape(-1)[idx].astype(np.float64)
        errors[name] = float(relative_error(a, num).max()) if len(idx) else 0.0
    worst = max(errors.values()) if errors else 0.0
    for p in params.values():
        p.zero_grad()
    return GradCheckReport(worst, errors, worst < tolerance, tolerance, missing, kinks)
