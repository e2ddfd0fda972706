"""Central finite-difference check of recorded gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DiffRecord, Tensor, backward


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)   # parameter name -> max relative error
    tolerance: float = 1e-4

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return all(e <= self.tolerance for e in self.errors.values())

    def lines(self):
        for name, err in self.errors.items():
            flag = "ok" if err <= self.tolerance else "FAIL"
            yield f"{name:<48s} {err:.3e} {flag}"


def _rel_error(analytic, numeric, floor):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    diff = np.abs(analytic - numeric)
    return float(np.max(np.where(diff == 0, 0.0, diff / denom), initial=0.0))


def grad_check(fn, params, step=1e-4, tolerance=1e-4, max_entries=None, rng=None, floor=1e-6):
    """Compare analytic gradients of scalar ``fn()`` against central differences.

    ``params`` is a mapping name -> Tensor (or a sequence of tensors).  Each
    parameter's payload is perturbed in place and restored.  With
    ``max_entries`` only that many randomly chosen entries per parameter are
    probed.  Must run in float64.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 tensors; {name} is {p.dtype}")
    rng = rng or np.random.default_rng(0)

    with DiffRecord() as rec:
        out = fn()
    grads = backward(rec, out) if out.requires_grad else {}

    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        analytic = np.asarray(grads.get(p, np.zeros(p.shape))).reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * step)
        report.errors[name] = _rel_error(analytic[idx], numeric, floor)
    return report
