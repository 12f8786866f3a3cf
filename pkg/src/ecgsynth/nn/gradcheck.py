"""Finite-difference verification of the recorded backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Module
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"grad_check {verdict}: max rel error {self.max_rel_error:.3e} "
                f"(tolerance {self.tolerance:.1e}, {len(self.per_param)} params)")


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def grad_check(module: Module, input_shape: tuple, tolerance: float = 1e-5,
               h: float = 1e-4, seed: int = 0,
               max_entries_per_param: int | None = None,
               forward=None) -> GradCheckReport:
    """Compare every parameter's analytic gradient against central differences.

    The module is cast to float64 in place. The check drives a scalar
    objective ``sum(weights * module(x))`` with fixed random ``weights`` so
    non-uniform cotangents reach every output. ``forward`` overrides how the
    module is applied (callable taking the input Tensor), which lets callers
    bind extra arguments such as step indices or labels.

    Large params are subsampled to ``max_entries_per_param`` random entries;
    by default every entry is checked.
    """
    rng = np.random.default_rng(seed)
    module.to_dtype(np.float64)
    module.eval_mode()  # dropout masks would differ between the two FD passes
    x = Tensor(rng.standard_normal(input_shape))
    run = forward if forward is not None else module

    out = run(x)
    weights = rng.standard_normal(out.shape)

    def objective() -> float:
        return float((run(x).data * weights).sum())

    module.zero_grads()
    loss = (run(x) * Tensor(weights)).sum()
    loss.backward()

    per_param: dict[str, float] = {}
    worst = 0.0
    for name, p in module.named_params():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n_entries = flat.size
        if max_entries_per_param is not None and n_entries > max_entries_per_param:
            entries = rng.choice(n_entries, size=max_entries_per_param, replace=False)
        else:
            entries = range(n_entries)
        worst_here = 0.0
        for j in entries:
            orig = flat[j]
            flat[j] = orig + h
            up = objective()
            flat[j] = orig - h
            down = objective()
            flat[j] = orig
            numeric = (up - down) / (2.0 * h)
            worst_here = max(worst_here, _rel_err(float(analytic.reshape(-1)[j]), numeric))
        per_param[name] = worst_here
        worst = max(worst, worst_here)
    module.zero_grads()
    return GradCheckReport(max_rel_error=worst, tolerance=tolerance, per_param=per_param)
