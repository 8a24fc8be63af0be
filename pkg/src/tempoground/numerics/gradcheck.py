"""Central-finite-difference verification of analytic gradients.

``grad_check`` takes a closure that (re)computes a scalar loss from the
current contents of a ParamStore and, as a side effect of its backward
pass, fills the parameter gradients. Each checked coordinate is perturbed
by +/- h and the numeric slope is compared against the analytic gradient.

Relative error uses max(|analytic|, |numeric|, 1e-3) as the denominator:
the absolute floor keeps coordinates whose true gradient is ~0 (where
central differences return pure float64 roundoff) from dominating the
report, while an actually wrong backward pass still produces errors
orders of magnitude above any sane tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from tempoground.numerics.params import ParamStore

_DENOM_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    tol: float
    max_rel_err: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        worst = max(self.per_param, key=self.per_param.get) if self.per_param else "-"
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} (worst: {worst}, tol {self.tol:g})"


def grad_check(
    loss_fn: Callable[[], float],
    store: ParamStore,
    names: list[str] | None = None,
    h: float = 1e-5,
    tol: float = 1e-6,
    max_entries_per_param: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must zero nothing itself: the harness zeros grads, calls it
    once to collect analytic gradients, then re-evaluates it under
    coordinate perturbations (forward value only; any gradients written
    during those calls are discarded).
    """
    if names is None:
        names = store.names()
    store.zero_grad()
    loss_fn()
    analytic = {name: store.get(name).grad.copy() for name in names}

    picker = np.random.Generator(np.random.Philox(key=seed))
    report = GradCheckReport(tol=tol)
    for name in names:
        p = store.get(name)
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_entries_per_param:
            idx = np.arange(n)
        else:
            idx = picker.choice(n, size=max_entries_per_param, replace=False)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = a_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), _DENOM_FLOOR)
            worst = max(worst, err)
        report.per_param[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    # restore analytic gradients so callers can inspect them afterwards
    store.zero_grad()
    for name in names:
        store.get(name).grad += analytic[name]
    return report
