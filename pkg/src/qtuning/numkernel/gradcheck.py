"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GradCheckReport:
    errors: dict  # parameter name -> max relative error
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def finite_diff_check(loss_fn, params: dict, h: float = 1e-5, tol: float = 1e-4, analytic=None, floor=1e-6):
    """Compare analytic gradients against ``(f(x+h) - f(x-h)) / 2h`` elementwise.

    ``loss_fn(params)`` must build a fresh :class:`GradTape`, register every
    entry of ``params`` under its key and return ``(tape, loss)``. Relative
    error is ``|a - n| / max(|a|, |n|, floor)``. ``analytic`` overrides the
    tape gradients (used to inject faults).
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if analytic is None:
        tape, loss = loss_fn(params)
        analytic = tape.backward(loss)
    errors = {}
    for name, p in params.items():
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn(params)[1].value)
            flat[i] = orig - h
            fm = float(loss_fn(params)[1].value)
            flat[i] = orig
            num.reshape(-1)[i] = (fp - fm) / (2.0 * h)
        a = np.asarray(analytic[name])
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        errors[name] = float(np.max(np.abs(a - num) / denom)) if p.size else 0.0
    return GradCheckReport(errors=errors, tol=tol)
