"""Continual-learning metrics computed from the stage x task accuracy grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, StateError


@dataclass
class RMatrix:
    """``acc[t, j]``: accuracy on task ``j`` after stage ``t`` (0-based, NaN = not measured).

    ``probe[j]`` holds the forward-transfer probe on task ``j`` taken after
    stage ``j - 1``; ``baseline[j]`` the independently trained reference.
    """

    acc: np.ndarray
    probe: np.ndarray | None = None
    baseline: np.ndarray | None = None

    @classmethod
    def empty(cls, n: int) -> "RMatrix":
        return cls(np.full((n, n), np.nan), np.full(n, np.nan), np.full(n, np.nan))

    @property
    def n_tasks(self) -> int:
        return self.acc.shape[0]


@dataclass
class TransferReport:
    acc: float
    bwt: float | None
    fwt: float | None
    curve: list

    def to_dict(self) -> dict:
        return {"ACC": self.acc, "BWT": self.bwt, "FWT": self.fwt, "curve": self.curve}


def _row(r: RMatrix, t: int) -> np.ndarray:
    row = r.acc[t, : t + 1]
    if np.any(np.isnan(row)):
        raise StateError(f"stage {t + 1} is missing accuracies")
    return row


def compute_acc(r: RMatrix) -> float:
    return float(np.mean(_row(r, r.n_tasks - 1)))


def compute_bwt(r: RMatrix) -> float:
    n = r.n_tasks
    if n < 2:
        raise InvalidArgumentError("BWT needs at least two tasks")
    last = _row(r, n - 1)
    diag = np.array([r.acc[j, j] for j in range(n - 1)])
    return float(np.mean(last[:-1] - diag))


def compute_fwt(r: RMatrix) -> float:
    n = r.n_tasks
    if n < 2:
        raise InvalidArgumentError("FWT needs at least two tasks")
    if r.probe is None or r.baseline is None:
        raise StateError("forward-transfer probes were not measured")
    probe, base = r.probe[1:], r.baseline[1:]
    if np.any(np.isnan(probe)) or np.any(np.isnan(base)):
        raise StateError("forward-transfer probes or baselines are missing")
    return float(np.mean(probe - base))


def accuracy_curve(r: RMatrix) -> list[float]:
    out = []
    for t in range(r.n_tasks):
        row = r.acc[t, : t + 1]
        if np.any(np.isnan(row)):
            break
        out.append(float(np.mean(row)))
    return out


def report(r: RMatrix) -> TransferReport:
    bwt = compute_bwt(r) if r.n_tasks >= 2 else None
    try:
        fwt = compute_fwt(r)
    except (StateError, InvalidArgumentError):
        fwt = None
    return TransferReport(acc=compute_acc(r), bwt=bwt, fwt=fwt, curve=accuracy_curve(r))
