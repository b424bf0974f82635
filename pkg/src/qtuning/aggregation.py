"""Rank-one Hadamard scaling of the prompt queue, ``W = u v^T``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .numkernel import Tensor
from .numkernel import tape as T


@dataclass
class RankOneAggregator:
    u: np.ndarray  # c
    v: np.ndarray  # d
    trainable: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.u), len(self.v)

    @property
    def n_params(self) -> int:
        return len(self.u) + len(self.v)

    def matrix(self) -> np.ndarray:
        return np.outer(self.u, self.v)

    def importance(self) -> np.ndarray:
        """Per-row mean of ``|u_i v_j|`` (heatmap readout)."""
        return np.abs(self.u) * np.abs(self.v).mean()


def init_aggregator(c: int, d: int) -> RankOneAggregator:
    # all-ones W is the Hadamard identity
    if c < 1 or d < 1:
        raise InvalidArgumentError(f"aggregator needs c, d >= 1 (got {c}, {d})")
    return RankOneAggregator(u=np.ones(c), v=np.ones(d))


def rebind(agg_prev: RankOneAggregator | None, c_new: int, d: int) -> RankOneAggregator:
    """Fresh identity aggregator for the next task; ``agg_prev`` stays with its snapshot."""
    return init_aggregator(c_new, d)


def apply(agg: RankOneAggregator, q_rows: np.ndarray) -> np.ndarray:
    q_rows = np.asarray(q_rows, dtype=np.float64)
    if q_rows.shape != agg.shape:
        raise InvalidArgumentError(f"queue rows {q_rows.shape} do not match aggregator {agg.shape}")
    return agg.u[:, None] * agg.v[None, :] * q_rows


def apply_tensor(u: Tensor, v: Tensor, q_rows: Tensor) -> Tensor:
    if q_rows.value.shape != (u.value.shape[0], v.value.shape[0]):
        raise InvalidArgumentError(
            f"queue rows {q_rows.value.shape} do not match aggregator {(u.value.shape[0], v.value.shape[0])}"
        )
    return T.mul(T.outer(u, v), q_rows)
