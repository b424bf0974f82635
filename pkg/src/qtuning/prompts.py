"""Soft prompts, the bounded prompt queue, and its eviction policies."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CapacityError, InvalidArgumentError, PreconditionError
from .numkernel import GradTape, Tensor, svd
from .numkernel import tape as T

PROMPT = "prompt"
PCA_RESIDUE = "pca"

MLP_PARTS = ("raw", "w1", "b1", "w2", "b2")


@dataclass
class ResidualMlpPrompt:
    """Trainable prompt ``raw`` passed row-wise through a residual two-layer MLP."""

    raw: np.ndarray  # l x d
    w1: np.ndarray  # d x h
    b1: np.ndarray  # h
    w2: np.ndarray  # h x d
    b2: np.ndarray  # d

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: getattr(self, k) for k in MLP_PARTS}

    @classmethod
    def from_params(cls, params: dict, prefix: str = "") -> "ResidualMlpPrompt":
        return cls(**{k: params[prefix + k] for k in MLP_PARTS})

    def check(self) -> None:
        l, d = self.raw.shape
        h = self.w1.shape[1] if self.w1.ndim == 2 else -1
        ok = (
            self.w1.shape == (d, h)
            and self.b1.shape == (h,)
            and self.w2.shape == (h, d)
            and self.b2.shape == (d,)
        )
        if not ok or l < 1:
            raise InvalidArgumentError(
                f"inconsistent prompt shapes: raw {self.raw.shape}, w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )


def init_prompt(l: int, token_table: np.ndarray, hidden: int, rng: np.random.Generator, vocab_lo: int = 0):
    """Raw rows copied from randomly sampled token embeddings; small MLP weights."""
    d = token_table.shape[1]
    ids = rng.integers(vocab_lo, token_table.shape[0], size=l)
    return ResidualMlpPrompt(
        raw=np.array(token_table[ids], dtype=np.float64),
        w1=rng.standard_normal((d, hidden)) / np.sqrt(d),
        b1=np.zeros(hidden),
        w2=0.01 * rng.standard_normal((hidden, d)),
        b2=np.zeros(d),
    )


def materialize(p: ResidualMlpPrompt) -> np.ndarray:
    p.check()
    hidden = np.maximum(p.raw @ p.w1 + p.b1, 0.0)
    return p.raw + hidden @ p.w2 + p.b2


def materialize_tensor(parts: dict[str, Tensor]) -> Tensor:
    """Tape version of :func:`materialize` over tensors keyed by ``MLP_PARTS``."""
    raw = parts["raw"]
    hidden = T.relu(raw @ parts["w1"] + parts["b1"])
    return raw + hidden @ parts["w2"] + parts["b2"]


@dataclass(frozen=True)
class Segment:
    kind: str  # PROMPT or PCA_RESIDUE
    ident: int  # task id for prompts, generation for residues
    rows: np.ndarray

    def __post_init__(self):
        self.rows.setflags(write=False)


@dataclass(frozen=True)
class PromptQueue:
    """Ordered, immutable stack of prompt segments (oldest first).

    ``q_size=None`` disables the bound (used by the growing prompt-list baseline).
    """

    l: int
    q_size: int | None
    d: int
    segments: tuple = ()
    evictions: int = 0

    @property
    def capacity(self) -> int | None:
        return None if self.q_size is None else self.l * self.q_size

    @property
    def n_rows(self) -> int:
        return sum(s.rows.shape[0] for s in self.segments)

    @property
    def is_full(self) -> bool:
        return self.capacity is not None and self.n_rows >= self.capacity

    def rows(self) -> np.ndarray:
        if not self.segments:
            return np.zeros((0, self.d))
        return np.concatenate([s.rows for s in self.segments], axis=0)

    def tags(self) -> list[tuple[str, int, int]]:
        return [(s.kind, s.ident, s.rows.shape[0]) for s in self.segments]


def empty_queue(l: int, q_size: int | None, d: int) -> PromptQueue:
    if l < 1 or (q_size is not None and q_size < 1):
        raise InvalidArgumentError("prompt length and queue size must be >= 1")
    return PromptQueue(l=l, q_size=q_size, d=d)


def enqueue(q: PromptQueue, p: np.ndarray, task_id: int) -> PromptQueue:
    p = np.array(p, dtype=np.float64)
    if p.shape != (q.l, q.d):
        raise InvalidArgumentError(f"prompt must be {q.l}x{q.d}, got {p.shape}")
    if q.capacity is not None and q.n_rows + q.l > q.capacity:
        raise CapacityError(
            f"queue holds {q.n_rows} of {q.capacity} rows; evict before enqueueing another {q.l}"
        )
    return replace(q, segments=q.segments + (Segment(PROMPT, task_id, p),))


def dq_pca(q: PromptQueue) -> PromptQueue:
    """Center the full queue, SVD it, keep the top ``C - l`` principal rows.

    The column mean is discarded. When the centered rank is below ``C - l``
    the trailing rows are exact zeros.
    """
    if q.capacity is None or q.n_rows != q.capacity:
        raise PreconditionError(f"dq_pca needs a full queue ({q.capacity} rows), have {q.n_rows}")
    stacked = q.rows()
    centered = stacked - stacked.mean(axis=0, keepdims=True)
    s = svd(centered)
    keep = q.capacity - q.l
    k = min(keep, len(s.sigma))
    residue = np.zeros((keep, q.d))
    if k > 0:
        residue[:k] = s.sigma[:k, None] * s.vt[:k]
    seg = Segment(PCA_RESIDUE, q.evictions + 1, residue)
    return replace(q, segments=(seg,) if keep > 0 else (), evictions=q.evictions + 1)


@dataclass(frozen=True)
class EvictionPolicy:
    kind: str  # "dq_pca" | "fifo" | "random"
    seed: int | None = None

    KINDS = ("dq_pca", "fifo", "random")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise InvalidArgumentError(f"unknown eviction policy {self.kind!r}; choose from {self.KINDS}")
        if self.kind == "random" and self.seed is None:
            raise InvalidArgumentError("random eviction needs an explicit seed")


def evict(q: PromptQueue, policy: EvictionPolicy) -> PromptQueue:
    if q.capacity is None or q.n_rows != q.capacity:
        raise PreconditionError(f"evict needs a full queue ({q.capacity} rows), have {q.n_rows}")
    if policy.kind == "dq_pca":
        return dq_pca(q)
    if policy.kind == "fifo":
        drop = 0
    else:
        rng = np.random.default_rng([policy.seed, q.evictions])
        drop = int(rng.integers(len(q.segments)))
    if q.segments[drop].rows.shape[0] != q.l:
        raise PreconditionError("segment eviction expects l-row segments")
    segs = q.segments[:drop] + q.segments[drop + 1 :]
    return replace(q, segments=segs, evictions=q.evictions + 1)


def queue_tensor(tape: GradTape, q: PromptQueue, new_prompt: Tensor | None = None) -> Tensor | None:
    """Frozen queue rows as a constant, with the trainable newest prompt appended."""
    parts = []
    if q.n_rows:
        parts.append(tape.constant(q.rows()))
    if new_prompt is not None:
        parts.append(new_prompt)
    if not parts:
        return None
    return T.concat(parts, axis=0)
