"""Synthetic few-shot classification streams with tunable inter-task relatedness.

Tokens come from the upper (signal) half of the vocabulary. Class ``c`` of
task ``t`` draws tokens i.i.d. from

    (1 - background) * [rho * shared[c] + (1 - rho) * private[t, c]] + background * uniform

where ``shared`` prototypes are common to the whole stream and ``private``
ones are drawn per task.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidConfigError, InvalidDataError


@dataclass(frozen=True)
class StreamConfig:
    n_tasks: int = 20
    n_classes: int = 2
    k_shot: int = 20
    k_val: int = 10
    k_test: int = 100
    vocab_size: int = 512
    seq_len: int = 16
    relatedness: float = 0.6
    support: int = 16  # tokens per class prototype
    background: float = 0.5
    seed: int = 0
    order_seed: int | None = None

    def validate(self) -> None:
        if self.n_tasks < 1 or self.n_classes < 2:
            raise InvalidConfigError("need n_tasks >= 1 and n_classes >= 2")
        if min(self.k_shot, self.k_val, self.k_test, self.seq_len, self.support) < 1:
            raise InvalidConfigError("k_shot, k_val, k_test, seq_len and support must be >= 1")
        if not 0.0 <= self.relatedness <= 1.0:
            raise InvalidConfigError(f"relatedness {self.relatedness} outside [0, 1]")
        if not 0.0 <= self.background < 1.0:
            raise InvalidConfigError("background must lie in [0, 1)")
        signal = self.vocab_size - self.vocab_size // 2
        if self.n_classes * self.support > signal:
            raise InvalidConfigError(
                f"signal vocabulary of {signal} tokens cannot hold {self.n_classes} disjoint "
                f"class supports of {self.support} tokens"
            )
        if (1.0 - self.background) < 0.2:
            raise InvalidConfigError("background too strong: classes would be closer than 0.2 in total variation")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Split:
    x: np.ndarray  # N x seq_len token ids
    y: np.ndarray  # N labels

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class SyntheticTask:
    task_id: int
    class_dists: np.ndarray  # K x vocab_size
    train: Split
    val: Split
    test: Split
    n_classes: int = field(init=False)

    def __post_init__(self):
        self.n_classes = self.class_dists.shape[0]


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def _prototypes(rng: np.random.Generator, k: int, support: int, lo: int, hi: int) -> np.ndarray:
    """``k`` distributions over ``[lo, hi)`` with disjoint random supports."""
    tokens = lo + rng.permutation(hi - lo)[: k * support]
    out = np.zeros((k, hi))
    for c in range(k):
        w = rng.dirichlet(np.ones(support))
        out[c, tokens[c * support : (c + 1) * support]] = w
    return out


def _sample(rng, dist: np.ndarray, n: int, seq_len: int) -> np.ndarray:
    return rng.choice(dist.shape[0], size=(n, seq_len), p=dist)


def _split(rng, dists: np.ndarray, per_class: int, seq_len: int) -> Split:
    xs, ys = [], []
    for c, dist in enumerate(dists):
        xs.append(_sample(rng, dist, per_class, seq_len))
        ys.append(np.full(per_class, c))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    order = rng.permutation(len(y))
    return Split(x[order], y[order])


def task_distributions(cfg: StreamConfig, task_id: int) -> np.ndarray:
    v, lo = cfg.vocab_size, cfg.vocab_size // 2
    shared = _prototypes(np.random.default_rng([cfg.seed, 0]), cfg.n_classes, cfg.support, lo, v)
    private = _prototypes(np.random.default_rng([cfg.seed, 1, task_id]), cfg.n_classes, cfg.support, lo, v)
    background = np.zeros(v)
    background[lo:] = 1.0 / (v - lo)
    mix = cfg.relatedness * shared + (1.0 - cfg.relatedness) * private
    return (1.0 - cfg.background) * mix + cfg.background * background


MIN_CLASS_TV = 0.2


def min_class_tv(dists: np.ndarray) -> float:
    k = dists.shape[0]
    return min(total_variation(dists[a], dists[b]) for a in range(k) for b in range(a + 1, k))


def generate_task(cfg: StreamConfig, task_id: int) -> SyntheticTask:
    dists = task_distributions(cfg, task_id)
    tv = min_class_tv(dists)
    if tv < MIN_CLASS_TV:
        raise InvalidConfigError(
            f"task {task_id}: classes only {tv:.3f} apart in total variation (need {MIN_CLASS_TV}); "
            "raise support size, vocabulary or lower background"
        )
    rng = np.random.default_rng([cfg.seed, 2, task_id])
    return SyntheticTask(
        task_id=task_id,
        class_dists=dists,
        train=_split(rng, dists, cfg.k_shot, cfg.seq_len),
        val=_split(rng, dists, cfg.k_val, cfg.seq_len),
        test=_split(rng, dists, cfg.k_test, cfg.seq_len),
    )


def generate_stream(cfg: StreamConfig) -> list[SyntheticTask]:
    cfg.validate()
    tasks = [generate_task(cfg, t) for t in range(cfg.n_tasks)]
    if cfg.order_seed is not None:
        tasks = permute_order(tasks, cfg.order_seed)
    return tasks


def permute_order(tasks: list, order_seed: int) -> list:
    perm = np.random.default_rng(order_seed).permutation(len(tasks))
    return [tasks[i] for i in perm]


def export_jsonl(tasks: list[SyntheticTask], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            for name in ("train", "val", "test"):
                split = getattr(task, name)
                for x, y in zip(split.x, split.y):
                    rec = {"task_id": task.task_id, "split": name, "label": int(y), "tokens": x.tolist()}
                    fh.write(json.dumps(rec) + "\n")


def import_jsonl(path) -> list[SyntheticTask]:
    """Tasks rebuilt from JSON lines; class distributions are not stored and come back empty."""
    rows: dict = {}
    order: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            tid = rec["task_id"]
            if tid not in rows:
                rows[tid] = {"train": ([], []), "val": ([], []), "test": ([], [])}
                order.append(tid)
            xs, ys = rows[tid][rec["split"]]
            xs.append(rec["tokens"])
            ys.append(rec["label"])
    tasks = []
    for tid in order:
        splits = {}
        for name, (xs, ys) in rows[tid].items():
            if not ys:
                raise InvalidDataError(f"task {tid} has an empty {name} split")
            splits[name] = Split(np.asarray(xs, dtype=np.int64), np.asarray(ys, dtype=np.int64))
        k = int(max(splits["train"].y.max(), splits["test"].y.max())) + 1
        tasks.append(SyntheticTask(task_id=tid, class_dists=np.zeros((k, 0)), **splits))
    return tasks
