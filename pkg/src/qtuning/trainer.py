"""Per-task training and the cross-task queue lifecycle.

For each incoming task: evict if the queue is full, append a fresh trainable
prompt, bind a fresh identity aggregator, then optimize the new prompt, the
aggregator, the shared prefix and the task head with Adam. Once the queue has
overflowed for the first time the shared prefix is also pulled toward the
previous task's frozen configuration by the memory-retention loss. Every task
ends with an immutable snapshot that alone is used to score that task later.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import aggregation as agg_mod
from . import prompts as pr
from .backbone import FrozenBackbone, TaskHead, encode_cls, forward, init_head, predict_proba
from .errors import InvalidConfigError, InvalidDataError
from .metrics import RMatrix, report
from .numkernel import AdamState, GradTape, adam_step
from .numkernel import tape as T
from .objectives import (
    EtaSchedule,
    disc_step,
    init_discriminator,
    make_mr_batch,
    mr_loss_jsd,
    mr_loss_kl_logits,
)

log = logging.getLogger(__name__)

METHODS = ("qtuning", "progprompt_baseline", "pertask_prompt", "shared_prompt_only")
MR_VARIANTS = ("kl", "jsd", "none")

LOG_COLUMNS = ("task", "epoch", "step", "l_q", "l_mr", "eta", "l_total", "wall_time_ms")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-2
    patience: int = 10
    prompt_len: int = 10
    q_size: int = 5
    eviction: str = "dq_pca"
    eviction_seed: int = 0
    eta: float = 1e-2
    mr_variant: str = "kl"
    aggregation: bool = True
    prefix_len: int = 10
    mlp_hidden: int = 32
    disc_hidden: int = 64
    disc_ratio: int = 1
    seed: int = 0
    measure_fwt: bool = False
    probe_epochs: int = 20
    eval_batch: int = 256

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "patience", "prompt_len", "q_size", "mlp_hidden",
                     "disc_hidden", "disc_ratio", "probe_epochs", "eval_batch"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"train.{name} must be >= 1")
        if self.prefix_len < 0:
            raise InvalidConfigError("train.prefix_len must be >= 0")
        if self.lr <= 0 or self.eta < 0:
            raise InvalidConfigError("train.lr must be > 0 and train.eta >= 0")
        if self.mr_variant not in MR_VARIANTS:
            raise InvalidConfigError(f"train.mr_variant must be one of {MR_VARIANTS}")
        pr.EvictionPolicy(self.eviction, self.eviction_seed)

    @property
    def policy(self) -> pr.EvictionPolicy:
        return pr.EvictionPolicy(self.eviction, self.eviction_seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Lifecycle:
    """What a method keeps between tasks."""

    keep_queue: bool  # inherit previous prompts
    bounded: bool  # evict at capacity
    new_prompt: bool  # add a per-task prompt
    prefix: bool
    aggregation: bool
    mr: str

    @classmethod
    def for_method(cls, method: str, cfg: TrainConfig) -> "Lifecycle":
        has_prefix = cfg.prefix_len > 0
        if method == "qtuning":
            return cls(True, True, True, has_prefix, cfg.aggregation, cfg.mr_variant if has_prefix else "none")
        if method == "progprompt_baseline":
            return cls(True, False, True, has_prefix, cfg.aggregation, cfg.mr_variant if has_prefix else "none")
        if method == "pertask_prompt":
            return cls(False, True, True, False, False, "none")
        if method == "shared_prompt_only":
            if not has_prefix:
                raise InvalidConfigError("shared_prompt_only needs prefix_len >= 1")
            return cls(False, True, False, True, False, "none")
        raise InvalidConfigError(f"unknown method {method!r}; choose from {METHODS}")


@dataclass(frozen=True)
class TaskInferenceSnapshot:
    """Frozen inference bundle for one finished task."""

    task_id: int
    stage: int
    backbone: FrozenBackbone
    prefix: np.ndarray | None
    u: np.ndarray | None
    v: np.ndarray | None
    queue_rows: np.ndarray
    head: TaskHead

    def __post_init__(self):
        for a in (self.prefix, self.u, self.v, self.queue_rows, self.head.alpha):
            if a is not None:
                a.setflags(write=False)

    def scaled_queue(self) -> np.ndarray:
        if self.u is None or self.queue_rows.shape[0] == 0:
            return self.queue_rows
        return agg_mod.apply(agg_mod.RankOneAggregator(self.u, self.v), self.queue_rows)

    def features(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        """CLS features of this configuration (before the head)."""
        out = []
        q = self.scaled_queue()
        for lo in range(0, len(x), batch):
            tape = GradTape()
            parts = [a for a in (self.prefix, q) if a is not None and a.shape[0] > 0]
            rows = tape.constant(np.concatenate(parts, axis=0)) if parts else None
            out.append(encode_cls(self.backbone, tape, rows, x[lo : lo + batch]).value)
        return np.concatenate(out, axis=0)


def snapshot_eval(s: TaskInferenceSnapshot, test_data, batch: int = 256) -> float:
    x, y = test_data.x, test_data.y
    if len(y) == 0:
        raise InvalidDataError("empty evaluation split")
    if y.max() >= s.head.n_classes or y.min() < 0:
        raise InvalidDataError(f"labels exceed the head's {s.head.n_classes} classes")
    logits = s.features(x, batch) @ s.head.alpha
    return float(np.mean(np.argmax(logits, axis=1) == y))


class SnapshotStore:
    """Snapshots kept in memory, or spilled to ``directory`` and read back on demand."""

    def __init__(self, directory=None):
        self.directory = directory
        self._mem: list = []
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def append(self, s: TaskInferenceSnapshot) -> None:
        if self.directory is None:
            self._mem.append(s)
        else:
            from .checkpoint import write_snapshot

            write_snapshot(self.directory, self._count, s)
        self._count += 1

    def __getitem__(self, i: int) -> TaskInferenceSnapshot:
        if i < 0:
            i += self._count
        if not 0 <= i < self._count:
            raise IndexError(i)
        if self.directory is None:
            return self._mem[i]
        from .checkpoint import read_snapshot

        return read_snapshot(self.directory, i, self._backbone)

    def bind_backbone(self, bb: FrozenBackbone) -> None:
        self._backbone = bb

    def __iter__(self):
        for i in range(self._count):
            yield self[i]


@dataclass
class TrainerState:
    backbone: FrozenBackbone
    method: str
    cfg: TrainConfig
    n_tasks: int
    prefix: np.ndarray | None
    queue: pr.PromptQueue
    snapshots: SnapshotStore
    rmatrix: RMatrix
    stage: int = 0  # tasks completed
    logs: list = field(default_factory=list)
    summaries: list = field(default_factory=list)


def init_state(backbone: FrozenBackbone, cfg: TrainConfig, method: str, n_tasks: int, snapshot_dir=None):
    cfg.validate()
    life = Lifecycle.for_method(method, cfg)
    d = backbone.d_model
    prefix = None
    if life.prefix:
        rng = np.random.default_rng([cfg.seed, 7])
        ids = rng.integers(0, backbone.config.vocab_size, size=cfg.prefix_len)
        prefix = np.array(backbone.weights["tok_emb"][ids])
    q_size = cfg.q_size if life.bounded else None
    store = SnapshotStore(snapshot_dir)
    store.bind_backbone(backbone)
    return TrainerState(
        backbone=backbone,
        method=method,
        cfg=cfg,
        n_tasks=n_tasks,
        prefix=prefix,
        queue=pr.empty_queue(cfg.prompt_len, q_size, d),
        snapshots=store,
        rmatrix=RMatrix.empty(n_tasks),
    )


# --- model assembly ----------------------------------------------------------------


def _logits(tape: GradTape, bb: FrozenBackbone, ps: dict, frozen_rows: np.ndarray, tokens, use_agg=True):
    rows = []
    if frozen_rows.shape[0]:
        rows.append(tape.constant(frozen_rows))
    if "prompt.raw" in ps:
        rows.append(pr.materialize_tensor({k: ps["prompt." + k] for k in pr.MLP_PARTS}))
    queue = T.concat(rows, axis=0) if rows else None
    if queue is not None and use_agg and "agg.u" in ps:
        queue = agg_mod.apply_tensor(ps["agg.u"], ps["agg.v"], queue)
    return forward(bb, ps.get("prefix"), queue, tokens, ps["head"], tape=tape)


def _accuracy(bb, params: dict, frozen_rows, split, batch: int) -> float:
    correct = 0
    for lo in range(0, len(split.y), batch):
        tape = GradTape()
        ps = {k: tape.constant(v) for k, v in params.items()}
        logits = _logits(tape, bb, ps, frozen_rows, split.x[lo : lo + batch]).value
        correct += int(np.sum(np.argmax(logits, axis=1) == split.y[lo : lo + batch]))
    return correct / len(split.y)


def _check_task(task) -> None:
    for name in ("train", "val", "test"):
        if len(getattr(task, name)) == 0:
            raise InvalidDataError(f"task {task.task_id} has an empty {name} split")


def _fit(bb, params: dict, trainable: set, frozen_rows, task, cfg: TrainConfig, rng, epochs: int,
         early_stop: bool, mr=None, log_rows=None, stage=0, timings=None):
    """Adam over ``trainable`` entries of ``params``; returns the best-validation parameters."""
    state = AdamState(lr=cfg.lr)
    n = len(task.train.y)
    best = dict(params)
    best_acc = -1.0
    since = 0
    step = 0
    epochs_run = 0
    for epoch in range(epochs):
        epochs_run = epoch + 1
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            t0 = time.perf_counter()
            tape = GradTape()
            ps = {k: (tape.parameter(k, v) if k in trainable else tape.constant(v)) for k, v in params.items()}
            logits = _logits(tape, bb, ps, frozen_rows, task.train.x[idx])
            l_q = T.cross_entropy(logits, task.train.y[idx])
            l_mr = None
            if mr is not None:
                l_mr = mr.loss(tape, ps, idx)
                loss = l_q + mr.eta * l_mr
            else:
                loss = l_q
            grads = tape.backward(loss)
            upd, state = adam_step(state, {k: params[k] for k in trainable}, grads)
            params.update(upd)
            if mr is not None:
                mr.after_step(ps, idx)
            dt = (time.perf_counter() - t0) * 1e3
            if timings is not None:
                timings.append(dt)
            if log_rows is not None:
                lmr = float(l_mr.value) if l_mr is not None else 0.0
                log_rows.append(
                    {
                        "task": stage + 1,
                        "epoch": epoch + 1,
                        "step": step,
                        "l_q": float(l_q.value),
                        "l_mr": lmr,
                        "eta": mr.eta if mr is not None else 0.0,
                        "l_total": float(loss.value),
                        "wall_time_ms": dt,
                    }
                )
            step += 1
        if early_stop:
            acc = _accuracy(bb, params, frozen_rows, task.val, cfg.eval_batch)
            if acc > best_acc:
                best_acc, best, since = acc, dict(params), 0
            else:
                since += 1
                if since >= cfg.patience:
                    break
    if not early_stop:
        best = dict(params)
    return best, best_acc, epochs_run


class _MemoryRetention:
    """MR term for the shared prefix: the new side sees only the prefix, the old side is frozen."""

    def __init__(self, variant, eta, prev: TaskInferenceSnapshot, task, bb, cfg: TrainConfig, rng):
        self.variant = variant
        self.eta = eta
        self.bb = bb
        self.rng = rng
        self.old_features = prev.features(task.train.x, cfg.eval_batch)
        self.x = task.train.x
        if variant == "jsd":
            self.disc = init_discriminator(task.n_classes, cfg.disc_hidden, rng)
            self.disc_state = AdamState(lr=1e-3)
            self.ratio = cfg.disc_ratio
        self._batch = None

    def loss(self, tape: GradTape, ps: dict, idx):
        alpha = ps["head"].value  # head is read out detached on both sides
        p_old = predict_proba(self.old_features[idx] @ alpha)
        h_new = encode_cls(self.bb, tape, ps["prefix"], self.x[idx])
        logits_new = h_new @ tape.constant(alpha)
        if self.variant == "kl":
            return mr_loss_kl_logits(logits_new, p_old)
        self._batch = make_mr_batch(T.softmax(logits_new), p_old, self.rng)
        disc = {k: tape.constant(v) for k, v in self.disc.params.items()}
        return mr_loss_jsd(self._batch, disc, tape)

    def after_step(self, ps, idx):
        if self.variant == "jsd" and self._batch is not None:
            for _ in range(self.ratio):
                disc_step(self.disc, self.disc_state, self._batch)


def train_task(state: TrainerState, task, stage_index: int | None = None):
    """Train one task in place on ``state``; returns its snapshot and summary."""
    _check_task(task)
    cfg = state.cfg
    bb = state.backbone
    life = Lifecycle.for_method(state.method, cfg)
    stage = state.stage if stage_index is None else stage_index
    task_index = stage + 1
    rng = np.random.default_rng([cfg.seed, task_index, 0])
    d = bb.d_model

    queue = state.queue if life.keep_queue else pr.empty_queue(cfg.prompt_len, cfg.q_size, d)
    rows_before = queue.n_rows
    evicted = False
    if life.new_prompt and queue.is_full:
        queue = pr.evict(queue, cfg.policy)
        evicted = True
    frozen_rows = queue.rows()
    frozen_digest = frozen_rows.tobytes()

    params: dict = {}
    if life.new_prompt:
        prompt = pr.init_prompt(cfg.prompt_len, bb.weights["tok_emb"], cfg.mlp_hidden, rng)
        params.update(prompt.params("prompt."))
    c = frozen_rows.shape[0] + (cfg.prompt_len if life.new_prompt else 0)
    if life.aggregation and c > 0:
        agg = agg_mod.rebind(None, c, d)
        params["agg.u"], params["agg.v"] = agg.u, agg.v
    if life.prefix:
        params["prefix"] = state.prefix.copy()
    head = init_head(task.task_id, d, task.n_classes, rng)
    params["head"] = head.alpha
    trainable = set(params)

    # identity start: an all-ones aggregator must not change the logits
    identity_gap = 0.0
    if "agg.u" in params:
        probe_x = task.train.x[: cfg.batch_size]
        tape = GradTape()
        ps = {k: tape.constant(v) for k, v in params.items()}
        with_agg = _logits(tape, bb, ps, frozen_rows, probe_x).value
        without = _logits(tape, bb, ps, frozen_rows, probe_x, use_agg=False).value
        identity_gap = float(np.max(np.abs(with_agg - without)))

    schedule = EtaSchedule(cfg.q_size, cfg.eta)
    eta = schedule(task_index) if life.mr != "none" else 0.0
    mr = None
    if eta > 0 and len(state.snapshots) > 0:
        mr = _MemoryRetention(life.mr, eta, state.snapshots[-1], task, bb, cfg, rng)

    timings: list = []
    best, best_val, epochs_run = _fit(
        bb, params, trainable, frozen_rows, task, cfg, rng, cfg.epochs, True, mr, state.logs, stage, timings
    )

    if life.new_prompt:
        dense = pr.materialize(pr.ResidualMlpPrompt.from_params(best, "prompt."))
        queue = pr.enqueue(queue, dense, task.task_id)
    if life.prefix:
        state.prefix = np.array(best["prefix"])
    if life.keep_queue:
        state.queue = queue
    snap = TaskInferenceSnapshot(
        task_id=task.task_id,
        stage=stage,
        backbone=bb,
        prefix=None if state.prefix is None else state.prefix.copy(),
        u=np.array(best["agg.u"]) if "agg.u" in best else None,
        v=np.array(best["agg.v"]) if "agg.v" in best else None,
        queue_rows=queue.rows().copy(),
        head=TaskHead(task.task_id, np.array(best["head"])),
    )
    prefix_rows = 0 if state.prefix is None else state.prefix.shape[0]
    summary = {
        "task": task_index,
        "task_id": task.task_id,
        "eta": eta,
        "mr_active": mr is not None,
        "queue_rows_before": rows_before,
        "evicted": evicted,
        "queue_rows_train": c,
        "queue_rows_after": queue.n_rows,
        "encoder_rows": prefix_rows + c + 1 + task.train.x.shape[1],
        "resident_prompt_floats": (queue.n_rows + prefix_rows) * d,
        "epochs_run": epochs_run,
        "best_val_acc": best_val,
        "mean_step_ms": float(np.mean(timings)) if timings else 0.0,
        "steps": len(timings),
        "identity_start_gap": identity_gap,
        "frozen_queue_stable": queue.rows()[: frozen_rows.shape[0]].tobytes() == frozen_digest,
        "aggregator_importance": [] if snap.u is None else agg_mod.RankOneAggregator(snap.u, snap.v).importance().tolist(),
    }
    state.summaries.append(summary)
    return snap, summary


def _probe_accuracy(state: TrainerState, task, inherit: bool) -> float:
    """Frozen inherited context (prefix + queue) plus a fresh prompt and head, fixed budget."""
    cfg = state.cfg
    bb = state.backbone
    d = bb.d_model
    rng = np.random.default_rng([cfg.seed, task.task_id, 1])
    life = Lifecycle.for_method(state.method, cfg)
    queue = pr.empty_queue(cfg.prompt_len, cfg.q_size, d)
    params: dict = {}
    if inherit and life.keep_queue:
        queue = state.queue
        if queue.is_full:
            queue = pr.evict(queue, cfg.policy)
    prompt = pr.init_prompt(cfg.prompt_len, bb.weights["tok_emb"], cfg.mlp_hidden, rng)
    params.update(prompt.params("prompt."))
    params["head"] = init_head(task.task_id, d, task.n_classes, rng).alpha
    trainable = set(params)
    if inherit and state.prefix is not None:
        params["prefix"] = state.prefix
    frozen = queue.rows()
    fitted, _, _ = _fit(bb, params, trainable, frozen, task, cfg, rng, cfg.probe_epochs, False)
    return _accuracy(bb, fitted, frozen, task.test, cfg.eval_batch)


@dataclass
class RunRecord:
    config: dict
    method: str
    rmatrix: RMatrix
    summaries: list
    logs: list
    metrics: dict
    wall_time_s: float
    state: object = field(default=None, repr=False)

    def to_json(self) -> dict:
        def clean(a):
            return None if a is None else [None if np.isnan(x) else round(float(x), 10) for x in a]

        return {
            "method": self.method,
            "config": self.config,
            "rmatrix": [clean(row) for row in self.rmatrix.acc],
            "fwt_probe": clean(self.rmatrix.probe),
            "fwt_baseline": clean(self.rmatrix.baseline),
            "metrics": self.metrics,
            "tasks": self.summaries,
        }


def run_stream(tasks, cfg: TrainConfig, backbone: FrozenBackbone, method: str = "qtuning",
               state: TrainerState | None = None, config_echo: dict | None = None,
               snapshot_dir=None, on_task_end=None) -> RunRecord:
    """Train ``tasks`` in order, filling the accuracy grid after each stage.

    Passing a ``state`` (e.g. from :func:`qtuning.checkpoint.load_checkpoint`)
    resumes at ``state.stage``. ``on_task_end(state)`` runs after each stage.
    """
    if not tasks:
        raise InvalidDataError("need at least one task")
    t_start = time.perf_counter()
    if state is None:
        state = init_state(backbone, cfg, method, len(tasks), snapshot_dir)
    r = state.rmatrix
    for t in range(state.stage, len(tasks)):
        task = tasks[t]
        if cfg.measure_fwt and t >= 1:
            r.probe[t] = _probe_accuracy(state, task, inherit=True)
            r.baseline[t] = _probe_accuracy(state, task, inherit=False)
        snap, summary = train_task(state, task)
        state.snapshots.append(snap)
        for j in range(t + 1):
            r.acc[t, j] = snapshot_eval(state.snapshots[j], tasks[j].test, cfg.eval_batch)
        state.stage = t + 1
        log.info("task %d/%d acc=%.4f queue_rows=%d", t + 1, len(tasks), r.acc[t, t], summary["queue_rows_after"])
        if on_task_end is not None:
            on_task_end(state)
    rep = report(r)
    metrics = rep.to_dict()
    return RunRecord(
        config=config_echo or {"train": cfg.to_dict(), "method": state.method},
        method=state.method,
        rmatrix=r,
        summaries=state.summaries,
        logs=state.logs,
        metrics=metrics,
        wall_time_s=time.perf_counter() - t_start,
        state=state,
    )


def run_progprompt_baseline(tasks, cfg: TrainConfig, backbone: FrozenBackbone, **kw) -> RunRecord:
    """Same lifecycle with an unbounded, ever-growing prompt list."""
    return run_stream(tasks, cfg, backbone, method="progprompt_baseline", **kw)
