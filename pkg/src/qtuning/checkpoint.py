"""Checkpoint bundles: a ``manifest.txt`` of key=value lines plus one binary file per tensor.

Tensor files start with a 16-byte little-endian header (magic ``QTT1``, rank,
two dims; unused dims are 0) followed by row-major float64 payload. Every file
is listed in the manifest with its dims, byte size and SHA-256; the manifest
ends with a checksum line over everything above it.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, FrozenBackbone, TaskHead
from .errors import (
    CheckpointIntegrityError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .metrics import RMatrix
from .prompts import PromptQueue, Segment

FORMAT_VERSION = 1
MAGIC = b"QTT1"
HEADER = struct.Struct("<4sIII")


def encode_tensor(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype="<f8")
    if a.ndim > 2:
        raise ValueError("tensor files hold rank <= 2")
    dims = list(a.shape) + [0] * (2 - a.ndim)
    return HEADER.pack(MAGIC, a.ndim, *dims) + np.ascontiguousarray(a).tobytes()


def decode_tensor(raw: bytes, name: str = "?") -> np.ndarray:
    if len(raw) < HEADER.size:
        raise CheckpointTruncatedError(f"{name}: header cut short ({len(raw)} bytes)")
    magic, rank, d0, d1 = HEADER.unpack_from(raw)
    if magic != MAGIC or rank > 2:
        raise CheckpointIntegrityError(f"{name}: bad tensor header")
    shape = (d0, d1)[:rank]
    n = int(np.prod(shape)) if rank else 1
    body = raw[HEADER.size :]
    if len(body) < 8 * n:
        raise CheckpointTruncatedError(f"{name}: payload has {len(body)} of {8 * n} bytes")
    return np.frombuffer(body[: 8 * n], dtype="<f8").reshape(shape).astype(np.float64)


class _Writer:
    def __init__(self, root: Path):
        self.root = root
        self.lines: list[str] = [f"format_version={FORMAT_VERSION}"]
        (root / "tensors").mkdir(parents=True, exist_ok=True)

    def kv(self, key: str, value) -> None:
        text = str(value)
        if "\n" in text:
            raise ValueError(f"manifest value for {key} spans lines")
        self.lines.append(f"{key}={text}")

    def tensor(self, name: str, a) -> None:
        data = encode_tensor(a)
        fname = f"tensors/{name}.bin"
        (self.root / fname).write_bytes(data)
        dims = "x".join(str(s) for s in np.shape(a))
        self.kv(f"tensor.{name}", f"{fname};{dims};{len(data)};{hashlib.sha256(data).hexdigest()}")

    def blob(self, name: str, text: str) -> None:
        data = text.encode("utf-8")
        (self.root / name).write_bytes(data)
        self.kv(f"file.{name}", f"{len(data)};{hashlib.sha256(data).hexdigest()}")

    def close(self) -> None:
        body = "\n".join(self.lines) + "\n"
        digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
        (self.root / "manifest.txt").write_text(body + f"checksum={digest}\n", encoding="utf-8")


class _Reader:
    def __init__(self, root: Path):
        self.root = Path(root)
        path = self.root / "manifest.txt"
        if not path.exists():
            raise CheckpointTruncatedError(f"{path} is missing")
        try:
            text = path.read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointIntegrityError(f"{path} is not valid UTF-8") from exc
        lines = text.splitlines()
        if not lines or not lines[-1].startswith("checksum="):
            raise CheckpointTruncatedError(f"{path} has no checksum line")
        body = "\n".join(lines[:-1]) + "\n"
        if hashlib.sha256(body.encode("utf-8")).hexdigest() != lines[-1][len("checksum="):]:
            raise CheckpointIntegrityError(f"{path} checksum mismatch")
        self.kv: dict[str, str] = {}
        for line in lines[:-1]:
            key, sep, value = line.partition("=")
            if not sep:
                raise CheckpointIntegrityError(f"malformed manifest line {line!r}")
            self.kv[key] = value
        version = self.kv.get("format_version")
        if version != str(FORMAT_VERSION):
            raise CheckpointVersionError(f"bundle format {version}, this build reads {FORMAT_VERSION}")

    def __getitem__(self, key):
        return self.kv[key]

    def get(self, key, default=None):
        return self.kv.get(key, default)

    def has_tensor(self, name: str) -> bool:
        return f"tensor.{name}" in self.kv

    def tensor(self, name: str, expect_shape=None) -> np.ndarray:
        fname, dims, size, digest = self.kv[f"tensor.{name}"].split(";")
        path = self.root / fname
        raw = path.read_bytes() if path.exists() else b""
        if len(raw) < int(size):
            raise CheckpointTruncatedError(f"{fname}: {len(raw)} of {size} bytes present")
        if hashlib.sha256(raw).hexdigest() != digest:
            raise CheckpointIntegrityError(f"{fname}: checksum mismatch")
        a = decode_tensor(raw, fname)
        declared = tuple(int(x) for x in dims.split("x")) if dims else ()
        if a.shape != declared or (expect_shape is not None and a.shape != tuple(expect_shape)):
            raise CheckpointShapeError(f"{fname}: shape {a.shape}, expected {expect_shape or declared}")
        return a

    def blob(self, name: str) -> str:
        size, digest = self.kv[f"file.{name}"].split(";")
        path = self.root / name
        raw = path.read_bytes() if path.exists() else b""
        if len(raw) < int(size):
            raise CheckpointTruncatedError(f"{name}: {len(raw)} of {size} bytes present")
        if hashlib.sha256(raw).hexdigest() != digest:
            raise CheckpointIntegrityError(f"{name}: checksum mismatch")
        return raw.decode("utf-8")


def _atomic_dir(path: Path, fill) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        fill(tmp)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)


def _write_snapshot_into(w: _Writer, prefix: str, s) -> None:
    w.kv(f"{prefix}.task_id", s.task_id)
    w.kv(f"{prefix}.stage", s.stage)
    for name in ("prefix", "u", "v"):
        a = getattr(s, name)
        if a is not None:
            w.tensor(f"{prefix}.{name}", a)
    w.tensor(f"{prefix}.queue_rows", s.queue_rows)
    w.tensor(f"{prefix}.head", s.head.alpha)


def _read_snapshot_from(r: _Reader, prefix: str, bb: FrozenBackbone):
    from .trainer import TaskInferenceSnapshot

    d = bb.d_model

    def opt(name):
        return r.tensor(f"{prefix}.{name}") if r.has_tensor(f"{prefix}.{name}") else None

    pre = opt("prefix")
    if pre is not None and pre.shape[1] != d:
        raise CheckpointShapeError(f"{prefix}.prefix width {pre.shape[1]} != d_model {d}")
    rows = r.tensor(f"{prefix}.queue_rows")
    if rows.ndim != 2 or (rows.size and rows.shape[1] != d):
        raise CheckpointShapeError(f"{prefix}.queue_rows shape {rows.shape} incompatible with d_model {d}")
    if rows.shape[0] == 0:
        rows = np.zeros((0, d))
    head = r.tensor(f"{prefix}.head")
    task_id = int(r[f"{prefix}.task_id"])
    return TaskInferenceSnapshot(
        task_id=task_id,
        stage=int(r[f"{prefix}.stage"]),
        backbone=bb,
        prefix=pre,
        u=opt("u"),
        v=opt("v"),
        queue_rows=rows,
        head=TaskHead(task_id, head),
    )


def write_snapshot(directory, index: int, s) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)

    def fill(tmp):
        w = _Writer(tmp)
        _write_snapshot_into(w, "snap", s)
        w.close()

    _atomic_dir(root / f"snap_{index:05d}", fill)


def read_snapshot(directory, index: int, bb: FrozenBackbone):
    return _read_snapshot_from(_Reader(Path(directory) / f"snap_{index:05d}"), "snap", bb)


def save_checkpoint(state, path) -> Path:
    """Write ``state`` (a :class:`~qtuning.trainer.TrainerState`) as a bundle directory."""
    path = Path(path)

    def fill(tmp):
        w = _Writer(tmp)
        w.kv("method", state.method)
        w.kv("stage", state.stage)
        w.kv("n_tasks", state.n_tasks)
        w.kv("train_config", json.dumps(state.cfg.to_dict(), sort_keys=True))
        w.kv("backbone_config", json.dumps(state.backbone.config.to_dict(), sort_keys=True))
        w.kv("seed", state.cfg.seed)
        for k in sorted(state.backbone.weights):
            w.tensor(f"backbone.{k}", state.backbone.weights[k])
        if state.prefix is not None:
            w.tensor("prefix", state.prefix)
        q = state.queue
        w.kv("queue.l", q.l)
        w.kv("queue.q_size", "none" if q.q_size is None else q.q_size)
        w.kv("queue.d", q.d)
        w.kv("queue.evictions", q.evictions)
        w.kv("queue.n_segments", len(q.segments))
        for i, seg in enumerate(q.segments):
            w.kv(f"queue.segment.{i}", f"{seg.kind};{seg.ident};{seg.rows.shape[0]}")
            w.tensor(f"queue.segment.{i}", seg.rows)
        w.kv("snapshots", len(state.snapshots))
        for i, s in enumerate(state.snapshots):
            _write_snapshot_into(w, f"snapshot.{i}", s)
        w.tensor("rmatrix.acc", state.rmatrix.acc)
        w.tensor("rmatrix.probe", state.rmatrix.probe)
        w.tensor("rmatrix.baseline", state.rmatrix.baseline)
        w.blob("logs.json", json.dumps({"logs": state.logs, "summaries": state.summaries}))
        w.close()

    _atomic_dir(path, fill)
    return path


def load_checkpoint(path, snapshot_dir=None):
    """Rebuild a :class:`~qtuning.trainer.TrainerState`; nothing is returned on any error."""
    from .trainer import SnapshotStore, TrainConfig, TrainerState

    r = _Reader(Path(path))
    cfg = TrainConfig(**json.loads(r["train_config"]))
    bcfg = BackboneConfig(**json.loads(r["backbone_config"]))
    d = bcfg.d_model
    weights = {}
    for key in r.kv:
        if key.startswith("tensor.backbone."):
            name = key[len("tensor.backbone."):]
            weights[name] = r.tensor(f"backbone.{name}")
    if weights["tok_emb"].shape != (bcfg.vocab_size, d):
        raise CheckpointShapeError(f"token table {weights['tok_emb'].shape} disagrees with the backbone config")
    bb = FrozenBackbone(bcfg, weights)
    prefix = r.tensor("prefix", (cfg.prefix_len, d)) if r.has_tensor("prefix") else None
    segs = []
    for i in range(int(r["queue.n_segments"])):
        kind, ident, n = r[f"queue.segment.{i}"].split(";")
        rows = r.tensor(f"queue.segment.{i}", (int(n), d))
        segs.append(Segment(kind, int(ident), rows))
    q_size = r["queue.q_size"]
    queue = PromptQueue(
        l=int(r["queue.l"]),
        q_size=None if q_size == "none" else int(q_size),
        d=int(r["queue.d"]),
        segments=tuple(segs),
        evictions=int(r["queue.evictions"]),
    )
    n_tasks = int(r["n_tasks"])
    snaps = [_read_snapshot_from(r, f"snapshot.{i}", bb) for i in range(int(r["snapshots"]))]
    rm = RMatrix(
        acc=r.tensor("rmatrix.acc", (n_tasks, n_tasks)),
        probe=r.tensor("rmatrix.probe", (n_tasks,)),
        baseline=r.tensor("rmatrix.baseline", (n_tasks,)),
    )
    extra = json.loads(r.blob("logs.json"))
    store = SnapshotStore(snapshot_dir)
    store.bind_backbone(bb)
    for s in snaps:
        store.append(s)
    return TrainerState(
        backbone=bb,
        method=r["method"],
        cfg=cfg,
        n_tasks=n_tasks,
        prefix=prefix,
        queue=queue,
        snapshots=store,
        rmatrix=rm,
        stage=int(r["stage"]),
        logs=extra["logs"],
        summaries=extra["summaries"],
    )
