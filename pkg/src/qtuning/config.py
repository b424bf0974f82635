"""Experiment configuration: TOML (or JSON) with strict key checking.

Grammar::

    method = "qtuning"        # qtuning | progprompt_baseline | pertask_prompt | shared_prompt_only
    output_dir = "runs"
    run_tag = ""              # empty: content hash of the resolved config
    checkpoint_every = 0      # also checkpoint after every N tasks (0: final only)

    [stream]   # StreamConfig fields
    [train]    # TrainConfig fields
    [backbone] # BackboneConfig fields
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backbone import BackboneConfig
from .errors import InvalidConfigError
from .taskstream import StreamConfig
from .trainer import METHODS, TrainConfig


class ConfigParseError(InvalidConfigError):
    def __init__(self, path, line, col, msg):
        super().__init__(f"{path}:{line}:{col}: {msg}")
        self.line, self.col = line, col


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "qtuning"
    output_dir: str = "runs"
    run_tag: str = ""
    checkpoint_every: int = 0
    stream: StreamConfig = field(default_factory=StreamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise InvalidConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.checkpoint_every < 0:
            raise InvalidConfigError("checkpoint_every must be >= 0")
        self.stream.validate()
        self.train.validate()
        c = self.train.prompt_len * self.train.q_size if self.method != "progprompt_baseline" else 0
        need = self.train.prefix_len + c + 1 + self.stream.seq_len
        self.backbone.validate(required_len=need)
        if self.stream.vocab_size != self.backbone.vocab_size:
            raise InvalidConfigError("stream.vocab_size must equal backbone.vocab_size")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "output_dir": self.output_dir,
            "run_tag": self.run_tag,
            "checkpoint_every": self.checkpoint_every,
            "stream": self.stream.to_dict(),
            "train": self.train.to_dict(),
            "backbone": self.backbone.to_dict(),
        }

    def identity(self) -> dict:
        """Fields that determine the results (output location excluded)."""
        d = self.to_dict()
        for k in ("output_dir", "run_tag", "checkpoint_every"):
            d.pop(k)
        return d

    def content_tag(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def group_key(self) -> str:
        """Tag with every seed removed, used to pool runs across seeds."""
        d = self.identity()
        for sec in ("stream", "train", "backbone"):
            d[sec].pop("seed", None)
        d["train"].pop("eviction_seed", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()[:12]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            stream=dataclasses.replace(self.stream, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            backbone=dataclasses.replace(self.backbone, seed=seed),
        )

    def with_value(self, axis: str, value) -> "ExperimentConfig":
        key = {"eviction": "eviction", "eta": "eta", "qsize": "q_size"}[axis]
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **{key: value}))


_SECTIONS = {"stream": StreamConfig, "train": TrainConfig, "backbone": BackboneConfig}
_TOP = {"method", "output_dir", "run_tag", "checkpoint_every"}


def _build(cls, raw: dict, section: str):
    if not isinstance(raw, dict):
        raise InvalidConfigError(f"[{section}] must be a table")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise InvalidConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    out = {}
    for k, v in raw.items():
        default = getattr(cls(), k)
        if isinstance(default, bool) and not isinstance(v, bool):
            raise InvalidConfigError(f"{section}.{k} must be a boolean")
        if isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        out[k] = v
    return cls(**out)


def from_dict(raw: dict) -> ExperimentConfig:
    unknown = sorted(set(raw) - _TOP - set(_SECTIONS))
    if unknown:
        raise InvalidConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kw = {k: raw[k] for k in _TOP if k in raw}
    for sec, cls in _SECTIONS.items():
        kw[sec] = _build(cls, raw.get(sec, {}), sec)
    cfg = ExperimentConfig(**kw)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigParseError(path, exc.lineno, exc.colno, exc.msg) from exc
    else:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            m = re.search(r"line (\d+), column (\d+)", str(exc))
            line, col = (int(m.group(1)), int(m.group(2))) if m else (0, 0)
            raise ConfigParseError(path, line, col, str(exc)) from exc
    return from_dict(raw)
