"""Command-line runner: ``qtuning run | sweep | report``.

Exit codes: 0 success, 1 runtime failure, 2 bad command line or config.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .backbone import build_backbone
from .config import ConfigParseError, ExperimentConfig, from_dict, load_config
from .errors import InvalidConfigError, QTuningError, UsageError
from .numkernel import BACKEND
from .objectives import EtaSchedule
from .taskstream import generate_stream
from .trainer import LOG_COLUMNS, run_stream

log = logging.getLogger("qtuning")

AXES = ("eviction", "eta", "qsize")


class _ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"{self.prog}: error: {message}") from None


# --- small writers -------------------------------------------------------------------


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.4f}"


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _publish(tmp: Path, final: Path) -> None:
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


# --- run -----------------------------------------------------------------------------


def run_dir_for(cfg: ExperimentConfig, out: Path) -> Path:
    return out / (cfg.run_tag or f"{cfg.method}-{cfg.content_tag()}")


def _rmatrix_csv(acc: np.ndarray) -> str:
    n = acc.shape[0]
    rows = [[t + 1] + [_fmt(acc[t, j]) for j in range(n)] for t in range(n)]
    return _csv_text(["stage"] + [f"task_{j + 1}" for j in range(n)], rows)


def _train_log_csv(logs: list) -> str:
    rows = [[_log_cell(r[c]) for c in LOG_COLUMNS] for r in logs]
    return _csv_text(LOG_COLUMNS, rows)


def _log_cell(v):
    if isinstance(v, float):
        return repr(round(v, 10))
    return v


def _heatmap_rows(summaries: list) -> list:
    rows = []
    for s in summaries:
        for i, w in enumerate(s.get("aggregator_importance") or []):
            rows.append([s["task"], i, f"{w:.6f}"])
    return rows


def execute_run(cfg: ExperimentConfig, out: Path, resume: bool = False) -> Path:
    """Run one experiment and publish its directory atomically; returns the path."""
    final = run_dir_for(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_root = out / f".{final.name}.ckpt"
    state = None
    if resume:
        last = ckpt_root / "latest"
        if not last.exists():
            raise UsageError(f"--resume given but no checkpoint exists at {last}")
        state = ckpt.load_checkpoint(last)
        log.info("resuming %s at stage %d", final.name, state.stage)

    tasks = generate_stream(cfg.stream)
    backbone = state.backbone if state is not None else build_backbone(cfg.backbone)[0]

    def on_task_end(st):
        every = cfg.checkpoint_every
        if every and st.stage % every == 0 and st.stage < len(tasks):
            ckpt.save_checkpoint(st, ckpt_root / "latest")

    rec = run_stream(tasks, cfg.train, backbone, method=cfg.method, state=state,
                     config_echo=cfg.to_dict(), on_task_end=on_task_end)

    tmp = Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=out))
    try:
        doc = rec.to_json()
        doc["backend"] = BACKEND
        doc["eta_schedule"] = {"q_size": cfg.train.q_size, "eta": cfg.train.eta, "grid": list(EtaSchedule.GRID)}
        _write(tmp / "run.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
        _write(tmp / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        _write(tmp / "rmatrix.csv", _rmatrix_csv(rec.rmatrix.acc))
        _write(tmp / "train_log.csv", _train_log_csv(rec.logs))
        curve = rec.metrics["curve"]
        _write(tmp / "curve.csv", _csv_text(["stage", "mean_accuracy"], [[i + 1, _fmt(a)] for i, a in enumerate(curve)]))
        _write(tmp / "heatmap.csv", _csv_text(["task", "row", "importance"], _heatmap_rows(rec.summaries)))
        timing = {"wall_time_s": rec.wall_time_s,
                  "mean_step_ms": [s.get("mean_step_ms") for s in rec.summaries]}
        _write(tmp / "timing.json", json.dumps(timing, indent=2) + "\n")
        (tmp / "checkpoints").mkdir()
        ckpt.save_checkpoint(rec.state, tmp / "checkpoints" / "final")
        _publish(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    shutil.rmtree(ckpt_root, ignore_errors=True)
    return final


# --- sweep ---------------------------------------------------------------------------


def _parse_values(axis: str, text: str) -> list:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise InvalidConfigError("--values is empty")
    try:
        if axis == "eta":
            return [float(p) for p in parts]
        if axis == "qsize":
            return [int(p) for p in parts]
    except ValueError as exc:
        raise InvalidConfigError(f"bad value for axis {axis}: {exc}") from exc
    return parts


def execute_sweep(cfg: ExperimentConfig, axis: str, values: list, out: Path) -> Path:
    base = out / f"sweep-{axis}-{cfg.content_tag()}"
    base.mkdir(parents=True, exist_ok=True)
    rows, scores = [], []
    for v in values:
        vcfg = cfg.with_value(axis, v)
        vcfg.validate()
        run = execute_run(vcfg, base)
        doc = json.loads((run / "run.json").read_text())
        m = doc["metrics"]
        steps = [s["mean_step_ms"] for s in doc["tasks"]]
        rows.append([v, _fmt(m["ACC"]), _fmt(m["FWT"]), _fmt(m["BWT"]), f"{float(np.mean(steps)):.3f}", run.name])
        scores.append(m["ACC"])
    best = int(np.argmax(scores))
    _write(base / "summary.csv", _csv_text(["value", "ACC", "FWT", "BWT", "mean_step_ms", "run"], rows))
    _write(base / "summary.json", json.dumps({"axis": axis, "values": values, "ACC": scores,
                                               "argmax": values[best]}, indent=2) + "\n")
    print(f"best {axis} = {values[best]} (ACC {scores[best]:.4f})")
    return base


# --- report --------------------------------------------------------------------------


def _collect_runs(dirs: list[Path]) -> list[Path]:
    runs = []
    for d in dirs:
        if (d / "report.json").exists():
            raise UsageError(f"{d} is a report directory, not a run")
        if (d / "summary.csv").exists() and not (d / "run.json").exists():
            runs.extend(sorted(p for p in d.iterdir() if (p / "run.json").exists()))
            continue
        if not (d / "run.json").exists():
            raise UsageError(f"{d} has no run.json")
        runs.append(d)
    return runs


def _mean_std(xs):
    xs = [x for x in xs if x is not None]
    if not xs:
        return None, None
    return float(np.mean(xs)), float(np.std(xs))


def execute_report(dirs: list[Path], out: Path) -> Path:
    runs = _collect_runs(dirs)
    groups: dict = {}
    for run in runs:
        doc = json.loads((run / "run.json").read_text())
        key = from_dict(doc["config"]).group_key()
        groups.setdefault((doc["method"], key), []).append((run, doc))
    table, curve_rows, heat_rows = [], [], []
    for (method, key), members in sorted(groups.items()):
        stats = {}
        for name in ("ACC", "FWT", "BWT"):
            stats[name] = _mean_std([d["metrics"][name] for _, d in members])
        table.append([method, key, len(members)] + [_fmt(v) for n in ("ACC", "FWT", "BWT") for v in stats[n]])
        curves = [d["metrics"]["curve"] for _, d in members]
        n = min(len(c) for c in curves)
        for i in range(n):
            vals = [c[i] for c in curves]
            curve_rows.append([method, key, i + 1, _fmt(float(np.mean(vals))), _fmt(float(np.std(vals)))])
        for run, d in members:
            for r in _heatmap_rows(d["tasks"]):
                heat_rows.append([method, key, run.name] + r)
        acc_m, acc_s = stats["ACC"]
        print(f"{method:22s} {key}  n={len(members)}  ACC {100 * acc_m:.1f} +/- {100 * acc_s:.1f}")
    out.mkdir(parents=True, exist_ok=True)
    header = ["method", "group", "n_runs", "ACC_mean", "ACC_std", "FWT_mean", "FWT_std", "BWT_mean", "BWT_std"]
    _write(out / "report.csv", _csv_text(header, table))
    _write(out / "curve.csv", _csv_text(["method", "group", "stage", "mean_accuracy", "std"], curve_rows))
    _write(out / "heatmap.csv", _csv_text(["method", "group", "run", "task", "row", "importance"], heat_rows))
    _write(out / "report.json", json.dumps({"runs": [str(r) for r in runs]}, indent=2) + "\n")
    return out


# --- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _ArgParser(prog="qtuning", description="Continual prompt tuning with a bounded prompt queue.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_ArgParser)

    r = sub.add_parser("run", help="train one stream")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    r.add_argument("--out", type=Path, default=None)
    r.add_argument("--resume", action="store_true", help="continue from the last periodic checkpoint")

    s = sub.add_parser("sweep", help="vary one training knob")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--axis", required=True, choices=AXES)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", type=Path, default=None)

    rp = sub.add_parser("report", help="aggregate finished runs")
    rp.add_argument("dirs", nargs="+", type=Path)
    rp.add_argument("--out", type=Path, default=Path("report"))
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
        cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            path = execute_report(args.dirs, args.out)
        else:
            cfg = _load(args)
            out = args.out or Path(cfg.output_dir)
            if args.command == "run":
                path = execute_run(cfg, out, resume=args.resume)
            else:
                path = execute_sweep(cfg, args.axis, _parse_values(args.axis, args.values), out)
    except (ConfigParseError, InvalidConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if args.command != "report" else 1
    except (QTuningError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
