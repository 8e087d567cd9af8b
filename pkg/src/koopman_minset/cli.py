"""Command-line front end.

Exit codes: 0 success, 1 thresholds unmet, 2 configuration or usage error,
3 numerical divergence. Every command takes an optional JSON config file;
flags given on the command line override its values. Wall-clock timestamps
are written only inside a ``metadata`` field.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import SYSTEM_NAMES, describe_system, get_system
from .errors import ConfigError, DivergenceError
from .linear_analysis import analytic_charts, write_levelset_csv
from .unitnet import (
    TrainedUnitManifolds,
    TrainingConfig,
    flowbox_from_unit_manifolds,
    load_checkpoint,
    save_checkpoint,
    train,
    write_curve_csv,
)
from .validation import GridSpec, residual_field, validate_chart, write_residual_csv

EXIT_OK, EXIT_UNMET, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
ANALYZE_TOL = 1e-6

_TRAIN_KEYS = tuple(f.name for f in fields(TrainingConfig) if f.name != "patch")


@dataclass
class RunConfig:
    system: str = "linear_real"
    outdir: str = "out"
    patch: tuple = ((4.0, 6.0), (1.0, 3.0))
    resolution: int = 50
    held_out: Optional[tuple] = None
    checkpoint: Optional[str] = None
    chart: str = "flowbox"
    var_thresholds: tuple = (1e-3, 1e-4)
    independence_points: int = 100
    batch_size: int = 256
    epochs: int = 5000
    learning_rate: float = 1e-3
    orth_weight: float = 0.1
    fd_step: float = 1e-4
    seed: int = 0
    hidden: tuple = (64, 64)
    eval_size: int = 4096
    lr_final: Optional[float] = None

    @classmethod
    def from_mapping(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.patch = _pairs(cfg.patch, "patch")
        if cfg.held_out is not None:
            cfg.held_out = _pairs(cfg.held_out, "held_out")
        if int(cfg.resolution) < 2:
            raise ConfigError("resolution must be at least 2")
        return cfg

    def training(self):
        return TrainingConfig(patch=self.patch, **{k: getattr(self, k) for k in _TRAIN_KEYS})

    def to_dict(self):
        d = asdict(self)
        for k in ("patch", "held_out"):
            if d[k] is not None:
                d[k] = [list(a) for a in d[k]]
        d["var_thresholds"] = list(d["var_thresholds"])
        d["hidden"] = list(d["hidden"])
        return d


def _pairs(values, name):
    """Accept ``[[lo, hi], ...]`` or a flat ``[lo, hi, lo, hi, ...]``."""
    try:
        arr = np.asarray(values, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} is not numeric: {values!r}") from exc
    if arr.ndim == 1 and arr.size % 2 == 0:
        arr = arr.reshape(-1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] == 0 or np.any(arr[:, 0] >= arr[:, 1]):
        raise ConfigError(f"{name} must be lo < hi pairs, got {values!r}")
    return tuple((float(a), float(b)) for a, b in arr)


def load_run_config(path, overrides):
    data = {}
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.from_mapping(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _metadata():
    return {"created": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "argv": sys.argv[1:]}


def _write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _outdir(cfg):
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_list_systems(cfg=None, out=None):
    out = out or sys.stdout
    for name in SYSTEM_NAMES:
        print(describe_system(name), file=out)
    return EXIT_OK


def cmd_analyze(cfg):
    field = get_system(cfg.system)
    charts = analytic_charts(cfg.system)
    grid = GridSpec(cfg.patch, cfg.resolution)
    out = _outdir(cfg)
    pts = grid.points()
    for kind, chart in charts.items():
        write_levelset_csv(out / f"{kind}.csv", chart, field, pts)
    stats, worst = {}, 0.0
    for kind in ("canonical", "flowbox"):
        rf = residual_field(charts[kind], field, grid)
        stats[kind] = {"coordinates": list(rf.stats), "max_abs": rf.max_abs, "guarded_points": len(rf.points)}
        worst = max(worst, rf.max_abs)
        write_residual_csv(out / f"{kind}_residuals.csv", rf)
    passed = worst <= ANALYZE_TOL
    _write_json(
        out / "residuals.json",
        {
            "system": cfg.system,
            "grid": grid.to_dict(),
            "charts": stats,
            "max_abs": worst,
            "tolerance": ANALYZE_TOL,
            "passed": passed,
            "metadata": _metadata(),
        },
    )
    print(f"{cfg.system}: max flowbox/canonical residual {worst:.3e} ({'ok' if passed else 'above tolerance'})")
    return EXIT_OK if passed else EXIT_UNMET


def _report(chart, field, box, cfg, seed):
    grid = GridSpec(box, cfg.resolution)
    rng = np.random.default_rng(seed)
    lo, hi = np.array(box).T
    probe = rng.uniform(lo, hi, size=(cfg.independence_points, len(box)))
    try:
        analytic = analytic_charts(field)["flowbox"]
    except KeyError:
        analytic = None
    return validate_chart(chart, field, grid, analytic=analytic, independence_points=probe)


def _thresholds(cfg):
    return {i: float(t) for i, t in enumerate(cfg.var_thresholds)}


def cmd_train(cfg):
    field = get_system(cfg.system)
    tcfg = cfg.training()
    out = _outdir(cfg)
    started = time.perf_counter()
    trained = train(field, tcfg)
    elapsed = time.perf_counter() - started
    chart = flowbox_from_unit_manifolds(trained)
    reports = {"train": _report(chart, field, tcfg.patch, cfg, tcfg.seed + 1)}
    if cfg.held_out is not None:
        reports["held_out"] = _report(chart, field, cfg.held_out, cfg, tcfg.seed + 2)
    metrics = {
        "final_loss": trained.final_loss.to_dict(),
        "unit_sum": trained.final_loss.unit_sum,
        "reports": {k: r.to_dict() for k, r in reports.items()},
    }
    meta = _metadata()
    meta["train_seconds"] = elapsed
    save_checkpoint(out / "checkpoint.json", trained, metrics={"unit_sum": trained.final_loss.unit_sum}, metadata=meta)
    write_curve_csv(out / "curve.csv", trained)
    _write_json(
        out / "train_report.json",
        {
            "system": cfg.system,
            "config": cfg.to_dict(),
            "foliation_warnings": [w.to_dict() for w in trained.warnings],
            **metrics,
            "metadata": meta,
        },
    )
    for w in trained.warnings:
        print(f"warning: {w.message}", file=sys.stderr)
    print(f"trained {cfg.system}: final unit sum {trained.final_loss.unit_sum:.3e}")
    return EXIT_OK


def _checkpoint_chart(cfg):
    if not cfg.checkpoint:
        raise ConfigError("a checkpoint path is required")
    model, tcfg, data = load_checkpoint(cfg.checkpoint)
    trained = TrainedUnitManifolds(model, tcfg, None, np.empty(0), np.empty((0, 0)), (), data.get("system", ""))
    return model, trained


def cmd_validate(cfg):
    field = get_system(cfg.system)
    model, trained = _checkpoint_chart(cfg)
    if model.layer_sizes[0] != field.dim or model.layer_sizes[-1] != field.dim:
        raise ConfigError(f"checkpoint has dimension {model.layer_sizes[0]}, {cfg.system} has {field.dim}")
    box = cfg.held_out or cfg.patch
    if len(box) != field.dim:
        raise ConfigError(f"patch has {len(box)} axes, {cfg.system} has dimension {field.dim}")
    chart = flowbox_from_unit_manifolds(trained)
    report = _report(chart, field, box, cfg, cfg.seed)
    met = report.meets(_thresholds(cfg))
    out = _outdir(cfg)
    payload = report.to_dict()
    payload["thresholds"] = list(cfg.var_thresholds)
    payload["passed"] = met
    payload["metadata"] = {**payload["metadata"], **_metadata()}
    _write_json(out / "validation_report.json", payload)
    rf = residual_field(chart, field, GridSpec(box, cfg.resolution))
    write_residual_csv(out / "validation_residuals.csv", rf)
    for w in report.foliation_warnings:
        print(f"warning: {w.message}", file=sys.stderr)
    v = ", ".join(f"{x:.3e}" for x in report.variances())
    print(f"variances ({v}) {'within' if met else 'above'} thresholds")
    return EXIT_OK if met else EXIT_UNMET


def cmd_export_levelsets(cfg):
    field = get_system(cfg.system)
    if cfg.checkpoint:
        _, trained = _checkpoint_chart(cfg)
        chart = flowbox_from_unit_manifolds(trained)
        name = "learned_flowbox"
    else:
        charts = analytic_charts(cfg.system)
        if cfg.chart not in charts:
            raise ConfigError(f"chart must be one of {', '.join(charts)}")
        chart, name = charts[cfg.chart], cfg.chart
    grid = GridSpec(cfg.patch, cfg.resolution)
    out = _outdir(cfg)
    write_levelset_csv(out / f"levelsets_{name}.csv", chart, field, grid.points())
    print(out / f"levelsets_{name}.csv")
    return EXIT_OK


COMMANDS = {
    "list-systems": cmd_list_systems,
    "analyze": cmd_analyze,
    "train": cmd_train,
    "validate": cmd_validate,
    "export-levelsets": cmd_export_levelsets,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="koopman-minset", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "list-systems":
            continue
        p.add_argument("--config", help="JSON run config; flags override its values")
        p.add_argument("--system")
        p.add_argument("--outdir")
        p.add_argument("--patch", type=float, nargs="+", metavar="V", help="lo1 hi1 lo2 hi2 ...")
        p.add_argument("--resolution", type=int)
        p.add_argument("--seed", type=int)
        if name in ("train", "validate"):
            p.add_argument("--held-out", dest="held_out", type=float, nargs="+", metavar="V")
            p.add_argument("--var-thresholds", dest="var_thresholds", type=float, nargs="+")
            p.add_argument("--independence-points", dest="independence_points", type=int)
        if name == "train":
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", dest="batch_size", type=int)
            p.add_argument("--learning-rate", dest="learning_rate", type=float)
            p.add_argument("--orth-weight", dest="orth_weight", type=float)
            p.add_argument("--fd-step", dest="fd_step", type=float)
            p.add_argument("--hidden", type=int, nargs="+")
            p.add_argument("--eval-size", dest="eval_size", type=int)
            p.add_argument("--lr-final", dest="lr_final", type=float)
        if name in ("validate", "export-levelsets"):
            p.add_argument("--checkpoint")
        if name == "export-levelsets":
            p.add_argument("--chart", choices=("split", "canonical", "flowbox"))
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    command = COMMANDS[args.command]
    if args.command == "list-systems":
        return command()
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = load_run_config(args.config, overrides)
        return command(cfg)
    except DivergenceError as exc:
        print(f"error: divergence at epoch {exc.where}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, KeyError) as exc:  # every package error other than divergence is a ValueError
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
