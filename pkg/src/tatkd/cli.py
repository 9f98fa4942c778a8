"""``tatkd`` command line.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import train as tr
from .audit import run_audit
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config, serialize_config
from .data import write_idx
from .hier import AnchorConfig, HierarchyConfigError, PatchGroupConfig, anchor_point_loss, patch_group_loss
from .losses import export_correlation, tat_forward, tat_loss
from .tensor import Tensor, no_grad

log = logging.getLogger("tatkd")

COMMANDS = ("gen-data", "train-teacher", "distill", "eval", "gradcheck", "dump-tat-map", "sweep", "cost")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, out_default: str | None = "runs") -> None:
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    if out_default is not None:
        p.add_argument("--out", metavar="DIR", default=out_default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tatkd", description="Target-aware transformer distillation at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic train/test split as IDX files")
    _common(p)

    p = sub.add_parser("train-teacher", help="train the teacher preset with cross-entropy")
    _common(p)

    p = sub.add_parser("distill", help="distil a student from a teacher checkpoint")
    _common(p)
    p.add_argument("--teacher", metavar="PATH", help="teacher checkpoint (default: config, then OUT/teacher.ckpt)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured test split")
    _common(p, out_default=None)
    p.add_argument("--checkpoint", metavar="PATH", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference audit of every distillation loss")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("dump-tat-map", help="export one sample's TaT correlation as CSV and PGM")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="student checkpoint")
    p.add_argument("--teacher", metavar="PATH", required=True)
    p.add_argument("--sample", type=int, default=0, help="index into the test split")

    p = sub.add_parser("sweep", help="run distill once per axis value and seed")
    _common(p)
    p.add_argument("--axis", required=True, help="config key, or comma-joined keys")
    p.add_argument("--values", nargs="+", required=True, help="values; use ':' to join values of a multi-key axis")
    p.add_argument("--seeds", default="0..0", metavar="N..M", help="inclusive student seed range")
    p.add_argument("--teacher", metavar="PATH")

    p = sub.add_parser("cost", help="full vs. hierarchical TaT cost on one feature map")
    _common(p, out_default=None)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--repeats", type=int, default=0, help="also time this many loss evaluations")
    return parser


# ---------------------------------------------------------------------------
# helpers


def load_config(args) -> RunConfig:
    text = Path(args.config).read_text() if getattr(args, "config", None) else ""
    overrides = list(getattr(args, "overrides", []) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return parse_config(text, overrides)


def parse_seed_range(text: str) -> list[int]:
    lo, sep, hi = text.partition("..")
    try:
        a = int(lo)
        b = int(hi) if sep else a
    except ValueError:
        raise UsageError(f"--seeds expects N..M, got {text!r}") from None
    if b < a:
        raise UsageError(f"--seeds range {text!r} is empty")
    return list(range(a, b + 1))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, cfg: RunConfig, name: str = "config.cfg") -> None:
    (out / name).write_text(serialize_config(cfg))


def _teacher_path(args, cfg: RunConfig, out: Path) -> Path:
    if getattr(args, "teacher", None):
        return Path(args.teacher)
    if cfg.teacher_checkpoint:
        return Path(cfg.teacher_checkpoint)
    return out / "teacher.ckpt"


def _ensure_teacher(cfg: RunConfig, path: Path, train_set, test_set):
    """Load the teacher at ``path``, training and saving it first if missing."""
    if path.exists():
        return load_checkpoint(path)
    log.info("no teacher at %s, training one", path)
    ckpt, metrics = tr.train_teacher(cfg, train_set, test=test_set)
    save_checkpoint(ckpt, path)
    metrics.write_csv(path.with_suffix(".csv"), cfg.log_wall_time)
    return ckpt


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    if cfg.data != "shapes":
        raise ConfigError("data", "gen-data only generates the synthetic shapes set")
    out = _out(args)
    train, test = tr.load_datasets(cfg)
    write_idx(train, out / "train-images.idx", out / "train-labels.idx")
    write_idx(test, out / "test-images.idx", out / "test-labels.idx")
    _write_config(out, cfg)
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = load_config(args)
    out = _out(args)
    train, test = tr.load_datasets(cfg)
    ckpt, metrics = tr.train_teacher(cfg, train, test=test)
    save_checkpoint(ckpt, out / "teacher.ckpt")
    metrics.write_csv(out / "teacher_metrics.csv", cfg.log_wall_time)
    _write_config(out, cfg)
    print(f"teacher {metrics.task} metric {metrics.final_metric:.4f}")
    return 0


def cmd_distill(args) -> int:
    cfg = load_config(args)
    out = _out(args)
    train, test = tr.load_datasets(cfg)
    teacher = _ensure_teacher(cfg, _teacher_path(args, cfg, out), train, test)
    ckpt, metrics = tr.distill_student(cfg, teacher, train, test=test)
    save_checkpoint(ckpt, out / "student.ckpt")
    metrics.write_csv(out / "metrics.csv", cfg.log_wall_time)
    _write_config(out, cfg)
    print(f"student ({cfg.distill}) {metrics.task} metric {metrics.final_metric:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    _, test = tr.load_datasets(cfg)
    metrics = tr.evaluate(ckpt, test)
    name = "accuracy" if metrics.task == "classification" else "mean_iou"
    print(json.dumps({"checkpoint": str(args.checkpoint), "epoch": ckpt.epoch, name: metrics.final_metric}))
    return 0


def cmd_gradcheck(args) -> int:
    results = run_audit(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<32} max_rel_err={r.max_rel_error:.3e}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} losses pass")
    return 1 if failed else 0


def cmd_dump_tat_map(args) -> int:
    cfg = load_config(args)
    out = _out(args)
    student_ckpt = load_checkpoint(args.checkpoint)
    student, scfg = tr.model_from_checkpoint(student_ckpt, "student")
    teacher, _ = tr.model_from_checkpoint(args.teacher, "teacher")
    heads = tr.heads_from_checkpoint(student_ckpt)
    if heads.proj is None:
        raise ConfigError("distill", "checkpoint has no TaT projectors (was it trained with distill=tat?)")
    _, test = tr.load_datasets(cfg)
    if not 0 <= args.sample < len(test):
        raise UsageError(f"--sample must lie in [0, {len(test)})")
    x = Tensor(test.images[args.sample : args.sample + 1])
    with no_grad():
        t_feat, _ = teacher(x)
        s_feat, _ = student(x)
        res = tat_forward(s_feat, t_feat, heads.proj, scfg.fm_reduction)
    corr = res.correlation.matrix.data[0]
    export_correlation(corr, out / "tat_map.csv", out / "tat_map.pgm")
    print(f"sample {args.sample}: {corr.shape[0]}x{corr.shape[1]} map, loss {float(res.loss.data):.6f}")
    return 0


# sweep ---------------------------------------------------------------------

# Keys that do not change the teacher; sweeping anything else retrains it.
_STUDENT_ONLY = {
    "seed", "student_preset", "distill", "alpha", "beta", "epsilon", "tau", "kl_tau_square_correction",
    "fm_reduction", "theta_mode", "gamma_mode", "phi_mode", "patch_h", "patch_w", "groups",
    "pg_theta_mode", "pool_k", "delta", "zeta", "epochs", "eval_every", "log_wall_time",
}

SWEEP_COLUMNS = ("value", "seed", "metric", "loss_task", "loss_kl", "loss_tat", "loss_pg", "loss_ap", "loss_total")


def _axis_overrides(keys: list[str], value: str) -> list[str]:
    parts = value.split(":") if len(keys) > 1 else [value]
    if len(parts) != len(keys):
        raise UsageError(f"value {value!r} needs {len(keys)} ':'-joined parts for axis {','.join(keys)}")
    return [f"{k}={v}" for k, v in zip(keys, parts)]


def _safe(value: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-." else "_" for ch in value)


def cmd_sweep(args) -> int:
    base = load_config(args)
    keys = [k.strip() for k in args.axis.split(",") if k.strip()]
    for k in keys:
        if k not in RunConfig.__dataclass_fields__:
            raise ConfigError(k, "unknown sweep axis")
    seeds = parse_seed_range(args.seeds)
    text = Path(args.config).read_text() if args.config else ""
    point_cfgs = []
    for value in args.values:
        # base overrides first, axis after; each point is revalidated
        cfg = parse_config(text, list(args.overrides) + _axis_overrides(keys, value))
        point_cfgs.append((value, cfg))

    out = _out(args)
    retrain = any(k not in _STUDENT_ONLY for k in keys)
    rows = []
    for value, cfg in point_cfgs:
        run_dir = out / _safe(value)
        run_dir.mkdir(exist_ok=True)
        train, test = tr.load_datasets(cfg)
        if args.teacher and not retrain:
            teacher = load_checkpoint(args.teacher)
        else:
            t_path = (run_dir if retrain else out) / "teacher.ckpt"
            teacher = _ensure_teacher(cfg.replace(seed=base.seed), t_path, train, test)
        for seed in seeds:
            ckpt, metrics = tr.distill_student(cfg, teacher, train, seed=seed, test=test)
            metrics.write_csv(run_dir / f"metrics_seed{seed}.csv", cfg.log_wall_time)
            last = metrics.records[-1]
            rows.append(
                {
                    "value": value,
                    "seed": str(seed),
                    "metric": metrics.final_metric,
                    **{c: getattr(last, c) for c in SWEEP_COLUMNS[3:]},
                }
            )
            print(f"{args.axis}={value} seed={seed} metric={metrics.final_metric:.4f}", flush=True)

    report = _sweep_report(rows, [v for v, _ in point_cfgs])
    (out / "sweep.csv").write_text(report)
    sys.stdout.write(report)
    return 0


def _sweep_report(rows: list[dict], order: list[str]) -> str:
    rank = {v: i for i, v in enumerate(order)}
    rows = sorted(rows, key=lambda r: (rank[r["value"]], int(r["seed"])))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r["value"], r["seed"]] + [f"{r[c]:.9g}" for c in SWEEP_COLUMNS[2:]])
    for v in order:
        group = [r for r in rows if r["value"] == v]
        w.writerow([v, "mean"] + [f"{np.mean([r[c] for r in group]):.9g}" for c in SWEEP_COLUMNS[2:]])
    return buf.getvalue()


# cost ----------------------------------------------------------------------


def measure_loss_time(H: int, W: int, C: int, pg: PatchGroupConfig, anchor: AnchorConfig, repeats: int, seed: int = 0):
    """Wall seconds for ``repeats`` evaluations of the full and the hierarchical loss."""
    rng = np.random.default_rng(seed)
    s = Tensor(rng.normal(size=(1, H, W, C)).astype(np.float32))
    t = Tensor(rng.normal(size=(1, H, W, C)).astype(np.float32))
    with no_grad():
        t0 = time.perf_counter()
        for _ in range(repeats):
            tat_loss(s, t)
        full = time.perf_counter() - t0
        t0 = time.perf_counter()
        for _ in range(repeats):
            patch_group_loss(s, t, pg)
            anchor_point_loss(s, t, anchor)
        hier = time.perf_counter() - t0
    return full, hier


def cmd_cost(args) -> int:
    from .hier import tat_cost_estimate

    cfg = load_config(args)
    H, W, C = args.height, args.width, args.channels
    pg = PatchGroupConfig(cfg.patch_h, cfg.patch_w, cfg.groups, "identity")
    anchor = AnchorConfig(cfg.pool_k)
    full = tat_cost_estimate(H, W, C)
    hier = tat_cost_estimate(H, W, C, pg, anchor)
    print(f"map {H}x{W}x{C}, patches {pg.patch_h}x{pg.patch_w} groups {pg.groups}, pool_k {anchor.pool_k}")
    print(f"full_flops={full} hierarchical_flops={hier} ratio={full / hier:.2f}")
    if args.repeats > 0:
        tf, th = measure_loss_time(H, W, C, pg, anchor, args.repeats)
        print(f"full_seconds={tf:.4f} hierarchical_seconds={th:.4f} ratio={tf / th:.2f}")
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "dump-tat-map": cmd_dump_tat_map,
    "sweep": cmd_sweep,
    "cost": cmd_cost,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "tatkd: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"tatkd {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, HierarchyConfigError) as exc:
        print(f"tatkd {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure; the message is the contract
        print(f"tatkd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
