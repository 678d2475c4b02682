"""Command-line harness: ``atsc pretrain | train | sweep | report``.

Exit codes: 0 success, 2 invalid configuration or input, 3 training
diverged (the last-good checkpoint is kept in the run directory).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import warnings
from collections import defaultdict
from pathlib import Path
from typing import Optional

import numpy as np

from .config import SWEEPABLE, PretrainConfig, RunConfig, SweepSpec, load_json
from .errors import ATSCError, ConfigurationError, DivergenceError
from .metrics import read_metrics
from .trainer import pretrain_teacher, train

log = logging.getLogger("atsc")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3

SWEEP_COLUMNS = (
    "param", "value", "runs", "diverged", "top1_mean", "top1_std",
    "teacher_top1_mean", "drift_mean", "status",
)
REPORT_COLUMNS = (
    "scenario", "mode", "runs", "diverged", "top1_mean", "top1_std", "teacher_top1_mean",
    "drift_mean", "student_path_params", "increase_percent",
)


def mean_std(values) -> tuple:
    """Mean and sample standard deviation; a single value has std 0."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return None, None
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def _fmt(v, digits=2) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.{digits}f}" if abs(v) >= 10 ** -digits or v == 0 else f"{v:.3g}"
    return str(v)


def _overrides(d: dict, args) -> dict:
    d = dict(d)
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "deterministic", None) is not None:
        d["deterministic"] = args.deterministic
    if getattr(args, "out", None):
        d["out_dir"] = args.out
    return d


def _parse(factory, d):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cfg = factory(d)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return cfg


def _require_out(cfg) -> Path:
    if not cfg.out_dir:
        raise ConfigurationError("out_dir: required (set it in the config or pass --out)")
    return Path(cfg.out_dir)


# --------------------------------------------------------------------------- #
# verbs
# --------------------------------------------------------------------------- #


def cmd_pretrain(args) -> int:
    cfg = _parse(PretrainConfig.from_dict, _overrides(load_json(args.config), args))
    out = _require_out(cfg)
    manifest, _, _ = pretrain_teacher(cfg, out_dir=out)
    print(f"teacher test top-1 {manifest['test_top1']:.2f}% -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _parse(RunConfig.from_dict, _overrides(load_json(args.config), args))
    out = _require_out(cfg)
    try:
        rec = train(cfg, out_dir=out)
    except DivergenceError as err:
        print(f"error: {err}; last good checkpoint kept in {out / 'last_good'}", file=sys.stderr)
        return EXIT_DIVERGED
    line = f"{cfg.mode.value} student top-1 {rec.student_top1:.2f}%"
    if rec.teacher_top1_after is not None:
        line += f", teacher {rec.teacher_top1_before:.2f}% -> {rec.teacher_top1_after:.2f}%"
    inc = rec.params.get("increase_percent")
    if inc is not None:
        line += f", increase {inc:.2f}%"
    print(line)
    print(f"wrote {out}")
    return 0


def run_sweep(spec: SweepSpec, out_dir) -> list:
    """Train every (value, seed) cell; divergent cells are recorded and
    skipped. Writes ``sweep.csv`` and ``sweep.png`` and returns the rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = spec.base.to_dict()
    rows = []
    for value in spec.values:
        top1, teacher, drift, diverged = [], [], [], 0
        for seed in spec.seeds:
            d = copy.deepcopy(base)
            d[spec.param] = value
            d["seed"] = seed
            cell = out_dir / f"{spec.param}={value}" / f"seed{seed}"
            d["out_dir"] = str(cell)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                cfg = RunConfig.from_dict(d)
            try:
                rec = train(cfg, out_dir=cell)
            except DivergenceError as err:
                log.warning("%s=%s seed %d: %s", spec.param, value, seed, err)
                diverged += 1
                continue
            top1.append(rec.student_top1)
            if rec.teacher_top1_after is not None:
                teacher.append(rec.teacher_top1_after)
            if rec.drift and rec.drift[-1] is not None:
                drift.append(rec.drift[-1])
        ok = diverged == 0
        m, s = mean_std(top1) if ok else (None, None)
        rows.append({
            "param": spec.param,
            "value": value,
            "runs": len(spec.seeds),
            "diverged": diverged,
            "top1_mean": m,
            "top1_std": s,
            "teacher_top1_mean": mean_std(teacher)[0] if ok else None,
            "drift_mean": mean_std(drift)[0] if ok else None,
            "status": "ok" if ok else "diverged",
        })
    write_table(out_dir / "sweep.csv", SWEEP_COLUMNS, rows)
    plot_sweep(out_dir / "sweep.png", rows, spec.param)
    return rows


def plot_sweep(path, rows, param) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    done = [r for r in rows if r["status"] == "ok"]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    if done:
        x = [float(r["value"]) for r in done]
        ax1.errorbar(x, [r["top1_mean"] for r in done], yerr=[r["top1_std"] for r in done], marker="o", capsize=3)
        drift = [(xi, r["drift_mean"]) for xi, r in zip(x, done) if r["drift_mean"] is not None]
        if drift:
            ax2.plot(*zip(*drift), marker="s", color="tab:red")
        if param == "alpha" and min(x) > 0:
            ax1.set_xscale("log")
            ax2.set_xscale("log")
    for r in rows:
        if r["status"] != "ok":
            ax1.axvline(float(r["value"]), color="grey", linestyle=":", label=f"diverged ({r['value']})")
    ax1.set_xlabel(param)
    ax1.set_ylabel("student top-1 (%)")
    ax2.set_xlabel(param)
    ax2.set_ylabel("final teacher drift (RMS)")
    if any(r["status"] != "ok" for r in rows):
        ax1.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_sweep(args) -> int:
    d = load_json(args.config)
    if "base" in d:
        d = dict(d, base=_overrides(d["base"], argparse.Namespace(
            seed=None, deterministic=args.deterministic, out=None)))
    spec = _parse(SweepSpec.from_dict, d)
    if args.seed is not None:
        spec.seeds = [args.seed]
    out = args.out or spec.base.out_dir
    if not out:
        raise ConfigurationError("out_dir: required (set base.out_dir or pass --out)")
    rows = run_sweep(spec, out)
    print(render_text(SWEEP_COLUMNS, rows))
    print(f"wrote {Path(out) / 'sweep.csv'} and {Path(out) / 'sweep.png'}")
    return 0


def find_runs(paths) -> list:
    """Run directories (those holding ``summary.json``) under ``paths``."""
    runs = []
    for p in map(Path, paths):
        if not p.exists():
            raise ConfigurationError(f"{p}: no such directory")
        found = sorted({f.parent for f in p.rglob("summary.json")}) if p.is_dir() else []
        if p.is_dir() and (p / "summary.json").exists():
            found = sorted(set(found) | {p})
        if not found:
            raise ConfigurationError(f"{p}: no completed runs (summary.json) found")
        runs.extend(found)
    return runs


def _student_path_params(params: dict) -> Optional[int]:
    c = (params or {}).get("counts", {})
    if "student" not in c:
        return None
    if "projector" in c:
        return c["student"] + c["projector"] + c.get("classifier", 0)
    return c["student"] + c.get("student_head", 0)


def build_report(paths) -> list:
    """One row per (scenario, mode) with mean and std of final student top-1."""
    groups = defaultdict(list)
    for run in find_runs(paths):
        summary = json.loads((run / "summary.json").read_text())
        metrics = run / "metrics.csv"
        if metrics.exists():
            read_metrics(metrics)  # schema check
        groups[(summary["scenario"], summary["mode"])].append(summary)
    scenarios = {k[0] for k in groups}
    if len(scenarios) > 1:
        warnings.warn(f"runs span {len(scenarios)} scenarios; they are reported as separate groups")
    rows = []
    for (scenario, mode), runs in sorted(groups.items()):
        done = [r for r in runs if not r["diverged"]]
        m, s = mean_std([r["student_top1"] for r in done])
        teacher = [r["teacher_top1_after"] for r in done if r["teacher_top1_after"] is not None]
        drift = [r["teacher_drift_rms"][-1] for r in done if r["teacher_drift_rms"] and r["teacher_drift_rms"][-1] is not None]
        params = runs[0]["params"]
        rows.append({
            "scenario": scenario,
            "mode": mode,
            "runs": len(runs),
            "diverged": len(runs) - len(done),
            "top1_mean": m,
            "top1_std": s,
            "teacher_top1_mean": mean_std(teacher)[0],
            "drift_mean": mean_std(drift)[0],
            "student_path_params": _student_path_params(params),
            "increase_percent": (params or {}).get("increase_percent"),
        })
    return rows


def cmd_report(args) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = build_report(args.runs)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    text = render_text(REPORT_COLUMNS, rows)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "report.csv", REPORT_COLUMNS, rows)
        (out / "report.txt").write_text(text + "\n")
        print(f"wrote {out / 'report.csv'} and {out / 'report.txt'}")
    return 0


# --------------------------------------------------------------------------- #
# tables
# --------------------------------------------------------------------------- #


def write_table(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in columns})


def read_table(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def render_text(columns, rows) -> str:
    cells = [list(columns)] + [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# --------------------------------------------------------------------------- #
# entry point
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atsc", description="Teacher-student distillation with a shared classifier.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, metavar="PATH", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides out_dir)")
        p.add_argument(
            "--deterministic", action=argparse.BooleanOptionalAction, default=None,
            help="force deterministic kernels (default: config value, which defaults to on)",
        )
        return p

    common(sub.add_parser("pretrain", help="train a teacher encoder and classifier")).set_defaults(func=cmd_pretrain)
    common(sub.add_parser("train", help="run one distillation or baseline config")).set_defaults(func=cmd_train)
    sw = common(sub.add_parser("sweep", help="grid over alpha or reduction_factor"))
    sw.set_defaults(func=cmd_sweep)
    sw.epilog = f"sweepable parameters: {', '.join(SWEEPABLE)}"
    rp = sub.add_parser("report", help="mean and std of top-1 over run directories")
    rp.add_argument("runs", nargs="+", metavar="RUN_DIR")
    rp.add_argument("--out", metavar="DIR", help="also write report.csv and report.txt here")
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    with warnings.catch_warnings():
        warnings.showwarning = _show_warning
        try:
            return args.func(args)
        except (ConfigurationError, ATSCError) as err:
            print(f"error: {err}", file=sys.stderr)
            return EXIT_CONFIG


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
