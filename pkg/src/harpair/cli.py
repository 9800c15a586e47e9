"""
Command-line driver: dataset caching, LOSO runs, the discriminator
comparison, shift analysis, loss-weight sweeps and plots.
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import config as cfgmod
from .data import load_dataset
from .errors import ConfigError, HarPairError
from .evaluation import DISC_LABELS, FoldResult, aggregate, format_table, run_loso
from .losses import LossWeights
from .segmentation import WindowSet, segment_all
from .shift import ShiftReport, shift_delta

logger = logging.getLogger("harpair")

CACHE_VERSION = 1
RECORDS = "records.jsonl"
TIMINGS = "timings.jsonl"
MODE_LABELS = {"supervised_only": "Step 1 (supervised)", "through_step2": "Steps 1-2", "full": "Steps 1-3"}


# -- window cache ---------------------------------------------------------------

def cache_path(cfg: cfgmod.ExperimentConfig) -> Path:
    return cfg.out_dir / "cache" / f"{cfg.dataset.name.lower()}_windows.npz"


def prepare(cfg: cfgmod.ExperimentConfig) -> WindowSet:
    """Windowed dataset for ``cfg``, from the cache when it matches."""
    path = cache_path(cfg)
    key = cfg.dataset_hash()
    if path.exists():
        try:
            with np.load(path, allow_pickle=False) as z:
                version, cached_key = int(z["version"]), str(z["key"])
                if version == CACHE_VERSION and cached_key == key:
                    logger.info("cache hit: %s", path)
                    return WindowSet(z["x"], z["y"], z["s"])
            logger.info("cache at %s is stale (version %s, key %s != %s); rebuilding",
                        path, version, cached_key, key)
        except Exception as exc:  # noqa: BLE001 - any unreadable cache is rebuilt
            logger.warning("cache at %s is unreadable (%s); rebuilding", path, exc)
    recordings = load_dataset(cfg.dataset, cfg.data_root, cfg.synthetic)
    windows = segment_all(recordings, cfg.dataset)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, version=CACHE_VERSION, key=key, x=windows.x, y=windows.y, s=windows.s)
    tmp.replace(path)
    logger.info("cached %d windows at %s", len(windows), path)
    return windows


# -- records --------------------------------------------------------------------

def read_records(out_dir: Path) -> List[dict]:
    path = Path(out_dir) / RECORDS
    if not path.exists():
        return []
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            logger.warning("%s line %d is not valid JSON; ignored", path, n)
    return records


def _append(path: Path, obj: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(obj, sort_keys=True) + "\n")


def completed(cfg: cfgmod.ExperimentConfig, tag: str = "") -> Dict[tuple, FoldResult]:
    done = {}
    run_hash = cfg.run_hash()
    for rec in read_records(cfg.out_dir):
        if rec.get("config_hash") == run_hash and rec.get("tag", "") == tag:
            res = FoldResult.from_record(rec)
            done[res.key] = res
    return done


def loso_for(cfg: cfgmod.ExperimentConfig, windows: WindowSet, mode: str, discriminator: str,
             tag: str = ""):
    """LOSO with resume: finished (fold, seed) runs are read back, new ones appended."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    run_hash = cfg.run_hash()
    t0 = {"t": time.perf_counter()}

    def on_result(res: FoldResult):
        rec = res.to_record(cfg.dataset.name, run_hash)
        rec["tag"] = tag
        _append(out / RECORDS, rec)
        now = time.perf_counter()
        _append(out / TIMINGS, {"key": list(res.key), "tag": tag, "seconds": now - t0["t"],
                                "per_step": res.history.wall_clock})
        t0["t"] = now

    return run_loso(windows, cfg.dataset.n_classes, cfg.train, cfg.model, mode=mode, seeds=cfg.seeds,
                    discriminator=discriminator, n_val=cfg.n_val, split_seed=cfg.split_seed,
                    workers=cfg.workers, skip=completed(cfg, tag), on_result=on_result,
                    raise_on_error=False, shift_method=cfg.shift_method, deterministic=cfg.deterministic)


def _report_failures(outputs) -> int:
    failures = [f for o in outputs for f in o.failures]
    for key, err in failures:
        print(f"FAILED {key}: {err}", file=sys.stderr)
    return 1 if failures else 0


# -- subcommands ----------------------------------------------------------------

def cmd_prepare(cfg, args) -> int:
    windows = prepare(cfg)
    counts = {int(k): int(v) for k, v in zip(*np.unique(windows.y, return_counts=True))}
    print(f"{cfg.dataset.name}: {len(windows)} windows, shape {windows.x.shape[1:]}, "
          f"subjects {windows.subjects}, per class {counts}")
    return 0


def cmd_loso(cfg, args) -> int:
    windows = prepare(cfg)
    modes = list(cfgmod.MODES) if cfg.mode == "all" else [cfg.mode]
    outputs, tables = [], {}
    for mode in modes:
        o = loso_for(cfg, windows, mode, cfg.discriminator)
        outputs.append(o)
        if o.aggregate is not None:
            tables[MODE_LABELS[mode]] = o.aggregate
            (cfg.out_dir / f"aggregate_{mode}.json").write_text(json.dumps(o.aggregate.to_dict(), indent=2))
    text = format_table(tables, f"{cfg.dataset.name} LOSO", "Training")
    (cfg.out_dir / "table_loso.txt").write_text(text + "\n")
    print(text)
    return _report_failures(outputs)


def cmd_disc_compare(cfg, args) -> int:
    windows = prepare(cfg)
    outputs, rows = {}, {}
    for variant in ("subject_id", "pair_random", "ours"):
        outputs[variant] = loso_for(cfg, windows, "full", variant)
        if outputs[variant].aggregate is not None:
            rows[DISC_LABELS[variant]] = outputs[variant].aggregate
    hashes = {r.arch_hash for o in outputs.values() for r in o.results}
    if len(hashes) > 1:
        raise HarPairError(f"discriminator variants used different F/R/C architectures: {hashes}")
    text = format_table(rows, f"{cfg.dataset.name} discriminator comparison", "Discriminator")
    report = {"encoder_hash": hashes.pop() if hashes else None,
              "rows": {k: v.to_dict() for k, v in rows.items()},
              "records": {v: [r.to_record(cfg.dataset.name, cfg.run_hash()) for r in o.results]
                          for v, o in outputs.items()}}
    (cfg.out_dir / "disc_compare.json").write_text(json.dumps(report, indent=2))
    (cfg.out_dir / "table_disc_compare.txt").write_text(text + "\n")
    print(text)
    return _report_failures(outputs.values())


def shift_report(results: List[FoldResult], activity_names=None, stage_suffix: str = "") -> ShiftReport:
    """Average shift over seeds per fold, then across folds."""
    by_fold: Dict[int, List[FoldResult]] = {}
    for r in results:
        if r.shift:
            by_fold.setdefault(r.fold.test_subject, []).append(r)
    if not by_fold:
        raise HarPairError("no full-mode results with shift measurements")

    def fold_mean(runs, stage):
        stage = stage + stage_suffix
        pa = {}
        for r in runs:
            for k, v in r.shift[stage]["per_activity"].items():
                pa.setdefault(int(k), []).append(v)
        return {"overall": float(np.mean([r.shift[stage]["overall"] for r in runs])),
                "per_activity": {k: float(np.mean(v)) for k, v in pa.items()}}

    folds = sorted(by_fold)
    s2 = [fold_mean(by_fold[f], "step2") for f in folds]
    s3 = [fold_mean(by_fold[f], "step3") for f in folds]
    return shift_delta(s2, s3, (folds, folds), activity_names)


def cmd_shift(cfg, args) -> int:
    windows = prepare(cfg)
    o = loso_for(cfg, windows, "full", cfg.discriminator)
    names = cfg.dataset.activity_names or {i: str(lbl) for i, lbl in enumerate(cfg.dataset.activity_labels)}
    if not o.results:
        return _report_failures([o]) or 1
    report = shift_report(o.results, names)
    path = cfg.out_dir / f"shift_{cfg.dataset.name.lower()}.json"
    path.write_text(json.dumps(report.to_dict(), indent=2))
    print(f"{cfg.dataset.name}: overall W1 {report.step2_overall:.4g} -> {report.step3_overall:.4g} "
          f"({report.overall_change_pct:+.2f}% reduction)" if report.overall_change_pct is not None
          else f"{cfg.dataset.name}: step-2 distance is zero; no percentage change")
    plot_shift({cfg.dataset.name: report}, cfg.out_dir)
    return _report_failures([o])


def sweep_values(which: str, values) -> List[float]:
    """Sweep values with the default weight added when missing, in ascending order."""
    default = getattr(LossWeights(), which)
    vals = sorted({float(v) for v in values} | {default})
    return vals


def cmd_sweep(cfg, args) -> int:
    if not cfg.sweep:
        raise ConfigError("sweep needs a 'sweep: {which, values}' config section")
    which = cfg.sweep["which"]
    windows = prepare(cfg)
    points, outputs = [], []
    for value in sweep_values(which, cfg.sweep["values"]):
        weights = {**cfg.train.weights.to_dict(), which: value}
        point_cfg = cfgmod.from_dict(cfg.raw, {"train": {"weights": weights}})
        o = loso_for(point_cfg, windows, "full", cfg.discriminator, tag=f"sweep:{which}={value:g}")
        outputs.append(o)
        if o.aggregate is not None:
            points.append({"value": value, **o.aggregate.to_dict()})
    curve = {"which": which, "default": getattr(LossWeights(), which), "points": points}
    (cfg.out_dir / f"sweep_{which}.json").write_text(json.dumps(curve, indent=2))
    for p in points:
        print(f"{which}={p['value']:<8g} acc {p['accuracy_mean']:.4f} ± {p['accuracy_std']:.4f}  "
              f"F1 {p['macro_f1_mean']:.4f} ± {p['macro_f1_std']:.4f}")
    plot_sweep(curve, cfg.out_dir)
    return _report_failures(outputs)


def cmd_plot(cfg, args) -> int:
    out = cfg.out_dir
    reports = {p.stem.split("_", 1)[1].upper(): ShiftReport.from_dict(json.loads(p.read_text()))
               for p in sorted(out.glob("shift_*.json"))}
    made = []
    if reports:
        made += plot_shift(reports, out)
    for p in sorted(out.glob("sweep_*.json")):
        made += plot_sweep(json.loads(p.read_text()), out)
    if not made:
        print(f"nothing to plot in {out}", file=sys.stderr)
        return 1
    for m in made:
        print(m)
    return 0


# -- plots ----------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _bars(ax, labels, values, title):
    values = [np.nan if v is None else v for v in values]
    colors = ["tab:blue" if (v is not None and v >= 0) else "tab:red" for v in values]
    ax.bar(range(len(values)), values, color=colors)
    ax.axhline(0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("W1 reduction, step 2 to 3 (%)")
    ax.set_title(title)


def plot_shift(reports: Dict[str, ShiftReport], out_dir) -> List[Path]:
    """Overall bars per dataset plus per-activity bars for each dataset. Positive = reduction."""
    plt = _pyplot()
    out_dir = Path(out_dir)
    made = []
    fig, ax = plt.subplots(figsize=(4, 3))
    _bars(ax, list(reports), [r.overall_change_pct for r in reports.values()], "Overall")
    fig.tight_layout()
    made.append(out_dir / "shift_overall.png")
    fig.savefig(made[-1])
    plt.close(fig)
    for name, r in reports.items():
        keys = sorted(r.change_pct_per_activity)
        fig, ax = plt.subplots(figsize=(max(4, 0.4 * len(keys) + 1), 3))
        _bars(ax, [r.activity_names.get(k, str(k)) for k in keys],
              [r.change_pct_per_activity[k] for k in keys], name)
        fig.tight_layout()
        made.append(out_dir / f"shift_{name.lower()}_per_activity.png")
        fig.savefig(made[-1])
        plt.close(fig)
    return made


def plot_sweep(curve: dict, out_dir) -> List[Path]:
    plt = _pyplot()
    pts = curve["points"]
    x = [p["value"] for p in pts]
    fig, ax = plt.subplots(figsize=(4, 3))
    for key, label in (("accuracy", "Accuracy"), ("macro_f1", "Macro F1")):
        ax.errorbar(x, [p[f"{key}_mean"] for p in pts], yerr=[p[f"{key}_std"] for p in pts],
                    marker="o", capsize=3, label=label)
    ax.axvline(curve["default"], color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel(curve["which"])
    ax.legend()
    fig.tight_layout()
    path = Path(out_dir) / f"sweep_{curve['which']}.png"
    fig.savefig(path)
    plt.close(fig)
    return [path]


# -- entry point ----------------------------------------------------------------

COMMANDS = {"prepare": cmd_prepare, "loso": cmd_loso, "disc-compare": cmd_disc_compare,
            "shift": cmd_shift, "sweep": cmd_sweep, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harpair", description=__doc__.strip())
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML experiment config")
    parser.add_argument("--dataset", choices=cfgmod.DATASETS, help="override dataset.name")
    parser.add_argument("--mode", choices=list(cfgmod.MODES) + ["all"], help="training mode for loso")
    parser.add_argument("--seeds", help="comma-separated run seeds, e.g. 0,1")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--workers", type=int, help="parallel fold workers")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def overrides_from_args(args) -> dict:
    o = {}
    if args.dataset:
        o["dataset"] = {"name": args.dataset}
    if args.mode and args.mode != "all":
        o["mode"] = args.mode
    if args.seeds:
        try:
            o["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if args.out:
        o["out"] = args.out
    if args.deterministic is not None:
        o["deterministic"] = args.deterministic
    if args.workers is not None:
        o["workers"] = args.workers
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = cfgmod.load_config(args.config, overrides_from_args(args))
        if args.mode == "all":
            cfg.mode = "all"
        cfgmod.write_resolved(cfg, cfg.out_dir)
        return COMMANDS[args.command](cfg, args)
    except HarPairError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
