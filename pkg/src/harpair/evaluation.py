"""
Leave-one-subject-out orchestration, cross-fold aggregation and the
discriminator comparison.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .metrics import Metrics, compute_metrics, evaluate
from .models import DISCRIMINATORS, ModelConfig
from .segmentation import FoldSpec, WindowSet, fit_minmax, loso_splits, prepare_fold
from .shift import embed, shift_from_latents
from .trainer import TrainConfig, TrainHistory, feature_extractor_at, train_fold

logger = logging.getLogger(__name__)

RECORD_SCHEMA_VERSION = 1
STD_CONVENTION = "sample (n-1)"

__all__ = ["Metrics", "compute_metrics", "evaluate", "FoldResult", "AggregateReport", "LosoOutput",
           "run_fold", "run_loso", "aggregate", "compare_discriminators"]


@dataclass
class FoldResult:
    fold: FoldSpec
    seed: int
    mode: str
    discriminator: str
    metrics: Metrics
    history: TrainHistory
    shift: Optional[dict] = None  # {"step2": {...}, "step3": {...}} in full mode
    arch_hash: str = ""
    n_test_windows: int = 0
    pair_stats: dict = field(default_factory=dict)

    @property
    def key(self) -> Tuple[str, str, int, int]:
        return (self.mode, self.discriminator, self.fold.test_subject, self.seed)

    def to_record(self, dataset: str = "", config_hash: str = "") -> dict:
        return {
            "schema_version": RECORD_SCHEMA_VERSION,
            "dataset": dataset,
            "config_hash": config_hash,
            "mode": self.mode,
            "discriminator": self.discriminator,
            "fold": self.fold.to_dict(),
            "seed": self.seed,
            "metrics": self.metrics.to_dict(),
            "n_test_windows": self.n_test_windows,
            "shift": _jsonable_shift(self.shift),
            "arch_hash": self.arch_hash,
            "pair_stats": self.pair_stats,
            "history": self.history.to_dict(include_timing=False),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "FoldResult":
        f = rec["fold"]
        m = rec["metrics"]
        hist = TrainHistory(**{k: v for k, v in rec["history"].items() if k != "wall_clock"})
        shift = rec.get("shift")
        if shift:
            shift = {stage: {"overall": d["overall"],
                             "per_activity": {int(k): v for k, v in d["per_activity"].items()},
                             "skipped": d["skipped"]} for stage, d in shift.items()}
        return cls(FoldSpec(f["test_subject"], f["val_subjects"], f["train_subjects"], f["seed"]),
                   rec["seed"], rec["mode"], rec["discriminator"],
                   Metrics(m["accuracy"], m["macro_f1"], np.asarray(m["confusion"])),
                   hist, shift, rec.get("arch_hash", ""), rec.get("n_test_windows", 0),
                   rec.get("pair_stats", {}))


def _jsonable_shift(shift):
    if not shift:
        return None
    return {stage: {"overall": d["overall"],
                    "per_activity": {str(k): v for k, v in d["per_activity"].items()},
                    "skipped": list(d["skipped"])} for stage, d in shift.items()}


@dataclass
class AggregateReport:
    mode: str
    discriminator: str
    accuracy_mean: float
    accuracy_std: float
    macro_f1_mean: float
    macro_f1_std: float
    n_folds: int
    n_runs: int
    per_fold: Dict[int, dict]
    std_convention: str = STD_CONVENTION

    def to_dict(self):
        return {"mode": self.mode, "discriminator": self.discriminator,
                "accuracy_mean": self.accuracy_mean, "accuracy_std": self.accuracy_std,
                "macro_f1_mean": self.macro_f1_mean, "macro_f1_std": self.macro_f1_std,
                "n_folds": self.n_folds, "n_runs": self.n_runs,
                "per_fold": {str(k): v for k, v in self.per_fold.items()},
                "std_convention": self.std_convention}

    def row(self) -> str:
        return (f"{self.accuracy_mean:.4f} ± {self.accuracy_std:.4f}   "
                f"{self.macro_f1_mean:.4f} ± {self.macro_f1_std:.4f}")


@dataclass
class LosoOutput:
    results: List[FoldResult]
    aggregate: Optional[AggregateReport]
    failures: List[Tuple[tuple, str]] = field(default_factory=list)


def _sample_std(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.std(ddof=1)) if len(values) > 1 else 0.0


def aggregate(results: Sequence[FoldResult]) -> AggregateReport:
    """Mean and sample std across folds of the seed-averaged fold metrics."""
    if not results:
        raise ValueError("no fold results to aggregate")
    by_fold: Dict[int, List[FoldResult]] = {}
    for r in results:
        by_fold.setdefault(r.fold.test_subject, []).append(r)
    per_fold = {}
    for subject, runs in sorted(by_fold.items()):
        per_fold[subject] = {
            "accuracy": float(np.mean([r.metrics.accuracy for r in runs])),
            "macro_f1": float(np.mean([r.metrics.macro_f1 for r in runs])),
            "seeds": sorted(r.seed for r in runs),
        }
    acc = [v["accuracy"] for v in per_fold.values()]
    f1 = [v["macro_f1"] for v in per_fold.values()]
    return AggregateReport(results[0].mode, results[0].discriminator,
                           float(np.mean(acc)), _sample_std(acc), float(np.mean(f1)), _sample_std(f1),
                           len(per_fold), len(results), per_fold)


def run_fold(windows: WindowSet, fold: FoldSpec, n_classes: int, train_config: TrainConfig,
             model_config: ModelConfig, mode: str, seed: int, discriminator: str = "ours",
             shift_method: str = "per_dim", checkpoint_path=None, deterministic: bool = True) -> FoldResult:
    """Train and score one (fold, seed) run."""
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    data = prepare_fold(windows, fold, n_classes)
    # the scaler must be reproducible from the fold's training subjects alone
    refit = fit_minmax(windows.for_subjects(fold.train_subjects))
    assert np.array_equal(refit.min, data.scaler.min) and np.array_equal(refit.max, data.scaler.max)
    training = train_fold(data, train_config, mode, seed, model_config, discriminator)
    if np.any(data.test.s != fold.test_subject):
        raise AssertionError("scored windows from a subject other than the test subject")
    metrics = evaluate(training.bundle, data.test, n_classes, device=train_config.device)
    shift = None
    if mode == "full":
        shift = {}
        for stage in ("step2", "step3"):
            f = feature_extractor_at(training, stage)
            z_train = embed(f, data.train, device=train_config.device)
            z_test = embed(f, data.test, device=train_config.device)
            shift[stage] = shift_from_latents(z_train, data.train.y, z_test, data.test.y, True, shift_method)
            # scale-free companion: F's latent scale changes between steps
            shift[f"{stage}_standardized"] = shift_from_latents(z_train, data.train.y, z_test, data.test.y,
                                                                True, "standardized")
    pair_stats = {}
    if training.pair_set is not None:
        n0, n1 = training.pair_set.class_counts()
        pair_stats = {"n_pairs": len(training.pair_set), "g0": n0, "g1": n1,
                      "cross_activity": int(np.sum(training.pair_set.y_a != training.pair_set.y_b))}
    if checkpoint_path is not None:
        from .models import save_checkpoint
        save_checkpoint(training.bundle, checkpoint_path,
                        extra={"fold": fold.to_dict(), "seed": seed, "mode": mode})
    return FoldResult(fold, seed, mode, discriminator, metrics, training.history, shift,
                      training.bundle.architecture_hash(), len(data.test), pair_stats)


def _job(args):
    return run_fold(*args[:-1], **args[-1])


def run_loso(windows: WindowSet, n_classes: int, train_config: TrainConfig, model_config: ModelConfig,
             mode: str = "full", seeds: Sequence[int] = (0, 1), discriminator: str = "ours",
             n_val: int = 2, split_seed: int = 0, subjects: Optional[Iterable[int]] = None,
             workers: int = 1, skip: Optional[Dict[tuple, FoldResult]] = None,
             on_result: Optional[Callable[[FoldResult], None]] = None,
             raise_on_error: bool = True, shift_method: str = "per_dim",
             checkpoint_dir=None, deterministic: bool = True) -> LosoOutput:
    """Run every (fold, seed) pair and aggregate.

    ``skip`` maps result keys to already-finished results (resume support);
    those runs are not retrained but still enter the aggregate.
    """
    if discriminator not in DISCRIMINATORS:
        raise ValueError(f"unknown discriminator {discriminator!r}")
    subjects = sorted(set(subjects) if subjects is not None else windows.subjects)
    folds = loso_splits(subjects, n_val, split_seed)
    skip = skip or {}
    jobs, done = [], []
    for fold in folds:
        for seed in seeds:
            key = (mode, discriminator, fold.test_subject, int(seed))
            if key in skip:
                done.append(skip[key])
                continue
            ckpt = None
            if checkpoint_dir is not None:
                ckpt = f"{checkpoint_dir}/{mode}_{discriminator}_s{fold.test_subject}_seed{seed}"
            jobs.append((key, (windows, fold, n_classes, train_config, model_config, mode, int(seed),
                               {"discriminator": discriminator, "shift_method": shift_method,
                                "checkpoint_path": ckpt, "deterministic": deterministic})))
    logger.info("LOSO %s/%s: %d runs to train, %d reused", mode, discriminator, len(jobs), len(done))

    results, failures = list(done), []

    def _handle(key, fn):
        try:
            res = fn()
        except Exception as exc:  # noqa: BLE001 - record and continue with other folds
            if raise_on_error:
                raise
            logger.exception("run %s failed", key)
            failures.append((key, repr(exc)))
            return
        results.append(res)
        if on_result is not None:
            on_result(res)
        logger.info("run %s: acc=%.4f f1=%.4f", key, res.metrics.accuracy, res.metrics.macro_f1)

    if workers <= 1 or len(jobs) <= 1:
        for key, args in jobs:
            _handle(key, lambda a=args: _job(a))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(key, pool.submit(_job, args)) for key, args in jobs]
            for key, fut in futures:  # submission order keeps record order stable
                _handle(key, fut.result)
    results.sort(key=lambda r: (r.fold.test_subject, r.seed))
    agg = aggregate(results) if results else None
    return LosoOutput(results, agg, failures)


def compare_discriminators(windows: WindowSet, n_classes: int, train_config: TrainConfig,
                           model_config: ModelConfig, variants: Sequence[str] = ("subject_id", "pair_random", "ours"),
                           **loso_kw) -> Dict[str, LosoOutput]:
    """Full-mode LOSO once per discriminator variant, everything else held fixed."""
    out = {}
    for variant in variants:
        out[variant] = run_loso(windows, n_classes, train_config, model_config, mode="full",
                                discriminator=variant, **loso_kw)
    hashes = {r.arch_hash for o in out.values() for r in o.results}
    if len(hashes) > 1:
        raise AssertionError(f"discriminator variants used different F/R/C architectures: {hashes}")
    return out


DISC_LABELS = {"subject_id": "D_i", "pair_random": "D_b", "ours": "Ours"}


def format_table(rows: Dict[str, AggregateReport], title: str, label_header: str = "Variant") -> str:
    lines = [title, f"{label_header:<22} {'Accuracy':<20} {'F1-Score_M':<20}"]
    for label, agg in rows.items():
        lines.append(f"{label:<22} {agg.accuracy_mean:.4f} ± {agg.accuracy_std:.4f}  "
                     f"{agg.macro_f1_mean:.4f} ± {agg.macro_f1_std:.4f}")
    lines.append(f"(± is the {STD_CONVENTION} std across folds of seed-averaged scores)")
    return "\n".join(lines)
