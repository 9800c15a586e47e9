"""
Latent distribution shift between training subjects and a held-out subject,
measured with the first-order Wasserstein distance.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .segmentation import WindowSet

logger = logging.getLogger(__name__)


def wasserstein_1d(a, b) -> float:
    """W1 distance between two empirical 1-D distributions.

    Integrates |F_a - F_b| between consecutive points of the merged sample
    grid, which handles unequal sample sizes. For equal sizes this reduces
    to the mean absolute difference of sorted samples.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein_1d needs two non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    grid = np.concatenate([a, b])
    grid.sort(kind="mergesort")
    deltas = np.diff(grid)
    cdf_a = np.searchsorted(a, grid[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * deltas))


def latent_distance(za: np.ndarray, zb: np.ndarray, method: str = "per_dim",
                    n_projections: int = 64, seed: int = 0) -> float:
    """Distance between two sets of latent vectors (rows are samples).

    ``per_dim`` averages the 1-D distance over latent coordinates;
    ``sliced`` averages it over seeded random unit directions;
    ``standardized`` is ``per_dim`` after dividing each coordinate by its
    pooled std, which makes distances from differently scaled encoders comparable.
    """
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    if method == "per_dim":
        return float(np.mean([wasserstein_1d(za[:, j], zb[:, j]) for j in range(za.shape[1])]))
    if method == "standardized":
        sd = np.concatenate([za, zb]).std(axis=0)
        sd[sd == 0] = 1.0
        return latent_distance(za / sd, zb / sd, "per_dim")
    if method == "sliced":
        rng = np.random.default_rng(seed)
        dirs = rng.standard_normal((za.shape[1], n_projections))
        dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
        pa, pb = za @ dirs, zb @ dirs
        return float(np.mean([wasserstein_1d(pa[:, k], pb[:, k]) for k in range(n_projections)]))
    raise ValueError(f"unknown latent distance method {method!r}")


@torch.no_grad()
def embed(feature_extractor, windows: WindowSet, batch_size: int = 512, device="cpu") -> np.ndarray:
    was_training = feature_extractor.training
    feature_extractor.eval()
    out = []
    for start in range(0, len(windows), batch_size):
        xb = torch.as_tensor(windows.x[start:start + batch_size], device=device)
        out.append(feature_extractor(xb).cpu().numpy().astype(np.float64))
    feature_extractor.train(was_training)
    if not out:
        return np.zeros((0, getattr(feature_extractor, "d_latent", 0)))
    return np.concatenate(out)


def latent_shift(feature_extractor, train_windows: WindowSet, test_windows: WindowSet,
                 per_activity: bool = True, method: str = "per_dim", device="cpu", **kw) -> dict:
    """Train-vs-test latent distance, pooled and (optionally) per activity.

    Activities missing on either side are listed under ``skipped`` and not scored.
    """
    z_train = embed(feature_extractor, train_windows, device=device)
    z_test = embed(feature_extractor, test_windows, device=device)
    return shift_from_latents(z_train, train_windows.y, z_test, test_windows.y, per_activity, method, **kw)


def shift_from_latents(z_train, y_train, z_test, y_test, per_activity=True, method="per_dim", **kw) -> dict:
    result = {"overall": None, "per_activity": {}, "skipped": []}
    if len(z_train) and len(z_test):
        result["overall"] = latent_distance(z_train, z_test, method, **kw)
    if per_activity:
        activities = sorted(set(np.asarray(y_train).tolist()) | set(np.asarray(y_test).tolist()))
        for k in activities:
            a = z_train[np.asarray(y_train) == k]
            b = z_test[np.asarray(y_test) == k]
            if len(a) == 0 or len(b) == 0:
                result["skipped"].append(int(k))
                continue
            result["per_activity"][int(k)] = latent_distance(a, b, method, **kw)
    if not result["per_activity"] and per_activity:
        logger.warning("no activity present on both sides; per-activity shift is empty")
    return result


def percent_change(d_step2: float, d_step3: float) -> Optional[float]:
    """Relative reduction in percent; positive means the distance shrank."""
    if d_step2 is None or d_step3 is None or d_step2 <= 0:
        return None
    return (d_step2 - d_step3) / d_step2 * 100.0


@dataclass
class ShiftReport:
    step2_overall: float
    step3_overall: float
    overall_change_pct: Optional[float]
    step2_per_activity: Dict[int, float] = field(default_factory=dict)
    step3_per_activity: Dict[int, float] = field(default_factory=dict)
    change_pct_per_activity: Dict[int, Optional[float]] = field(default_factory=dict)
    n_folds: int = 0
    activity_names: Dict[int, str] = field(default_factory=dict)

    def to_dict(self):
        return {
            "step2_overall": self.step2_overall, "step3_overall": self.step3_overall,
            "overall_change_pct": self.overall_change_pct,
            "step2_per_activity": {str(k): v for k, v in self.step2_per_activity.items()},
            "step3_per_activity": {str(k): v for k, v in self.step3_per_activity.items()},
            "change_pct_per_activity": {str(k): v for k, v in self.change_pct_per_activity.items()},
            "n_folds": self.n_folds,
            "activity_names": {str(k): v for k, v in self.activity_names.items()},
        }

    @classmethod
    def from_dict(cls, d):
        def keys(m):
            return {int(k): v for k, v in m.items()}
        return cls(d["step2_overall"], d["step3_overall"], d["overall_change_pct"],
                   keys(d["step2_per_activity"]), keys(d["step3_per_activity"]),
                   keys(d["change_pct_per_activity"]), d.get("n_folds", 0),
                   keys(d.get("activity_names", {})))


def _mean_per_activity(reports: Sequence[dict]) -> Dict[int, float]:
    acc: Dict[int, List[float]] = {}
    for r in reports:
        for k, v in r["per_activity"].items():
            acc.setdefault(int(k), []).append(v)
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def shift_delta(fold_results_step2: Sequence[dict], fold_results_step3: Sequence[dict],
                fold_ids: Optional[Sequence] = None, activity_names=None) -> ShiftReport:
    """Average per-fold distances after step 2 and step 3, then take the percentage change.

    ``fold_ids`` (pairs of id sequences) may be given to check both lists
    cover the same folds in the same order.
    """
    if len(fold_results_step2) != len(fold_results_step3):
        raise ValueError("step-2 and step-3 results cover different numbers of folds")
    if fold_ids is not None:
        ids2, ids3 = fold_ids
        if list(ids2) != list(ids3):
            raise ValueError("step-2 and step-3 results cover different folds")
    if not fold_results_step2:
        raise ValueError("no fold results given")
    d2 = float(np.mean([r["overall"] for r in fold_results_step2]))
    d3 = float(np.mean([r["overall"] for r in fold_results_step3]))
    pa2 = _mean_per_activity(fold_results_step2)
    pa3 = _mean_per_activity(fold_results_step3)
    common = sorted(set(pa2) & set(pa3))
    return ShiftReport(d2, d3, percent_change(d2, d3),
                       {k: pa2[k] for k in common}, {k: pa3[k] for k in common},
                       {k: percent_change(pa2[k], pa3[k]) for k in common},
                       len(fold_results_step2), dict(activity_names or {}))
