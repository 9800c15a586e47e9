"""
Three-step training: autoencoder pre-training (step 1), joint supervised
pre-training (step 2) and alternating adversarial optimisation (step 3).

Each block owns its Adam optimiser; optimisers are rebuilt at every step
boundary. A frozen block never has its optimiser stepped, and its
parameters are compared bit-for-bit against a snapshot after the sub-step
that froze it.
"""
import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from . import losses
from .errors import FreezeViolation
from .metrics import compute_metrics, predict
from .models import ModelBundle, ModelConfig, build_bundle, snapshot_and_verify_frozen
from .pairs import PairSet, build_pair_set, build_random_pair_set, pair_batches
from .segmentation import FoldData, WindowSet

logger = logging.getLogger(__name__)

MODES = ("supervised_only", "through_step2", "full")


def _default_lr(**kw):
    return field(default_factory=lambda: dict(kw))


@dataclass
class TrainConfig:
    epochs_step1: int = 20
    epochs_step2: int = 10
    epochs_step3: int = 150
    epochs_supervised: Optional[int] = None  # None: same total budget as the three steps
    lr_step1: Dict[str, float] = _default_lr(F=1e-4, R=1e-4)
    lr_step2: Dict[str, float] = _default_lr(F=1e-4, R=1e-4, C=1e-5, D=1e-4)
    lr_step3: Dict[str, float] = _default_lr(F=1e-3, C=1e-4, D=1e-4)
    lr_supervised: Dict[str, float] = _default_lr(F=1e-4, C=1e-4)
    batch_size_step1: int = 64
    batch_size: int = 32
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    per_class_target: int = 25000
    betas: tuple = (0.9, 0.999)
    freeze_check: str = "substep"  # or "epoch"
    resample_pairs_each_epoch: bool = False
    device: str = "cpu"

    def __post_init__(self):
        for name in ("epochs_step1", "epochs_step2", "epochs_step3"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr_step1", "lr_step2", "lr_step3", "lr_supervised"):
            if any(v <= 0 for v in getattr(self, name).values()):
                raise ValueError(f"all learning rates in {name} must be > 0")
        if self.freeze_check not in ("substep", "epoch"):
            raise ValueError("freeze_check must be 'substep' or 'epoch'")
        if isinstance(self.weights, dict):
            self.weights = losses.LossWeights(**self.weights)

    @property
    def supervised_epochs(self) -> int:
        if self.epochs_supervised:
            return self.epochs_supervised
        return self.epochs_step1 + self.epochs_step2 + self.epochs_step3

    def to_dict(self):
        d = dict(self.__dict__)
        d["weights"] = self.weights.to_dict()
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainHistory:
    segments: Dict[str, Dict[str, List[float]]] = field(default_factory=dict)
    freeze_checks: Dict[str, int] = field(default_factory=dict)
    wall_clock: Dict[str, List[float]] = field(default_factory=dict)
    skipped_batches: int = 0
    best: dict = field(default_factory=dict)

    def log(self, step: str, **values):
        seg = self.segments.setdefault(step, {})
        for k, v in values.items():
            seg.setdefault(k, []).append(float(v))

    def n_epochs(self, step: str) -> int:
        seg = self.segments.get(step, {})
        return max((len(v) for v in seg.values()), default=0)

    def to_dict(self, include_timing: bool = False):
        d = {"segments": self.segments, "freeze_checks": self.freeze_checks,
             "skipped_batches": self.skipped_batches, "best": self.best}
        if include_timing:
            d["wall_clock"] = self.wall_clock
        return d


@dataclass
class FoldTraining:
    bundle: ModelBundle
    history: TrainHistory
    stage_states: Dict[str, dict]  # F state dict at the end of each step
    pair_set: Optional[PairSet] = None


# -- helpers ----------------------------------------------------------------------

def _adam(module, lr, betas):
    return torch.optim.Adam(module.parameters(), lr=lr, betas=tuple(betas))


def _a_batches(n: int, batch_size: int, rng) -> List[np.ndarray]:
    if n == 0:
        raise ValueError("empty training set")
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _verify(bundle: ModelBundle, history: TrainHistory, step: str, *names):
    for n in names:
        if not snapshot_and_verify_frozen(bundle, n):
            raise FreezeViolation(f"{step}: frozen block {n} changed")
    history.freeze_checks[step] = history.freeze_checks.get(step, 0) + len(names)


def _state(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


class _Tensors:
    """Window data moved to the training device once."""

    def __init__(self, windows: WindowSet, device):
        self.x = torch.as_tensor(windows.x, device=device)
        self.y = torch.as_tensor(windows.y, device=device)
        self.s = torch.as_tensor(windows.s, device=device)


class _PairView:
    def __init__(self, pairs: PairSet, device):
        self.pairs = pairs
        self.ia = torch.as_tensor(pairs.index_a, device=device)
        self.ib = torch.as_tensor(pairs.index_b, device=device)
        self.g = torch.as_tensor(pairs.g, device=device)


def _pair_forward(bundle, data: _Tensors, view: _PairView, idx, subject_index=None):
    """Embed both members of a pair batch; returns (x_pair, z_pair, g, subject targets)."""
    idx_t = torch.as_tensor(idx, device=data.x.device)
    ia, ib = view.ia[idx_t], view.ib[idx_t]
    xp = torch.cat([data.x[ia], data.x[ib]])
    zp = bundle.F(xp)
    subj = None
    if subject_index is not None:
        subj = subject_index[torch.cat([data.s[ia], data.s[ib]])]
    return xp, zp, view.g[idx_t], subj


def _disc_loss(bundle, zp, g, subj):
    """Discriminator objective for the active variant on (possibly detached) pair latents."""
    if bundle.discriminator == "subject_id":
        return losses.classification_loss(bundle.D(zp), subj)
    half = zp.shape[0] // 2
    p = bundle.D(torch.cat([zp[:half], zp[half:]], dim=1))
    return losses.discrimination_loss(p, g)


def _adv_loss(bundle, zp, g):
    if bundle.discriminator == "subject_id":
        return losses.subject_confusion_loss(bundle.D(zp))
    half = zp.shape[0] // 2
    p = bundle.D(torch.cat([zp[:half], zp[half:]], dim=1))
    return losses.adversarial_loss(p, g)


@torch.no_grad()
def discriminator_accuracy(bundle: ModelBundle, windows: WindowSet, pairs: PairSet, device="cpu") -> float:
    """Fraction of pairs whose same-subject prediction (p > 0.5) matches g."""
    if bundle.discriminator == "subject_id" or len(pairs) == 0:
        return float("nan")
    was = bundle.F.training, bundle.D.training
    bundle.F.eval()
    bundle.D.eval()
    xa = torch.as_tensor(windows.x[pairs.index_a], device=device)
    xb = torch.as_tensor(windows.x[pairs.index_b], device=device)
    p = bundle.D(torch.cat([bundle.F(xa), bundle.F(xb)], dim=1)).reshape(-1).cpu().numpy()
    bundle.F.train(was[0])
    bundle.D.train(was[1])
    return float(np.mean((p > 0.5) == (pairs.g == 1)))


class _Monitor:
    """Per-epoch validation and best-checkpoint tracking."""

    def __init__(self, val: Optional[WindowSet], n_classes: int, device, val_pairs=None):
        self.val = val if val is not None and len(val) else None
        self.n_classes = n_classes
        self.device = device
        self.val_pairs = val_pairs
        self.best_f1 = -np.inf
        self.best_state = None
        self.best_info = {}

    def __call__(self, bundle: ModelBundle, history: TrainHistory, step: str, epoch: int, select: bool = True):
        if self.val is not None:
            preds = predict(bundle.F, bundle.C, self.val, device=self.device)
            m = compute_metrics(self.val.y, preds, self.n_classes)
            history.log(step, val_accuracy=m.accuracy, val_macro_f1=m.macro_f1)
            if select and m.macro_f1 > self.best_f1:
                self.best_f1 = m.macro_f1
                self.best_state = {"F": _state(bundle.F), "C": _state(bundle.C)}
                self.best_info = {"step": step, "epoch": epoch, "val_macro_f1": m.macro_f1}
        if self.val_pairs is not None:
            history.log(step, val_disc_accuracy=discriminator_accuracy(
                bundle, self.val, self.val_pairs, self.device))

    def restore_best(self, bundle: ModelBundle, history: TrainHistory):
        if self.best_state is None:
            return
        bundle.F.load_state_dict(self.best_state["F"])
        bundle.C.load_state_dict(self.best_state["C"])
        history.best = dict(self.best_info)


# -- steps --------------------------------------------------------------------------

def run_step1(bundle: ModelBundle, train_windows: WindowSet, config: TrainConfig, seed: int = 0,
              history: Optional[TrainHistory] = None) -> TrainHistory:
    """Train F and R on reconstruction alone; C and D stay untouched."""
    history = history or TrainHistory()
    device = config.device
    data = _Tensors(train_windows, device)
    rng = np.random.default_rng([seed, 1])
    bundle.unfreeze("F", "R")
    bundle.freeze("C", "D")
    bundle.snapshot("C", "D")
    opt_f = _adam(bundle.F, config.lr_step1["F"], config.betas)
    opt_r = _adam(bundle.R, config.lr_step1["R"], config.betas)
    bundle.train()
    for epoch in range(config.epochs_step1):
        t0 = time.perf_counter()
        totals = []
        for idx in _a_batches(len(data.y), config.batch_size_step1, rng):
            xb = data.x[torch.as_tensor(idx, device=device)]
            l_r = losses.recon_loss(bundle.R(bundle.F(xb)), xb)
            opt_f.zero_grad(set_to_none=True)
            opt_r.zero_grad(set_to_none=True)
            l_r.backward()
            opt_f.step()
            opt_r.step()
            totals.append(l_r.item())
        _verify(bundle, history, "step1", "C", "D")
        history.log("step1", L_R=np.mean(totals))
        history.wall_clock.setdefault("step1", []).append(time.perf_counter() - t0)
        logger.debug("step1 epoch %d L_R=%.5f", epoch + 1, np.mean(totals))
    bundle.unfreeze("C", "D")
    return history


def _epoch_pair_batches(pair_set: PairSet, windows: WindowSet, n_batches: int, rng,
                        config: TrainConfig, epoch: int):
    """Pair batches for one epoch; optionally draws a fresh pair set first."""
    if config.resample_pairs_each_epoch and epoch > 0:
        builder = build_pair_set if pair_set.same_activity else build_random_pair_set
        pair_set = builder(windows, pair_set.per_class_target, int(rng.integers(2 ** 31)))
    return pair_set, pair_batches(pair_set, n_batches, int(rng.integers(2 ** 31)))


def _subject_index(bundle: ModelBundle, train_windows: WindowSet, device):
    if bundle.discriminator != "subject_id":
        return None
    subjects = train_windows.subjects
    table = torch.full((max(subjects) + 1,), -1, dtype=torch.long, device=device)
    for i, s in enumerate(subjects):
        table[s] = i
    return table


def run_step2(bundle: ModelBundle, train_windows: WindowSet, pair_set: PairSet, config: TrainConfig,
              seed: int = 0, history: Optional[TrainHistory] = None,
              monitor: Optional[Callable] = None) -> TrainHistory:
    """Joint supervised pre-training of F, R, C and D.

    F descends L_C(A) + L_R(A'); R descends L_R(A'); C descends L_C(A);
    D descends L_D(A') on latents detached from F.
    """
    history = history or TrainHistory()
    n0, n1 = pair_set.class_counts() if len(pair_set) else (0, 0)
    if len(pair_set) == 0 or n0 != n1:
        raise ValueError(f"step 2 needs a non-empty balanced pair set, got counts ({n0}, {n1})")
    device = config.device
    data = _Tensors(train_windows, device)
    view = _PairView(pair_set, device)
    subj_index = _subject_index(bundle, train_windows, device)
    rng = np.random.default_rng([seed, 2])
    bundle.unfreeze("F", "R", "C", "D")
    opts = {k: _adam(bundle.block(k), config.lr_step2[k], config.betas) for k in ("F", "R", "C", "D")}
    bundle.train()
    for epoch in range(config.epochs_step2):
        t0 = time.perf_counter()
        acc = {"L_C": [], "L_R": [], "L_D": [], "L_F": []}
        a_batches = _a_batches(len(data.y), config.batch_size, rng)
        epoch_pairs, p_batches = _epoch_pair_batches(pair_set, train_windows, len(a_batches),
                                                     rng, config, epoch)
        view = _PairView(epoch_pairs, device) if epoch_pairs is not pair_set else view
        for a_idx, p_idx in zip(a_batches, p_batches):
            a_t = torch.as_tensor(a_idx, device=device)
            xa, ya = data.x[a_t], data.y[a_t]
            l_c = losses.classification_loss(bundle.C(bundle.F(xa)), ya)
            xp, zp, g, subj = _pair_forward(bundle, data, view, p_idx, subj_index)
            l_r = losses.recon_loss(bundle.R(zp), xp)
            l_d = _disc_loss(bundle, zp.detach(), g, subj)
            l_f = losses.feature_step2_loss(l_c, l_r)
            for opt in opts.values():
                opt.zero_grad(set_to_none=True)
            # l_c touches F,C; l_r touches F,R; l_d touches D only (detached latents),
            # so one backward yields each block's own gradient.
            (l_f + l_d).backward()
            for opt in opts.values():
                opt.step()
            for k, v in (("L_C", l_c), ("L_R", l_r), ("L_D", l_d), ("L_F", l_f)):
                acc[k].append(v.item())
        history.log("step2", **{k: np.mean(v) for k, v in acc.items()})
        history.wall_clock.setdefault("step2", []).append(time.perf_counter() - t0)
        if monitor is not None:
            monitor(bundle, history, "step2", epoch)
    return history


def run_step3(bundle: ModelBundle, train_windows: WindowSet, pair_set: PairSet, config: TrainConfig,
              seed: int = 0, history: Optional[TrainHistory] = None,
              monitor: Optional[Callable] = None) -> TrainHistory:
    """Alternating adversarial optimisation with R frozen throughout.

    Sub-step 3.1 (D frozen): F descends w_A L_A + w_R L_R + w_C L_C and C descends L_C.
    Sub-step 3.2 (F, C frozen): D descends L_D on latents of the updated F.
    """
    history = history or TrainHistory()
    if len(pair_set) == 0:
        raise ValueError("step 3 needs a non-empty pair set")
    device = config.device
    data = _Tensors(train_windows, device)
    view = _PairView(pair_set, device)
    subj_index = _subject_index(bundle, train_windows, device)
    rng = np.random.default_rng([seed, 3])
    w = config.weights
    strict = config.freeze_check == "substep"

    bundle.unfreeze("F", "C", "D")
    bundle.freeze("R")
    bundle.snapshot("R")
    opt_f = _adam(bundle.F, config.lr_step3["F"], config.betas)
    opt_c = _adam(bundle.C, config.lr_step3["C"], config.betas)
    opt_d = _adam(bundle.D, config.lr_step3["D"], config.betas)
    f_params = list(bundle.F.parameters())
    c_params = list(bundle.C.parameters())
    bundle.train()
    for epoch in range(config.epochs_step3):
        t0 = time.perf_counter()
        acc = {"L_A": [], "L_R": [], "L_C": [], "L_F": [], "L_D": []}
        a_batches = _a_batches(len(data.y), config.batch_size, rng)
        epoch_pairs, p_batches = _epoch_pair_batches(pair_set, train_windows, len(a_batches),
                                                     rng, config, epoch)
        view = _PairView(epoch_pairs, device) if epoch_pairs is not pair_set else view
        for a_idx, p_idx in zip(a_batches, p_batches):
            if bundle.discriminator != "subject_id" and not np.any(epoch_pairs.g[p_idx] == 0):
                history.skipped_batches += 1
                logger.warning("step3: skipping pair batch without g=0 pairs")
                continue
            a_t = torch.as_tensor(a_idx, device=device)
            xa, ya = data.x[a_t], data.y[a_t]

            # 3.1: D frozen, R frozen
            bundle.freeze("D")
            if strict:
                bundle.snapshot("D")
            l_c = losses.classification_loss(bundle.C(bundle.F(xa)), ya)
            xp, zp, g, subj = _pair_forward(bundle, data, view, p_idx, subj_index)
            l_r = losses.recon_loss(bundle.R(zp), xp)
            l_a = _adv_loss(bundle, zp, g)
            l_f = losses.feature_step31_loss(l_a, l_r, l_c, w)
            opt_f.zero_grad(set_to_none=True)
            opt_c.zero_grad(set_to_none=True)
            grads_f = torch.autograd.grad(l_f, f_params, retain_graph=True)
            grads_c = torch.autograd.grad(l_c, c_params)
            for p, gr in zip(f_params, grads_f):
                p.grad = gr
            for p, gr in zip(c_params, grads_c):
                p.grad = gr
            opt_f.step()
            opt_c.step()
            if strict:
                _verify(bundle, history, "step3.1", "D", "R")

            # 3.2: F and C frozen
            bundle.unfreeze("D")
            bundle.freeze("F", "C")
            if strict:
                bundle.snapshot("F", "C")
            with torch.no_grad():
                xp2, zp2, g2, subj2 = _pair_forward(bundle, data, view, p_idx, subj_index)
            l_d = _disc_loss(bundle, zp2, g2, subj2)
            opt_d.zero_grad(set_to_none=True)
            l_d.backward()
            opt_d.step()
            if strict:
                _verify(bundle, history, "step3.2", "F", "C")
            bundle.unfreeze("F", "C")

            for k, v in (("L_A", l_a), ("L_R", l_r), ("L_C", l_c), ("L_F", l_f), ("L_D", l_d)):
                acc[k].append(v.item())
        _verify(bundle, history, "step3", "R")
        history.log("step3", **{k: (np.mean(v) if v else float("nan")) for k, v in acc.items()})
        history.wall_clock.setdefault("step3", []).append(time.perf_counter() - t0)
        if monitor is not None:
            monitor(bundle, history, "step3", epoch)
    bundle.unfreeze("R")
    return history


def run_supervised(bundle: ModelBundle, train_windows: WindowSet, config: TrainConfig, seed: int = 0,
                   history: Optional[TrainHistory] = None, monitor: Optional[Callable] = None) -> TrainHistory:
    """End-to-end F + C training with the classification loss only."""
    history = history or TrainHistory()
    device = config.device
    data = _Tensors(train_windows, device)
    rng = np.random.default_rng([seed, 4])
    bundle.freeze("R", "D")
    bundle.snapshot("R", "D")
    opt_f = _adam(bundle.F, config.lr_supervised["F"], config.betas)
    opt_c = _adam(bundle.C, config.lr_supervised["C"], config.betas)
    bundle.train()
    for epoch in range(config.supervised_epochs):
        t0 = time.perf_counter()
        totals = []
        for idx in _a_batches(len(data.y), config.batch_size, rng):
            t = torch.as_tensor(idx, device=device)
            l_c = losses.classification_loss(bundle.C(bundle.F(data.x[t])), data.y[t])
            opt_f.zero_grad(set_to_none=True)
            opt_c.zero_grad(set_to_none=True)
            l_c.backward()
            opt_f.step()
            opt_c.step()
            totals.append(l_c.item())
        _verify(bundle, history, "supervised", "R", "D")
        history.log("supervised", L_C=np.mean(totals))
        history.wall_clock.setdefault("supervised", []).append(time.perf_counter() - t0)
        if monitor is not None:
            monitor(bundle, history, "supervised", epoch)
    bundle.unfreeze("R", "D")
    return history


# -- fold driver -----------------------------------------------------------------------

def fold_seeds(seed: int, test_subject: int) -> dict:
    """Independent seeds for weights, pair sampling and batch order of one fold run."""
    state = np.random.SeedSequence([int(seed), int(test_subject)]).generate_state(4)
    return {"weights": int(state[0]), "pairs": int(state[1]), "batches": int(state[2]),
            "val_pairs": int(state[3])}


def build_pairs_for(discriminator: str, windows: WindowSet, per_class_target: int, seed: int) -> PairSet:
    if discriminator == "pair_random":
        return build_random_pair_set(windows, per_class_target, seed)
    return build_pair_set(windows, per_class_target, seed)


def train_fold(fold_data: FoldData, config: TrainConfig, mode: str = "full", seed: int = 0,
               model_config: Optional[ModelConfig] = None, discriminator: str = "ours") -> FoldTraining:
    """Train one LOSO fold in one ablation mode and restore the best validation checkpoint."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    model_config = model_config or ModelConfig()
    seeds = fold_seeds(seed, fold_data.fold.test_subject)
    torch.manual_seed(seeds["weights"])
    train = fold_data.train
    bundle = build_bundle(train.n_channels, train.window_size, fold_data.n_classes, model_config,
                          seeds["weights"], discriminator, n_train_subjects=len(train.subjects))
    bundle.to(config.device)
    history = TrainHistory()
    stage_states = {}

    pairs = val_pairs = None
    if mode != "supervised_only":
        pairs = build_pairs_for(discriminator, train, config.per_class_target, seeds["pairs"])
        val = fold_data.val
        if discriminator != "subject_id" and len(val) and len(val.subjects) >= 2:
            target = max(1, int(round(config.per_class_target * len(val) / len(train))))
            val_pairs = build_pairs_for(discriminator, val, target, seeds["val_pairs"])
    monitor = _Monitor(fold_data.val, fold_data.n_classes, config.device, val_pairs)

    if mode == "supervised_only":
        run_supervised(bundle, train, config, seeds["batches"], history, monitor)
    else:
        run_step1(bundle, train, config, seeds["batches"], history)
        stage_states["step1"] = _state(bundle.F)
        run_step2(bundle, train, pairs, config, seeds["batches"], history, monitor)
        stage_states["step2"] = _state(bundle.F)
        if mode == "full":
            run_step3(bundle, train, pairs, config, seeds["batches"], history, monitor)
            stage_states["step3"] = _state(bundle.F)
    monitor.restore_best(bundle, history)
    bundle.eval()
    return FoldTraining(bundle, history, stage_states, pairs)


def feature_extractor_at(training: FoldTraining, stage: str):
    """A copy of the trained F with the parameters it had at the end of ``stage``."""
    f = copy.deepcopy(training.bundle.F)
    f.load_state_dict(training.stage_states[stage])
    f.eval()
    return f
