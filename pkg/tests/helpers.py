"""Shared test utilities: finite-difference gradient checks on a tiny bundle."""
import numpy as np
import torch

from harpair import losses, trainer
from harpair.models import ModelConfig, build_bundle

W, C, D_LATENT, K, BATCH = 16, 2, 4, 3, 4
FD_STEP = 1e-4
REL_TOL = 1e-3


def tiny_bundle(discriminator="ours", seed=0):
    cfg = ModelConfig(d_latent=D_LATENT, width_scale=0.25, n_blocks=2, kernel_size=4,
                      classifier_hidden=8, discriminator_hidden=(8, 8))
    bundle = build_bundle(C, W, K, cfg, seed, discriminator, n_train_subjects=3)
    for m in bundle.modules().values():
        m.double()
    bundle.train()
    return bundle


def tiny_batch(seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(BATCH, W, C, generator=g, dtype=torch.float64)
    xb = torch.rand(BATCH, W, C, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 1])
    pair_g = torch.tensor([0, 1, 0, 1])
    subj = torch.tensor([0, 1, 2, 0])
    return x, xb, y, pair_g, subj


def _pair_prob(bundle, x, xb):
    return bundle.D(torch.cat([bundle.F(x), bundle.F(xb)], dim=1))


def loss_functions(bundle, batch):
    """Every training objective as a closure of the bundle's current parameters."""
    x, xb, y, g, subj = batch
    xp = torch.cat([x, xb])
    w = losses.LossWeights()

    def l_r():
        return losses.recon_loss(bundle.R(bundle.F(xp)), xp)

    def l_c():
        return losses.classification_loss(bundle.C(bundle.F(x)), y)

    def l_d():
        return losses.discrimination_loss(_pair_prob(bundle, x, xb), g)

    def l_a():
        return losses.adversarial_loss(_pair_prob(bundle, x, xb), g)

    return {
        "L_R": (l_r, ("F", "R")),
        "L_C": (l_c, ("F", "C")),
        "L_D": (l_d, ("F", "D")),
        "L_A": (l_a, ("F", "D")),
        "L_F_step2": (lambda: losses.feature_step2_loss(l_c(), l_r()), ("F", "R", "C")),
        "L_F_step3.1": (lambda: losses.feature_step31_loss(l_a(), l_r(), l_c(), w), ("F", "R", "C", "D")),
    }


def gradient_errors(bundle, fn, blocks, n_entries=12, seed=0):
    """Norm-wise relative error between autograd and central differences, per block."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in blocks:
        params = [p for p in bundle.block(name).parameters()]
        for p in bundle.modules().values():
            p.zero_grad(set_to_none=True)
        loss = fn()
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        analytic, numeric = [], []
        for p, gr in zip(params, grads):
            flat = p.data.view(-1)
            for idx in rng.choice(flat.numel(), size=min(n_entries, flat.numel()), replace=False):
                orig = flat[idx].item()
                flat[idx] = orig + FD_STEP
                up = fn().item()
                flat[idx] = orig - FD_STEP
                down = fn().item()
                flat[idx] = orig
                numeric.append((up - down) / (2 * FD_STEP))
                analytic.append(0.0 if gr is None else gr.view(-1)[idx].item())
        a, n = np.array(analytic), np.array(numeric)
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        out[name] = 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)
    return out


def all_gradient_errors(discriminator="ours"):
    bundle = tiny_bundle(discriminator)
    batch = tiny_batch()
    return {name: gradient_errors(bundle, fn, blocks)
            for name, (fn, blocks) in loss_functions(bundle, batch).items()}


def state(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def same_state(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


class StepRecorder:
    """Wraps every optimizer the trainer creates and snapshots all blocks after each step."""

    def __init__(self, bundle, monkeypatch):
        self.bundle = bundle
        self.events = []  # (block stepped, {block: state after the step})
        names = {id(bundle.block(n)): n for n in ("F", "R", "C", "D")}
        real = trainer._adam
        recorder = self

        def wrapped(module, lr, betas):
            opt = real(module, lr, betas)
            step = opt.step
            name = names[id(module)]

            def recording_step(*a, **k):
                out = step(*a, **k)
                recorder.events.append((name, {n: state(recorder.bundle.block(n)) for n in names.values()}))
                return out

            opt.step = recording_step
            opt.block_name = name
            recorder.optimizers.append(opt)
            return opt

        self.optimizers = []
        monkeypatch.setattr(trainer, "_adam", wrapped)


def step3_freeze_violations(events, start):
    """Blocks that changed inside a sub-step where they must be frozen.

    ``events`` come from a StepRecorder over step 3, where every batch steps F, C (3.1) then D (3.2);
    ``start`` is the state of all blocks before step 3.
    """
    out = []
    if not events or [b for b, _ in events] != ["F", "C", "D"] * (len(events) // 3):
        return ["unexpected optimizer step order"]
    prev = start
    for i in range(0, len(events), 3):
        after_31, after_32 = events[i + 1][1], events[i + 2][1]
        out += [f"batch {i // 3}: {n} changed in 3.1" for n in "DR" if not same_state(prev[n], after_31[n])]
        out += [f"batch {i // 3}: {n} changed in 3.2" for n in "FCR" if not same_state(after_31[n], after_32[n])]
        prev = after_32
    return out
