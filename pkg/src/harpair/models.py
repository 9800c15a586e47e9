import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

BLOCK_NAMES = ("F", "R", "C", "D")
DISCRIMINATORS = ("ours", "pair_random", "subject_id")
NORMS = ("batch", "none")


@dataclass
class ModelConfig:
    d_latent: int = 128
    width_scale: float = 1.0
    n_blocks: int = 3
    kernel_size: int = 8
    base_widths: tuple = (32, 64, 128)
    classifier_hidden: int = 64
    discriminator_hidden: tuple = (128, 64)
    norm: str = "batch"  # "batch": BatchNorm after each encoder convolution; "none"

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")

    def widths(self):
        widths = list(self.base_widths)[: self.n_blocks]
        while len(widths) < self.n_blocks:
            widths.append(widths[-1] * 2)
        return [max(1, int(round(v * self.width_scale))) for v in widths]

    def to_dict(self):
        d = asdict(self)
        d["base_widths"] = list(self.base_widths)
        d["discriminator_hidden"] = list(self.discriminator_hidden)
        return d


class FeatureExtractor(nn.Module):
    """Temporal CNN encoder mapping (batch, w, c) windows to (batch, d_latent)."""

    def __init__(self, c: int, w: int, d_latent: int = 128, width_scale: float = 1.0,
                 n_blocks: int = 3, kernel_size: int = 8, base_widths=(32, 64, 128), norm: str = "batch"):
        super().__init__()
        if d_latent < 2:
            raise ValueError("d_latent must be >= 2")
        cfg = ModelConfig(d_latent, width_scale, n_blocks, kernel_size, tuple(base_widths))
        self.c, self.w, self.d_latent = c, w, d_latent
        self.widths = cfg.widths()
        layers = []
        in_ch = c
        for out_ch in self.widths:
            # explicit asymmetric padding keeps the length for even kernels
            layers += [nn.ConstantPad1d(((kernel_size - 1) // 2, kernel_size // 2), 0.0),
                       nn.Conv1d(in_ch, out_ch, kernel_size)]
            if norm == "batch":
                layers.append(nn.BatchNorm1d(out_ch))
            layers += [nn.GELU(), nn.AvgPool1d(2, ceil_mode=True)]
            in_ch = out_ch
        self.conv = nn.Sequential(*layers)
        self.proj = nn.Linear(in_ch, d_latent)

    def forward(self, x):
        if x.dim() != 3 or x.shape[1] != self.w or x.shape[2] != self.c:
            raise ShapeError(f"expected input (batch, {self.w}, {self.c}), got {tuple(x.shape)}")
        h = self.conv(x.transpose(1, 2))
        return self.proj(h.mean(dim=2))


class Reconstructor(nn.Module):
    """Transposed-convolution decoder mirroring ``FeatureExtractor``."""

    def __init__(self, d_latent: int, w: int, c: int, width_scale: float = 1.0,
                 n_blocks: int = 3, kernel_size: int = 8, base_widths=(32, 64, 128)):
        super().__init__()
        cfg = ModelConfig(d_latent, width_scale, n_blocks, kernel_size, tuple(base_widths))
        widths = cfg.widths()
        self.d_latent, self.w, self.c = d_latent, w, c
        self.seed_len = max(1, math.ceil(w / 2 ** n_blocks))
        self.top = widths[-1]
        self.expand = nn.Linear(d_latent, self.top * self.seed_len)
        layers = []
        chans = list(reversed(widths)) + [widths[0]]
        k = kernel_size + (kernel_size % 2)  # even kernel gives exact length doubling
        for in_ch, out_ch in zip(chans[:-1], chans[1:]):
            layers += [nn.ConvTranspose1d(in_ch, out_ch, k, stride=2, padding=(k - 2) // 2), nn.GELU()]
        self.deconv = nn.Sequential(*layers)
        self.out = nn.Conv1d(widths[0], c, kernel_size=1)

    def forward(self, z):
        if z.dim() != 2 or z.shape[1] != self.d_latent:
            raise ShapeError(f"expected latent (batch, {self.d_latent}), got {tuple(z.shape)}")
        h = self.expand(z).view(z.shape[0], self.top, self.seed_len)
        h = self.out(self.deconv(h))
        if h.shape[2] != self.w:
            h = F.interpolate(h, size=self.w, mode="linear", align_corners=False)
        return h.transpose(1, 2)


class ActivityClassifier(nn.Module):
    def __init__(self, d_latent: int, n_classes: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_latent, hidden), nn.GELU(), nn.Linear(hidden, n_classes))

    def forward(self, z):
        return self.net(z)


class PairDiscriminator(nn.Module):
    """Probability that a concatenated latent pair comes from one subject."""

    def __init__(self, d_latent: int, hidden=(128, 64)):
        super().__init__()
        self.d_latent = d_latent
        layers, in_dim = [], 2 * d_latent
        for h in hidden:
            layers += [nn.Linear(in_dim, h), nn.GELU()]
            in_dim = h
        layers.append(nn.Linear(in_dim, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, zz):
        if zz.dim() != 2 or zz.shape[1] != 2 * self.d_latent:
            raise ShapeError(f"expected pair input (batch, {2 * self.d_latent}), got {tuple(zz.shape)}")
        return torch.sigmoid(self.net(zz))


class SubjectDiscriminator(nn.Module):
    """Per-subject classifier over training subjects (logits)."""

    def __init__(self, d_latent: int, n_subjects: int, hidden=(128, 64)):
        super().__init__()
        self.n_subjects = n_subjects
        layers, in_dim = [], d_latent
        for h in hidden:
            layers += [nn.Linear(in_dim, h), nn.GELU()]
            in_dim = h
        layers.append(nn.Linear(in_dim, n_subjects))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in scaled normal weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d, nn.ConvTranspose1d)):
            if isinstance(m, nn.ConvTranspose1d):
                fan_in = m.weight.shape[0] * m.weight.shape[2] / m.stride[0]
            else:
                fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()


def make_feature_extractor(c, w, d_latent=128, width_scale=1.0, **kw) -> FeatureExtractor:
    return FeatureExtractor(c, w, d_latent, width_scale, **kw)


def make_reconstructor(d_latent, w, c, width_scale=1.0, **kw) -> Reconstructor:
    return Reconstructor(d_latent, w, c, width_scale, **kw)


def make_classifier(d_latent, n_classes, hidden=64) -> ActivityClassifier:
    return ActivityClassifier(d_latent, n_classes, hidden)


def make_discriminator_ours(d_latent, hidden=(128, 64)) -> PairDiscriminator:
    return PairDiscriminator(d_latent, hidden)


def make_discriminator_pair_random(d_latent, hidden=(128, 64)) -> PairDiscriminator:
    # Same head as ours; the difference lies in the pair set it is trained on.
    return PairDiscriminator(d_latent, hidden)


def make_discriminator_subject_id(d_latent, n_train_subjects, hidden=(128, 64)) -> SubjectDiscriminator:
    return SubjectDiscriminator(d_latent, n_train_subjects, hidden)


@dataclass
class ModelBundle:
    F: nn.Module
    R: nn.Module
    C: nn.Module
    D: nn.Module
    discriminator: str = "ours"
    manifest: dict = field(default_factory=dict)
    frozen: Dict[str, bool] = field(default_factory=lambda: {k: False for k in BLOCK_NAMES})
    snapshots: Dict[str, Dict[str, torch.Tensor]] = field(default_factory=dict)

    def block(self, name: str) -> nn.Module:
        if name not in BLOCK_NAMES:
            raise KeyError(f"unknown block {name!r}")
        return getattr(self, name)

    def modules(self):
        return {k: self.block(k) for k in BLOCK_NAMES}

    def to(self, device):
        for m in self.modules().values():
            m.to(device)
        return self

    def train(self, mode: bool = True):
        # frozen blocks stay in eval mode so normalization buffers cannot drift
        for name, m in self.modules().items():
            m.train(mode and not self.frozen[name])

    def eval(self):
        self.train(False)

    def freeze(self, *names):
        for n in names:
            self.frozen[n] = True
            for p in self.block(n).parameters():
                p.requires_grad_(False)
            self.block(n).eval()

    def unfreeze(self, *names):
        for n in names:
            self.frozen[n] = False
            for p in self.block(n).parameters():
                p.requires_grad_(True)
            self.block(n).train()

    def snapshot(self, *names):
        for n in names:
            self.snapshots[n] = {k: v.detach().clone() for k, v in self.block(n).state_dict().items()}

    def architecture_hash(self, blocks=("F", "R", "C")) -> str:
        arch = {k: self.manifest.get(k) for k in blocks}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]

    def n_parameters(self, name: str) -> int:
        return sum(p.numel() for p in self.block(name).parameters())


def snapshot_and_verify_frozen(bundle: ModelBundle, block_name: str) -> bool:
    """True iff the block's current parameters equal its stored snapshot bit for bit."""
    snap = bundle.snapshots.get(block_name)
    if snap is None:
        raise KeyError(f"no snapshot stored for block {block_name!r}")
    current = bundle.block(block_name).state_dict()
    if current.keys() != snap.keys():
        return False
    return all(torch.equal(current[k], snap[k]) for k in snap)


def build_bundle(c: int, w: int, n_classes: int, cfg: ModelConfig, seed: int,
                 discriminator: str = "ours", n_train_subjects: Optional[int] = None) -> ModelBundle:
    if discriminator not in DISCRIMINATORS:
        raise ValueError(f"unknown discriminator {discriminator!r}")
    gen = torch.Generator().manual_seed(int(seed))
    conv_kw = dict(n_blocks=cfg.n_blocks, kernel_size=cfg.kernel_size, base_widths=cfg.base_widths)
    f = make_feature_extractor(c, w, cfg.d_latent, cfg.width_scale, norm=cfg.norm, **conv_kw)
    r = make_reconstructor(cfg.d_latent, w, c, cfg.width_scale, **conv_kw)
    clf = make_classifier(cfg.d_latent, n_classes, cfg.classifier_hidden)
    if discriminator == "subject_id":
        if not n_train_subjects:
            raise ValueError("subject_id discriminator needs n_train_subjects")
        d = make_discriminator_subject_id(cfg.d_latent, n_train_subjects, cfg.discriminator_hidden)
    elif discriminator == "pair_random":
        d = make_discriminator_pair_random(cfg.d_latent, cfg.discriminator_hidden)
    else:
        d = make_discriminator_ours(cfg.d_latent, cfg.discriminator_hidden)
    for m in (f, r, clf, d):
        init_weights(m, gen)
    arch = cfg.to_dict()
    manifest = {
        "F": {"type": "FeatureExtractor", "c": c, "w": w, **arch},
        "R": {"type": "Reconstructor", "c": c, "w": w, **arch},
        "C": {"type": "ActivityClassifier", "d_latent": cfg.d_latent, "n_classes": n_classes,
              "hidden": cfg.classifier_hidden},
        "D": {"type": type(d).__name__, "variant": discriminator, "d_latent": cfg.d_latent,
              "hidden": list(cfg.discriminator_hidden), "n_subjects": n_train_subjects},
    }
    return ModelBundle(f, r, clf, d, discriminator, manifest)


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(bundle: ModelBundle, path, extra: Optional[dict] = None) -> Path:
    """Write ``<path>.npz`` (named float arrays) and ``<path>.json`` (manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, module in bundle.modules().items():
        for key, tensor in module.state_dict().items():
            arrays[f"{name}.{key}"] = tensor.detach().cpu().numpy()
    np.savez(path.with_suffix(".npz"), **arrays)
    manifest = {"version": CHECKPOINT_VERSION, "discriminator": bundle.discriminator,
                "blocks": bundle.manifest, "extra": extra or {}}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path.with_suffix(".npz")


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blocks = manifest["blocks"]
    fcfg = blocks["F"]
    cfg = ModelConfig(fcfg["d_latent"], fcfg["width_scale"], fcfg["n_blocks"], fcfg["kernel_size"],
                      tuple(fcfg["base_widths"]), blocks["C"]["hidden"], tuple(blocks["D"]["hidden"]),
                      fcfg.get("norm", "none"))
    bundle = build_bundle(fcfg["c"], fcfg["w"], blocks["C"]["n_classes"], cfg, seed=0,
                          discriminator=manifest["discriminator"],
                          n_train_subjects=blocks["D"].get("n_subjects"))
    with np.load(path.with_suffix(".npz")) as arrays:
        for name, module in bundle.modules().items():
            prefix = name + "."
            state = {k[len(prefix):]: torch.from_numpy(arrays[k]) for k in arrays.files if k.startswith(prefix)}
            module.load_state_dict(state)
    return bundle
