"""Training objectives. All return scalar tensors and reduce by batch mean."""
from dataclasses import dataclass

import torch

from .errors import EmptySubsetError, ShapeError

EPS = 1e-7


@dataclass
class LossWeights:
    w_A: float = 0.1
    w_R: float = 0.7
    w_C: float = 0.2

    def __post_init__(self):
        for name in ("w_A", "w_R", "w_C"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self):
        return {"w_A": self.w_A, "w_R": self.w_R, "w_C": self.w_C}


def recon_loss(x_hat, x):
    """Squared error averaged over elements of each window, then over the batch."""
    if x_hat.shape != x.shape:
        raise ShapeError(f"reconstruction shape {tuple(x_hat.shape)} != input {tuple(x.shape)}")
    per_sample = ((x_hat - x) ** 2).flatten(1).mean(dim=1)
    return per_sample.mean()


def classification_loss(logits, y):
    k = logits.shape[1]
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= k):
        raise ValueError(f"class index out of range for {k} classes")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_probs = shifted - torch.logsumexp(shifted, dim=1, keepdim=True)
    return -log_probs.gather(1, y.view(-1, 1)).mean()


def _check_probs(p):
    if torch.any(p < 0) or torch.any(p > 1) or torch.any(torch.isnan(p)):
        raise ValueError("probabilities must lie in [0, 1]")


def discrimination_loss(p, g):
    """Binary cross-entropy of same-subject probabilities against pair labels."""
    p = p.reshape(-1)
    g = g.reshape(-1).to(p.dtype)
    _check_probs(p)
    p = p.clamp(EPS, 1 - EPS)
    return -(g * torch.log(p) + (1 - g) * torch.log(1 - p)).mean()


def adversarial_loss(p, g):
    """Non-saturating generator loss: mean of -log p over different-subject pairs only."""
    p = p.reshape(-1)
    g = g.reshape(-1)
    _check_probs(p)
    mask = g == 0
    if not bool(mask.any()):
        raise EmptySubsetError("adversarial loss needs at least one different-subject (g=0) pair")
    return -torch.log(p[mask].clamp(EPS, 1 - EPS)).mean()


def subject_confusion_loss(logits):
    """Cross-entropy between subject predictions and the uniform distribution."""
    log_probs = torch.log_softmax(logits, dim=1)
    return -log_probs.mean(dim=1).mean()


def feature_step2_loss(l_c, l_r):
    return l_c + l_r


def feature_step31_loss(l_a, l_r, l_c, weights: LossWeights):
    return weights.w_A * l_a + weights.w_R * l_r + weights.w_C * l_c
