from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch

from .segmentation import WindowSet


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    confusion: np.ndarray  # rows: truth, cols: prediction

    def to_dict(self):
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1,
                "confusion": self.confusion.astype(int).tolist()}


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def compute_metrics(y_true, y_pred, n_classes: int) -> Metrics:
    """Accuracy and macro-F1 over all ``n_classes`` classes.

    A class that never occurs in truth or predictions scores F1 = 0.
    """
    if len(y_true) == 0:
        raise ValueError("cannot score an empty prediction set")
    cm = confusion_matrix(y_true, y_pred, n_classes)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    # exact rationals, rounded once, so the score does not depend on summation order
    f1 = [Fraction(2 * int(t), int(2 * t + p + n)) if (2 * t + p + n) else Fraction(0)
          for t, p, n in zip(tp, fp, fn)]
    return Metrics(float(Fraction(int(tp.sum()), int(cm.sum()))), float(sum(f1) / n_classes), cm)


@torch.no_grad()
def predict(feature_extractor, classifier, windows: WindowSet, batch_size: int = 512, device="cpu") -> np.ndarray:
    was_training = feature_extractor.training, classifier.training
    feature_extractor.eval()
    classifier.eval()
    preds = []
    for start in range(0, len(windows), batch_size):
        xb = torch.as_tensor(windows.x[start:start + batch_size], device=device)
        logits = classifier(feature_extractor(xb)).cpu().numpy()
        preds.append(np.argmax(logits, axis=1))  # first maximum wins ties
    feature_extractor.train(was_training[0])
    classifier.train(was_training[1])
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(bundle, test_windows: WindowSet, n_classes: int, device="cpu") -> Metrics:
    if len(test_windows) == 0:
        raise ValueError("empty test set")
    preds = predict(bundle.F, bundle.C, test_windows, device=device)
    return compute_metrics(test_windows.y, preds, n_classes)
