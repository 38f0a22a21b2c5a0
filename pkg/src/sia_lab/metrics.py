"""Evaluation metrics: attack success, PSNR, SSIM, keypoint error, classification scores."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SCHEMA_VERSION = 1


@dataclass
class MetricResult:
    name: str
    value: float
    count: int
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _same_shape(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def attack_success_rate(model, adversaries: Sequence, ground_truths: Sequence) -> float:
    """Fraction of adversaries on which ``model`` violates the ground truth."""
    if len(adversaries) != len(ground_truths):
        raise ValueError("adversaries and ground truths differ in length")
    if len(adversaries) == 0:
        raise ValueError("no adversaries given")
    hits = [bool(model.is_fooled(x, g)) for x, g in zip(adversaries, ground_truths)]
    return float(np.mean(hits))


def success_rate(flags: Sequence[bool]) -> float:
    if len(flags) == 0:
        raise ValueError("no attack outcomes given")
    return float(np.mean(np.asarray(flags, dtype=bool)))


def psnr(x, y, max_value: float = 1.0, cap: float = 100.0) -> float:
    x, y = _same_shape(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return cap
    return float(min(10.0 * np.log10(max_value ** 2 / mse), cap))


def ssim(x, y, window: int = 8, max_value: float = 1.0, C1: float | None = None,
         C2: float | None = None) -> float:
    """Mean SSIM over non-overlapping ``window x window`` tiles and channels.

    Tiles are uniformly weighted and statistics use the population (1/n)
    variance. Trailing rows/columns that do not fill a tile are ignored.
    """
    x, y = _same_shape(x, y)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    h, w = x.shape[:2]
    if window > min(h, w):
        raise ValueError("window larger than the image")
    C1 = (0.01 * max_value) ** 2 if C1 is None else C1
    C2 = (0.03 * max_value) ** 2 if C2 is None else C2
    nh, nw = h // window, w // window

    def tiles(img):
        t = img[:nh * window, :nw * window].reshape(nh, window, nw, window, -1)
        return t.transpose(0, 2, 4, 1, 3).reshape(nh, nw, -1, window * window)

    tx, ty = tiles(x), tiles(y)
    mx, my = tx.mean(axis=-1), ty.mean(axis=-1)
    vx = ((tx - mx[..., None]) ** 2).mean(axis=-1)
    vy = ((ty - my[..., None]) ** 2).mean(axis=-1)
    cov = ((tx - mx[..., None]) * (ty - my[..., None])).mean(axis=-1)
    num = (2 * mx * my + C1) * (2 * cov + C2)
    den = (mx ** 2 + my ** 2 + C1) * (vx + vy + C2)
    return float(np.mean(num / den))


def keypoint_error(pred, gt, normalizer: float = 1.0) -> float:
    """Mean Euclidean distance between matched keypoints, divided by ``normalizer``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ValueError("keypoint counts differ")
    if normalizer <= 0:
        raise ValueError("normalizer must be positive")
    return float(np.linalg.norm(pred - gt, axis=1).mean() / normalizer)


@dataclass
class ClassificationReport:
    precision: float
    recall: float
    accuracy: float  # fraction in [0, 1]
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    degenerate: list[str] = field(default_factory=list)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.precision, self.recall, self.accuracy, self.f1


def classification_metrics(preds, gts) -> ClassificationReport:
    """Precision, recall, accuracy and F1 for binary labels (positive class = 1).

    A zero denominator yields 0 and names the quantity in ``degenerate``.
    """
    preds = np.asarray(preds).astype(np.int64).ravel()
    gts = np.asarray(gts).astype(np.int64).ravel()
    if len(preds) != len(gts):
        raise ValueError("predictions and labels differ in length")
    if len(preds) == 0:
        raise ValueError("no predictions given")
    tp = int(np.sum((preds == 1) & (gts == 1)))
    fp = int(np.sum((preds == 1) & (gts == 0)))
    fn = int(np.sum((preds == 0) & (gts == 1)))
    tn = int(np.sum((preds == 0) & (gts == 0)))
    degenerate = []

    def ratio(num, den, name):
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    accuracy = (tp + tn) / len(preds)
    return ClassificationReport(precision, recall, accuracy, f1, tp, fp, fn, tn, degenerate)


def balanced_accuracy(preds, gts) -> float:
    preds, gts = np.asarray(preds), np.asarray(gts)
    return float(np.mean([np.mean(preds[gts == c] == c) for c in np.unique(gts)]))


def write_report(path, metrics: Sequence[MetricResult], extra: dict | None = None) -> Path:
    """``report.json``: ``{"schema_version", "metrics": [{name, value, count, params}], ...}``."""
    doc = {"schema_version": SCHEMA_VERSION, "metrics": [m.to_dict() for m in metrics]}
    if extra:
        doc.update(extra)
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def read_report(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if "schema_version" not in doc:
        raise ValueError(f"{path}: missing schema_version")
    return doc


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
