"""Adversarial fine-tuning, robustness matrices, and imbalanced-data strategies."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attack import AttackConfig, run_attack_batch
from .metrics import balanced_accuracy, classification_metrics
from .toyworld.targets import ToyClassifier, train_classifier
from .toyworld.world import ToyDataset, ToySample

STRATEGIES = ("none", "reweight", "resample", "cutmix", "sia_augment", "sia_augment_reweight")
FINETUNE_LR_SCALE = 0.1


@dataclass
class TrainingPlan:
    strategy: str = "none"
    epochs: int = 300
    lr: float = 1.0
    augmentation_count: int = 0
    seed: int = 0
    weight_decay: float = 1e-3
    cutmix_probability: float = 0.5
    cutmix_alpha: float = 1.0
    minority_oversample: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.epochs < 0 or self.augmentation_count < 0:
            raise ValueError("epochs and augmentation_count must be non-negative")


@dataclass
class RobustnessMatrix:
    rows: list[str]
    columns: list[str]
    cells: np.ndarray  # accuracy in percent, (rows, columns)

    def cell(self, row: str, column: str) -> float:
        return float(self.cells[self.rows.index(row), self.columns.index(column)])

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(["attack", *self.columns])
            for name, row in zip(self.rows, self.cells):
                writer.writerow([name, *(repr(float(v)) for v in row)])
        return path

    @classmethod
    def from_csv(cls, path) -> "RobustnessMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls([r[0] for r in rows[1:]], rows[0][1:],
                   np.array([[float(v) for v in r[1:]] for r in rows[1:]]))


# --- adversarial training ---------------------------------------------------

def adversarial_finetune(model: ToyClassifier, adversaries, labels, epochs: int = 1,
                         lr: float | None = None, seed: int = 0, batch_size: int = 16,
                         base_lr: float = 1.0, weight_decay: float = 0.0) -> ToyClassifier:
    """Fine-tune a copy of ``model`` on adversaries with their true labels.

    One epoch is one seeded pass over the adversaries in mini-batches; the
    default learning rate is 0.1x the base training rate.
    """
    adversaries = np.asarray(adversaries, dtype=np.float64)
    labels = np.asarray(labels)
    if len(adversaries) != len(labels):
        raise ValueError("adversaries and labels differ in length")
    tuned = model.copy()
    if epochs == 0:
        return tuned
    if len(adversaries) == 0:
        raise ValueError("no adversaries to fine-tune on")
    lr = FINETUNE_LR_SCALE * base_lr if lr is None else lr
    tuned.fit(adversaries, labels, epochs, lr, weight_decay=weight_decay, batch_size=batch_size,
              seed=seed)
    return tuned


def attacked_accuracy(model, dataset: ToyDataset, kind: str, config: AttackConfig | None,
                      generator=None, indices=None, workers: int | None = 1) -> float:
    """Accuracy (%) of ``model`` on white-box adversaries of the slice (``kind="clean"`` for none)."""
    indices = list(range(len(dataset))) if indices is None else list(indices)
    labels = np.array([dataset.samples[i].label for i in indices])
    if kind == "clean":
        images = dataset.subset(indices).images()
        return 100.0 * float(np.mean(model.predict(images) == labels))
    results = run_attack_batch(model, generator, dataset, config, kind, indices, workers)
    adv = np.stack([r[0].adversary for r in results])
    return 100.0 * float(np.mean(model.predict(adv) == labels))


def robustness_matrix(models: dict, eval_attacks: dict, dataset: ToyDataset, generator=None,
                      indices=None, workers: int | None = 1) -> RobustnessMatrix:
    """Rows: evaluation attacks (``{"clean": ("clean", None), "FGSM": ("fgsm", cfg), ...}``);
    columns: models. Each attack is run white-box against each model."""
    if not models or not eval_attacks:
        raise ValueError("need at least one model and one evaluation attack")
    cells = np.zeros((len(eval_attacks), len(models)))
    for r, (kind, cfg) in enumerate(eval_attacks.values()):
        for c, model in enumerate(models.values()):
            cells[r, c] = attacked_accuracy(model, dataset, kind, cfg, generator, indices, workers)
    return RobustnessMatrix(list(eval_attacks), list(models), cells)


# --- imbalance strategies -----------------------------------------------------

def make_imbalanced(dataset: ToyDataset, positive_fraction: float, total: int, seed: int = 0
                    ) -> ToyDataset:
    """Subsample exactly ``round(total * positive_fraction)`` positives and the rest negatives."""
    n_pos = int(round(total * positive_fraction))
    n_neg = total - n_pos
    labels = dataset.labels()
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    if len(pos) < n_pos or len(neg) < n_neg:
        raise ValueError(f"need {n_pos} positives and {n_neg} negatives, "
                         f"have {len(pos)} and {len(neg)}")
    rng = np.random.default_rng([seed, 0x1B])
    chosen = np.concatenate([rng.choice(pos, n_pos, replace=False),
                             rng.choice(neg, n_neg, replace=False)])
    chosen = np.sort(chosen)
    return dataset.subset(chosen, imbalance={"positive_fraction": positive_fraction,
                                             "total": total, "seed": seed})


def reweight(dataset) -> np.ndarray:
    """Per-sample weights proportional to ``1 / class_count``, summing to ``N``."""
    labels = np.asarray(dataset.labels() if hasattr(dataset, "labels") else dataset)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("reweighting needs at least two classes")
    per_class = {c: len(labels) / (len(classes) * n) for c, n in zip(classes, counts)}
    return np.array([per_class[y] for y in labels])


def resample(dataset: ToyDataset, seed: int = 0) -> ToyDataset:
    """Duplicate minority samples (uniformly, with replacement) up to the majority count."""
    labels = dataset.labels()
    classes, counts = np.unique(labels, return_counts=True)
    target = counts.max()
    rng = np.random.default_rng([seed, 0x2E5])
    keep = list(range(len(dataset)))
    for c, n in zip(classes, counts):
        if n < target:
            members = np.flatnonzero(labels == c)
            keep.extend(rng.choice(members, target - n, replace=True).tolist())
    return dataset.subset(keep, resampled=True)


def cutmix(images, labels, probability: float = 0.5, alpha: float = 1.0, seed: int = 0):
    """Paste a random box from a partner image with probability ``probability``.

    The pasted box covers a fraction ``1 - lam`` of the image with
    ``lam ~ Beta(alpha, alpha)`` (recomputed after clipping the box), and the
    label becomes ``lam * y + (1 - lam) * y_partner``.
    """
    images = np.array(images, dtype=np.float64, copy=True)
    labels = np.asarray(labels, dtype=np.float64).copy()
    n = len(images)
    if n < 2:
        raise ValueError("cutmix needs a batch of at least two images")
    h, w = images.shape[1:3]
    rng = np.random.default_rng([seed, 0xC07])
    partners = rng.permutation(n)
    source_images, source_labels = images.copy(), labels.copy()
    for i in range(n):
        if rng.random() >= probability:
            continue
        j = partners[i]
        lam = rng.beta(alpha, alpha)
        box = cutmix_box(h, w, lam, rng)
        lam = paste_box(images, i, source_images[j], box)
        labels[i] = lam * source_labels[i] + (1.0 - lam) * source_labels[j]
    return images, labels


def cutmix_box(h: int, w: int, lam: float, rng) -> tuple[int, int, int, int]:
    cut = np.sqrt(1.0 - lam)
    ch, cw = int(h * cut), int(w * cut)
    cy, cx = rng.integers(h), rng.integers(w)
    return (int(np.clip(cy - ch // 2, 0, h)), int(np.clip(cy + ch // 2, 0, h)),
            int(np.clip(cx - cw // 2, 0, w)), int(np.clip(cx + cw // 2, 0, w)))


def paste_box(images, i, partner_image, box) -> float:
    """Paste ``partner_image[box]`` into ``images[i]``; returns the kept-area fraction."""
    r0, r1, c0, c1 = box
    images[i, r0:r1, c0:c1] = partner_image[r0:r1, c0:c1]
    h, w = images.shape[1:3]
    return 1.0 - (r1 - r0) * (c1 - c0) / (h * w)


def sia_augment(model, generator, dataset: ToyDataset, config: AttackConfig, count: int,
                seed: int = 0, minority_oversample: bool = False, workers: int | None = 1
                ) -> ToyDataset:
    """Append ``count`` SIA adversaries, each keeping its source sample's label.

    Sources are drawn with replacement, uniformly or (``minority_oversample``)
    balanced across classes. An adversary is stored as the sample
    ``(x_T, a_T)`` so that rendering it reproduces ``G(x_T, a_T)``.
    """
    if count == 0:
        return dataset.subset(range(len(dataset)))
    rng = np.random.default_rng([seed, 0xA06])
    labels = dataset.labels()
    if minority_oversample:
        classes = np.unique(labels)
        per_class = [np.flatnonzero(labels == c) for c in classes]
        picks = rng.integers(len(classes), size=count)
        sources = np.array([rng.choice(per_class[c]) for c in picks])
    else:
        sources = rng.integers(len(dataset), size=count)
    # attack each distinct source once; repeated draws reuse its adversary
    unique, inverse = np.unique(sources, return_inverse=True)
    results = run_attack_batch(model, generator, dataset, config, "sia", unique.tolist(), workers)
    extra = []
    for pos in inverse:
        src = dataset.samples[unique[pos]]
        trace = results[pos][1]
        extra.append(ToySample(trace.final_image.copy(), trace.attrs[-1].copy(), src.label,
                               src.keypoints.copy()))
    merged = ToyDataset(list(dataset.samples) + extra,
                        dict(dataset.manifest, N=len(dataset) + count, augmented=count),
                        dataset.basis)
    return merged


@dataclass
class StrategyResult:
    strategy: str
    precision: float
    recall: float
    accuracy: float  # percent, on the test slice
    balanced_accuracy: float  # percent
    train_size: int
    extra: dict = field(default_factory=dict)


def train_with_plan(train: ToyDataset, plan: TrainingPlan, generator=None,
                    attack_config: AttackConfig | None = None, workers: int | None = 1,
                    hidden: int = 16) -> tuple[ToyClassifier, int]:
    """Train a classifier under one imbalance strategy; returns (model, training-set size)."""
    if plan.strategy == "none":
        model = train_classifier(train, plan.epochs, plan.lr, plan.seed, hidden=hidden,
                                 weight_decay=plan.weight_decay)
        return model, len(train)
    if plan.strategy == "reweight":
        model = train_classifier(train, plan.epochs, plan.lr, plan.seed, hidden=hidden,
                                 weight_decay=plan.weight_decay, weights=reweight(train))
        return model, len(train)
    if plan.strategy == "resample":
        balanced = resample(train, plan.seed)
        return train_classifier(balanced, plan.epochs, plan.lr, plan.seed, hidden=hidden,
                                weight_decay=plan.weight_decay), len(balanced)
    if plan.strategy == "cutmix":
        images, labels = cutmix(train.images(), train.labels(), plan.cutmix_probability,
                                plan.cutmix_alpha, plan.seed)
        model = ToyClassifier(train.basis.base_shape, hidden=hidden, seed=plan.seed)
        model.fit(images, labels, plan.epochs, plan.lr, weight_decay=plan.weight_decay,
                  seed=plan.seed)
        return model, len(images)
    # sia_augment*: attack a baseline, then retrain on the union
    if generator is None or attack_config is None:
        raise ValueError("SIA augmentation needs a generator and an attack config")
    baseline = train_classifier(train, plan.epochs, plan.lr, plan.seed, hidden=hidden,
                                weight_decay=plan.weight_decay)
    augmented = sia_augment(baseline, generator, train, attack_config, plan.augmentation_count,
                            plan.seed, plan.minority_oversample, workers)
    weights = reweight(augmented) if plan.strategy == "sia_augment_reweight" else None
    model = train_classifier(augmented, plan.epochs, plan.lr, plan.seed, hidden=hidden,
                             weight_decay=plan.weight_decay, weights=weights)
    return model, len(augmented)


def compare_strategies(train: ToyDataset, test: ToyDataset, plans: Sequence[TrainingPlan],
                       generator=None, attack_config: AttackConfig | None = None,
                       workers: int | None = 1, hidden: int = 16) -> list[StrategyResult]:
    out = []
    test_images, test_labels = test.images(), test.labels()
    for plan in plans:
        model, size = train_with_plan(train, plan, generator, attack_config, workers, hidden)
        preds = model.predict(test_images)
        rep = classification_metrics(preds, test_labels)
        out.append(StrategyResult(plan.strategy, rep.precision, rep.recall, 100.0 * rep.accuracy,
                                  100.0 * balanced_accuracy(preds, test_labels), size,
                                  {"degenerate": rep.degenerate}))
    return out


def write_strategy_csv(results: Sequence[StrategyResult], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(["strategy", "precision", "recall", "accuracy", "balanced_accuracy",
                         "train_size"])
        for r in results:
            writer.writerow([r.strategy, repr(r.precision), repr(r.recall), repr(r.accuracy),
                             repr(r.balanced_accuracy), r.train_size])
    return path
