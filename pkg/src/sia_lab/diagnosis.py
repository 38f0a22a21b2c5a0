"""Model diagnosis from attack traces: sensitivity vectors, histograms, SDAR."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .attack import AttackConfig, AttackMode, run_attack_batch


@dataclass
class SensitivityReport:
    s: np.ndarray
    normalized: np.ndarray
    attribute_names: tuple[str, ...]
    sample_count: int
    sdar: float
    degenerate: bool = False

    @property
    def K(self) -> int:
        return len(self.s)

    def as_dict(self) -> dict:
        return {"attribute_names": list(self.attribute_names), "s": self.s.tolist(),
                "normalized": self.normalized.tolist(), "sample_count": self.sample_count,
                "sdar": self.sdar, "degenerate": self.degenerate}


def _trajectory(trace) -> np.ndarray:
    attrs = trace.attrs if hasattr(trace, "attrs") else trace
    return np.asarray(attrs, dtype=np.float64)


def sensitivity(traces: Sequence, attribute_names: Sequence[str] | None = None,
                exclude: Sequence[int] = ()) -> SensitivityReport:
    """Mean absolute attribute displacement ``|a_T - a_0|`` over traces.

    ``a_0`` is the pre-attack attribute vector (row 0 of each trace).
    Attributes listed in ``exclude`` (e.g. the one the target itself
    classifies) are dropped from the report.
    """
    if len(traces) == 0:
        raise ValueError("no traces given")
    trajectories = [_trajectory(t) for t in traces]
    k = trajectories[0].shape[1]
    if any(t.shape[1] != k for t in trajectories):
        raise ValueError("traces disagree on the number of attributes")
    displacement = np.stack([np.abs(t[-1] - t[0]) for t in trajectories])
    s = displacement.mean(axis=0)
    names = tuple(attribute_names) if attribute_names is not None else tuple(
        f"a{i}" for i in range(k))
    if len(names) != k:
        raise ValueError("one attribute name per sensitivity entry")
    keep = [i for i in range(k) if i not in set(exclude)]
    return make_report(s[keep], [names[i] for i in keep], len(traces))


def make_report(s, names, count: int) -> SensitivityReport:
    s = np.asarray(s, dtype=np.float64)
    normalized, degenerate = normalize_sensitivity(s)
    return SensitivityReport(s, normalized, tuple(names), int(count), sdar(s), degenerate)


def normalize_sensitivity(s) -> tuple[np.ndarray, bool]:
    """``s / sum(s)``; all-zero input gives zeros and ``degenerate=True``."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("sensitivities must be non-negative")
    total = s.sum()
    if total == 0:
        return np.zeros_like(s), True
    return s / total, False


def top_k(report: SensitivityReport, k: int) -> list[str]:
    """The ``k`` most sensitive attribute names, ties broken by name."""
    if not 1 <= k <= report.K:
        raise ValueError(f"k must lie in [1, {report.K}]")
    order = sorted(range(report.K), key=lambda i: (-report.s[i], report.attribute_names[i]))
    return [report.attribute_names[i] for i in order[:k]]


def sdar(s) -> float:
    """Standard deviation of attribute robustness (population std of ``s``)."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty sensitivity vector")
    return float(np.sqrt(np.mean((s - s.mean()) ** 2)))


def rank_consistency(s1, s2) -> float:
    """Spearman rank correlation between two sensitivity vectors."""
    return float(stats.spearmanr(s1, s2).statistic)


def single_attribute_sensitivity(model, generator, dataset, config: AttackConfig,
                                 indices=None, workers: int | None = 1) -> SensitivityReport:
    """One attribute-only attack per attribute with every other attribute frozen.

    Entry ``k`` is the mean ``|a_T[k] - a_0[k]|`` of run ``k``.
    """
    k = len(generator.attribute_names)
    s = np.zeros(k)
    count = 0
    for j in range(k):
        caps = {i: 0.0 for i in range(k) if i != j}
        if j in config.frozen_attr_caps:
            caps[j] = config.frozen_attr_caps[j]
        cfg = AttackConfig(**{**config.__dict__, "mode": AttackMode.ATTR_ONLY,
                              "frozen_attr_caps": caps})
        results = run_attack_batch(model, generator, dataset, cfg, "sia", indices, workers)
        traces = [r[1] for r in results]
        s[j] = np.mean([abs(t.attrs[-1, j] - t.attrs[0, j]) for t in traces])
        count = len(traces)
    return make_report(s, generator.attribute_names, count)


HISTOGRAM_HEADER = ("attribute", "sensitivity", "normalized")


def export_histogram(report: SensitivityReport, directory, plot: bool = False) -> list[Path]:
    """Write ``histogram.csv`` (canonical) and optionally ``histogram.png``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / "histogram.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(HISTOGRAM_HEADER)
        for name, s, n in zip(report.attribute_names, report.s, report.normalized):
            writer.writerow([name, repr(float(s)), repr(float(n))])
    paths = [csv_path]
    if plot:
        paths.append(_plot_histogram(report, directory / "histogram.png"))
    return paths


def read_histogram(path, sample_count: int = 0) -> SensitivityReport:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != HISTOGRAM_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    names = tuple(r[0] for r in rows[1:])
    s = np.array([float(r[1]) for r in rows[1:]])
    normalized = np.array([float(r[2]) for r in rows[1:]])
    return SensitivityReport(s, normalized, names, sample_count, sdar(s), not s.any())


def _plot_histogram(report: SensitivityReport, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, 0.5 * report.K + 2), 3))
    ax.bar(range(report.K), report.normalized, color="tab:blue")
    ax.set_xticks(range(report.K))
    ax.set_xticklabels(report.attribute_names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("normalized sensitivity")
    ax.set_title(f"SDAR = {report.sdar:.4f}, N = {report.sample_count}")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
