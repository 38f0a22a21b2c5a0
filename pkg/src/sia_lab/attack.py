"""Joint attribute + image projected signed-gradient attack, and its baselines.

Every iteration evaluates both gradients at the previous point
``(x_{i-1}, a_{i-1})``, then moves each active space by ``eta * sign(grad)``
and projects it back onto its l-inf ball around the starting point
(intersected with ``[0, 1]``). The adversary is ``G(x_T, a_T)``.

All attacks here run on stacks of samples; a single-sample call is a
batch of one, so per-sample and batched results agree.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .diffcore import NumericError, project_linf

log = logging.getLogger(__name__)

TRACE_MAGIC = b"SIAT"
TRACE_VERSION = 1
DEFAULT_CHUNK = 64


class AttackMode(enum.Enum):
    RECONSTRUCT_ONLY = "OR"
    IMAGE_ONLY = "I"
    IMAGE_PLUS_PARTIAL_ATTR = "I+PA"
    ATTR_ONLY = "A"
    ATTR_PLUS_PARTIAL_IMAGE = "A+PI"
    FULL = "Full"

    @classmethod
    def parse(cls, value) -> "AttackMode":
        if isinstance(value, cls):
            return value
        for m in cls:
            if value in (m.name, m.value) or str(value).upper() == m.name:
                return m
        raise ValueError(f"unknown attack mode {value!r}")

    def active(self, i: int, partial_iters: int) -> tuple[bool, bool]:
        """(attribute space active, image space active) at iteration ``i`` (1-based)."""
        early = i <= partial_iters
        return {
            AttackMode.RECONSTRUCT_ONLY: (False, False),
            AttackMode.IMAGE_ONLY: (False, True),
            AttackMode.IMAGE_PLUS_PARTIAL_ATTR: (early, True),
            AttackMode.ATTR_ONLY: (True, False),
            AttackMode.ATTR_PLUS_PARTIAL_IMAGE: (True, early),
            AttackMode.FULL: (True, True),
        }[self]


@dataclass
class AttackConfig:
    """Step sizes, radii and schedule of one attack.

    ``frozen_attr_caps`` maps attribute index to a radius that replaces
    ``eps_a`` for that attribute (0 freezes it). ``partial_iters`` defaults
    to ``T // 10``.
    """

    eta_a: float = 0.25 / 255
    eta_x: float = 0.25 / 255
    eps_a: float = 1.0
    eps_x: float = 1.5 / 255
    T: int = 200
    mode: AttackMode = AttackMode.FULL
    frozen_attr_caps: dict[int, float] = field(default_factory=dict)
    partial_iters: int | None = None
    seed: int | None = 0

    def __post_init__(self):
        self.mode = AttackMode.parse(self.mode)
        self.frozen_attr_caps = {int(k): float(v) for k, v in (self.frozen_attr_caps or {}).items()}
        if min(self.eta_a, self.eta_x, self.eps_a, self.eps_x) < 0:
            raise ValueError("step sizes and radii must be non-negative")
        if self.T < 0:
            raise ValueError("T must be non-negative")
        if any(v < 0 for v in self.frozen_attr_caps.values()):
            raise ValueError("attribute caps must be non-negative")
        if self.partial_iters is None:
            self.partial_iters = self.T // 10
        if not 0 <= self.partial_iters <= self.T:
            raise ValueError("partial_iters must lie in [0, T]")

    def attr_radii(self, k: int) -> np.ndarray:
        radii = np.full(k, float(self.eps_a))
        for idx, cap in self.frozen_attr_caps.items():
            if not 0 <= idx < k:
                raise ValueError(f"attribute cap index {idx} out of range for K={k}")
            radii[idx] = cap
        return radii

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.name
        d["frozen_attr_caps"] = {str(k): v for k, v in self.frozen_attr_caps.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown attack config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AttackTrace:
    attrs: np.ndarray  # (T+1, K)
    losses: np.ndarray  # (T+1,), loss at G(x_i, a_i)
    final_adversary: np.ndarray
    final_image: np.ndarray  # x_T
    images: np.ndarray | None = None  # (T+1, H, W, C) when recorded
    seed: int | None = None

    @property
    def T(self) -> int:
        return len(self.attrs) - 1

    @property
    def K(self) -> int:
        return self.attrs.shape[1]


@dataclass
class AdversarialExample:
    adversary: np.ndarray
    source_index: int
    success: bool
    trace: AttackTrace | None = None


# --- batched building blocks -------------------------------------------------

def _per_sample_losses(model, xb, gts) -> np.ndarray:
    if hasattr(model, "per_sample_loss"):
        return model.per_sample_loss(xb, gts)
    return np.array([model.loss(x, g) for x, g in zip(xb, gts)])


def _loss_gradients(model, xb, gts) -> np.ndarray:
    if getattr(model, "kind", None) == "binary-classifier":
        return model.loss_gradient(xb, np.asarray(gts))
    if getattr(model, "batched_gradients", False):
        return model.loss_gradient(xb, np.asarray(gts))
    return np.stack([model.loss_gradient(x, g) for x, g in zip(xb, gts)])


def _decode(gen, xb, ab):
    if hasattr(gen, "decode_batch"):
        return gen.decode_batch(xb, ab)
    return np.stack([gen.decode(gen.encode(x), a) for x, a in zip(xb, ab)])


def _pullback(gen, xb, ab, upstream):
    if hasattr(gen, "pullback_batch"):
        return gen.pullback_batch(xb, ab, upstream)
    bundles = [gen.pullback(x, a, u) for x, a, u in zip(xb, ab, upstream)]
    return (np.stack([b.grad_image for b in bundles]),
            np.stack([b.grad_attributes for b in bundles]))


def fooled(model, xb, gts) -> np.ndarray:
    if getattr(model, "kind", None) == "binary-classifier":
        return model.predict(xb) != np.asarray(gts)
    return np.array([bool(model.is_fooled(x, g)) for x, g in zip(xb, gts)])


def _signed_projected(v, grad, eta, center, radius):
    return project_linf(v + eta * np.sign(grad), center, radius, 0.0, 1.0)


class _Failures:
    """Rows that hit a non-finite gradient; they stop moving from then on."""

    def __init__(self, n):
        self.dead = np.zeros(n, dtype=bool)
        self.errors: dict[int, NumericError] = {}

    def scan(self, i, *arrays):
        bad = np.zeros(len(self.dead), dtype=bool)
        for arr in arrays:
            bad |= ~np.isfinite(arr.reshape(len(arr), -1)).all(axis=1)
        for row in np.flatnonzero(bad & ~self.dead):
            self.errors[int(row)] = NumericError("non-finite gradient", iteration=i)
        self.dead |= bad
        return self.dead


def sia_batch(model, generator, x0, a0, gts, config: AttackConfig, record_images: bool = False):
    """Core joint attack over a stack of samples.

    Returns ``(adversaries, traces, successes, errors)`` where ``errors``
    maps row index to the :class:`NumericError` that stopped that row.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    a0 = np.asarray(a0, dtype=np.float64)
    n, k = a0.shape
    radii = config.attr_radii(k)
    x, a = x0.copy(), a0.copy()
    attrs = [a.copy()]
    images = [x.copy()] if record_images else None
    losses = []
    failures = _Failures(n)
    for i in range(1, config.T + 1):
        use_a, use_x = config.mode.active(i, config.partial_iters)
        out = _decode(generator, x, a)
        losses.append(_per_sample_losses(model, out, gts))
        if use_a or use_x:
            upstream = _loss_gradients(model, out, gts)
            g_x, g_a = _pullback(generator, x, a, upstream)
            dead = failures.scan(i, g_x, g_a)
            live = ~dead
            # both updates use gradients taken at (x_{i-1}, a_{i-1})
            if use_a and live.any():
                a_new = _signed_projected(a[live], g_a[live], config.eta_a, a0[live], radii)
                a = a.copy()
                a[live] = a_new
            if use_x and live.any():
                x_new = _signed_projected(x[live], g_x[live], config.eta_x, x0[live], config.eps_x)
                x = x.copy()
                x[live] = x_new
        attrs.append(a.copy())
        if record_images:
            images.append(x.copy())
    adversaries = _decode(generator, x, a)
    losses.append(_per_sample_losses(model, adversaries, gts))
    success = fooled(model, adversaries, gts)
    attrs = np.stack(attrs, axis=1)
    losses = np.stack(losses, axis=1)
    stacked_images = np.stack(images, axis=1) if record_images else None
    traces = [AttackTrace(attrs[r], losses[r], adversaries[r], x[r].copy(),
                          None if stacked_images is None else stacked_images[r])
              for r in range(n)]
    return adversaries, traces, success, failures.errors


def pgd_batch(model, x0, gts, config: AttackConfig, record_images: bool = False):
    """Image-space signed-gradient ascent with l-inf projection, no random start."""
    x0 = np.asarray(x0, dtype=np.float64)
    n = len(x0)
    x = x0.copy()
    images = [x.copy()] if record_images else None
    losses = []
    failures = _Failures(n)
    for i in range(1, config.T + 1):
        losses.append(_per_sample_losses(model, x, gts))
        g = _loss_gradients(model, x, gts)
        live = ~failures.scan(i, g)
        if live.any():
            x = x.copy()
            x[live] = _signed_projected(x[live], g[live], config.eta_x, x0[live], config.eps_x)
        if record_images:
            images.append(x.copy())
    losses.append(_per_sample_losses(model, x, gts))
    success = fooled(model, x, gts)
    losses = np.stack(losses, axis=1)
    stacked = np.stack(images, axis=1) if record_images else None
    traces = [AttackTrace(np.zeros((config.T + 1, 0)), losses[r], x[r].copy(), x[r].copy(),
                          None if stacked is None else stacked[r]) for r in range(n)]
    return x, traces, success, failures.errors


def fgsm_batch(model, x0, gts, eps: float):
    if eps < 0:
        raise ValueError("eps must be non-negative")
    x0 = np.asarray(x0, dtype=np.float64)
    g = _loss_gradients(model, x0, gts)
    failures = _Failures(len(x0))
    dead = failures.scan(0, g)
    adv = np.clip(x0 + eps * np.sign(np.where(dead[(...,) + (None,) * (g.ndim - 1)], 0.0, g)),
                  0.0, 1.0)
    return adv, fooled(model, adv, gts), failures.errors


# --- single-sample API ---------------------------------------------------------

def _raise_first(errors, offset=0):
    if errors:
        row = min(errors)
        err = errors[row]
        err.sample = row + offset
        raise err


def sia_attack(model, generator, x0, a0, ground_truth, config: AttackConfig,
               record_images: bool = False, source_index: int = 0
               ) -> tuple[AdversarialExample, AttackTrace]:
    """Joint attack on one sample; ``x0`` is the generator input image, ``a0`` its attributes."""
    a0 = np.asarray(a0, dtype=np.float64)
    names = getattr(generator, "attribute_names", None)
    if names is not None and len(a0) != len(names):
        raise ValueError(f"attribute vector has length {len(a0)}, generator expects {len(names)}")
    adv, traces, success, errors = sia_batch(model, generator, np.asarray(x0)[None], a0[None],
                                             [ground_truth], config, record_images)
    _raise_first(errors, source_index)
    traces[0].seed = config.seed
    return AdversarialExample(adv[0], source_index, bool(success[0]), traces[0]), traces[0]


def pgd_attack(model, x0, ground_truth, config: AttackConfig, record_images: bool = False,
               source_index: int = 0) -> tuple[AdversarialExample, AttackTrace]:
    adv, traces, success, errors = pgd_batch(model, np.asarray(x0)[None], [ground_truth], config,
                                             record_images)
    _raise_first(errors, source_index)
    return AdversarialExample(adv[0], source_index, bool(success[0]), traces[0]), traces[0]


def fgsm_attack(model, x0, ground_truth, eps: float, source_index: int = 0) -> AdversarialExample:
    """``clip(x0 + eps * sign(grad_x L), 0, 1)``."""
    adv, success, errors = fgsm_batch(model, np.asarray(x0)[None], [ground_truth], eps)
    _raise_first(errors, source_index)
    return AdversarialExample(adv[0], source_index, bool(success[0]))


# --- dataset-level driver --------------------------------------------------------

class BatchAttackError(NumericError):
    """A sample failed; ``results`` holds every sample (``None`` where failed)."""

    def __init__(self, first: NumericError, results, failures: dict[int, NumericError]):
        super().__init__(str(first.args[0]), iteration=first.iteration, sample=first.sample)
        self.results = results
        self.failures = failures


def _ground_truths(model, dataset, indices):
    if getattr(model, "kind", None) == "keypoint-detector":
        return np.stack([dataset.samples[i].keypoints for i in indices])
    return np.array([dataset.samples[i].label for i in indices])


def _run_chunk(args):
    kind, model, generator, bases, attrs, rendered, gts, config, record_images, eps = args
    if kind == "sia":
        adv, traces, success, errors = sia_batch(model, generator, bases, attrs, gts, config,
                                                 record_images)
    elif kind == "pgd":
        adv, traces, success, errors = pgd_batch(model, rendered, gts, config, record_images)
    elif kind == "fgsm":
        adv, success, errors = fgsm_batch(model, rendered, gts, eps)
        traces = [None] * len(adv)
    else:
        raise ValueError(f"unknown attack kind {kind!r}")
    return adv, traces, success, errors


def resolve_workers(workers: int | None = None) -> int:
    env = os.environ.get("SIA_LAB_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, int(workers or 1))


def run_attack_batch(model, generator, dataset, config: AttackConfig, kind: str = "sia",
                     indices: Sequence[int] | None = None, workers: int | None = 1,
                     record_images: bool = False, chunk: int = DEFAULT_CHUNK,
                     eps: float | None = None, on_error: str = "raise"):
    """Attack every sample of a dataset slice.

    Samples are processed in fixed-size chunks regardless of ``workers`` so
    serial and parallel runs produce identical results. Sample ``i`` carries
    seed ``config.seed + i``. With ``on_error="skip"`` failed samples come
    back as ``None`` instead of raising.
    """
    if config.seed is None:
        raise ValueError("attack config needs an explicit seed")
    indices = list(range(len(dataset))) if indices is None else list(indices)
    if not indices:
        raise ValueError("empty dataset slice")
    kind = kind.lower()
    eps = config.eps_x if eps is None else eps
    bases = np.stack([dataset.samples[i].base_image for i in indices])
    attrs = np.stack([dataset.samples[i].attributes for i in indices])
    rendered = None
    if kind in ("pgd", "fgsm"):
        rendered = np.clip(bases + np.tensordot(attrs, dataset.basis.patterns, axes=1), 0.0, 1.0)
    gts = _ground_truths(model, dataset, indices)
    jobs = []
    for s in range(0, len(indices), chunk):
        sl = slice(s, s + chunk)
        jobs.append((kind, model, generator, bases[sl], attrs[sl],
                     None if rendered is None else rendered[sl], gts[sl], config,
                     record_images, eps))
    n_workers = resolve_workers(workers)
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            outputs = list(pool.map(_run_chunk, jobs))
    else:
        outputs = [_run_chunk(j) for j in jobs]
    results: list[tuple[AdversarialExample, AttackTrace | None] | None] = []
    failures: dict[int, NumericError] = {}
    for c, (adv, traces, success, errors) in enumerate(outputs):
        for r in range(len(adv)):
            pos = c * chunk + r
            src = indices[pos]
            if r in errors:
                err = errors[r]
                err.sample = src
                failures[src] = err
                results.append(None)
                continue
            trace = traces[r]
            if trace is not None:
                trace.seed = config.seed + src
            results.append((AdversarialExample(adv[r], src, bool(success[r]), trace), trace))
    if failures and on_error == "raise":
        first = failures[min(failures)]
        raise BatchAttackError(first, results, failures)
    return results


# --- persistence -------------------------------------------------------------

def trace_to_dict(trace: AttackTrace, sample: int, success: bool, names=None) -> dict:
    return {
        "sample": int(sample),
        "seed": trace.seed,
        "success": bool(success),
        "attribute_names": list(names) if names is not None else None,
        "attrs": trace.attrs.tolist(),
        "losses": trace.losses.tolist(),
    }


def save_trace_json(path, trace: AttackTrace, sample: int, success: bool, names=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(trace_to_dict(trace, sample, success, names), separators=(",", ":")))
    return path


def load_trace_json(path) -> dict:
    d = json.loads(Path(path).read_text())
    d["attrs"] = np.array(d["attrs"], dtype=np.float64)
    d["losses"] = np.array(d["losses"], dtype=np.float64)
    return d


def write_image_trajectory(path, images: np.ndarray) -> Path:
    """Binary image trajectory.

    Layout (little-endian): ``b"SIAT"``, u32 version, u32 steps (T+1),
    u32 H, u32 W, u32 C, then ``steps`` float32 frames of ``H*W*C`` values:
    frame 0 is ``x_0``, frame ``i`` is ``x_i - x_{i-1}``.
    """
    images = np.asarray(images, dtype=np.float64)
    steps, h, w, c = images.shape
    frames = np.concatenate([images[:1], np.diff(images, axis=0)], axis=0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<5I", TRACE_VERSION, steps, h, w, c))
        fh.write(frames.astype("<f4").tobytes())
    return path


def read_image_trajectory(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != TRACE_MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, steps, h, w, c = struct.unpack("<5I", data[4:24])
    if version != TRACE_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    frames = np.frombuffer(data, dtype="<f4", offset=24).reshape(steps, h, w, c)
    return np.cumsum(frames.astype(np.float64), axis=0)


def with_mode(config: AttackConfig, mode, **changes) -> AttackConfig:
    return replace(config, mode=AttackMode.parse(mode), **changes)
