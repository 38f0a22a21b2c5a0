"""Synthetic attribute-parameterized image domain and its analytic generator.

An image is ``clamp(base + sum_k a_k * P_k)``: ``base`` is a smooth random
field (the "identity" the encoder keeps), ``P_k`` is the additive pattern of
attribute ``k``. The generator's encoder is the identity on the base image,
so every gradient through it is exact.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from ..diffcore import GradientBundle

log = logging.getLogger(__name__)

DEFAULT_SHAPE = (32, 32, 3)
ATTRIBUTE_POOL = (
    "Bald", "Bangs", "Black_Hair", "Blond_Hair", "Brown_Hair", "Bushy_Eyebrows", "Eyeglasses",
    "Male", "Mouth_Slightly_Open", "Mustache", "No_Beard", "Pale_Skin", "Young", "Smiling",
    "Wearing_Lipstick",
)
KEYPOINT_SHIFT = 3.0
MARKER_DEPTH = 0.35
MARKER_SIGMA = 0.9
MARKER_COLORS = np.array([[1.0, 0.2, 0.2], [0.2, 0.2, 1.0], [0.2, 1.0, 0.2], [0.8, 0.8, 0.2]])


def attribute_names(k: int) -> tuple[str, ...]:
    if k <= len(ATTRIBUTE_POOL):
        return tuple(f"a{i}_{ATTRIBUTE_POOL[i]}" for i in range(k))
    return tuple(f"a{i}" for i in range(k))


@dataclass
class PatternBasis:
    patterns: np.ndarray  # (K, H, W, C)
    names: tuple[str, ...]

    def __post_init__(self):
        self.patterns = np.asarray(self.patterns, dtype=np.float64)
        if self.patterns.ndim != 4:
            raise ValueError("patterns must be (K, H, W, C)")
        if len(self.names) != self.patterns.shape[0]:
            raise ValueError("one name per pattern")
        if np.abs(self.patterns).max(initial=0.0) > 1.0:
            raise ValueError("pattern entries must lie in [-1, 1]")

    @property
    def K(self) -> int:
        return self.patterns.shape[0]

    @property
    def base_shape(self) -> tuple[int, int, int]:
        return tuple(self.patterns.shape[1:])

    def min_pairwise_distance(self) -> float:
        best = np.inf
        for i in range(self.K):
            for j in range(i + 1, self.K):
                best = min(best, float(np.abs(self.patterns[i] - self.patterns[j]).max()))
        return best


def _blob(shape, center, sigma):
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w]
    return np.exp(-((rr - center[0]) ** 2 + (cc - center[1]) ** 2) / (2.0 * sigma ** 2))


def make_basis(K: int, shape=DEFAULT_SHAPE, amplitude: float = 0.35, seed: int = 0,
               primary_gain: float = 1.0) -> PatternBasis:
    """Procedural basis: each pattern is one or two coloured Gaussian blobs.

    ``primary_gain`` scales pattern 0 (the label-carrying attribute in the
    default world) relative to the others.
    """
    h, w, c = shape
    rng = np.random.default_rng([seed, 0xBA515])
    patterns = np.zeros((K, h, w, c))
    for k in range(K):
        for _ in range(1 + (k % 2)):
            center = rng.uniform([0.15 * h, 0.15 * w], [0.85 * h, 0.85 * w])
            sigma = rng.uniform(0.08, 0.16) * min(h, w)
            color = rng.uniform(0.4, 1.0, size=c) * rng.choice([-1.0, 1.0], size=c)
            patterns[k] += _blob((h, w), center, sigma)[..., None] * color
        peak = np.abs(patterns[k]).max()
        gain = primary_gain if k == 0 else 1.0
        patterns[k] *= min(amplitude * gain, 1.0) / peak
    return PatternBasis(patterns, attribute_names(K))


def render_unclamped(basis: PatternBasis, base: np.ndarray, a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (basis.K,):
        raise ValueError(f"expected {basis.K} attributes, got shape {a.shape}")
    if base.shape != basis.base_shape:
        raise ValueError(f"base shape {base.shape} does not match basis {basis.base_shape}")
    return base + np.tensordot(a, basis.patterns, axes=1)


def render(basis: PatternBasis, base: np.ndarray, a) -> np.ndarray:
    """``clamp(base + sum_k a_k P_k)`` into ``[0, 1]``."""
    return np.clip(render_unclamped(basis, base, a), 0.0, 1.0)


class AnalyticGenerator:
    """Attribute-conditioned generator whose decoder is :func:`render`.

    The latent code is the base image itself (identity encoder).
    """

    def __init__(self, basis: PatternBasis):
        self.basis = basis
        self.attribute_names = basis.names
        self.image_shape = basis.base_shape

    def encode(self, x: np.ndarray) -> np.ndarray:
        return np.array(x, dtype=np.float64, copy=True)

    def decode(self, latent: np.ndarray, a) -> np.ndarray:
        return render(self.basis, latent, a)

    def decode_unclamped(self, latent: np.ndarray, a) -> np.ndarray:
        return render_unclamped(self.basis, latent, a)

    def decode_batch(self, xb: np.ndarray, ab: np.ndarray) -> np.ndarray:
        return np.clip(xb + np.tensordot(ab, self.basis.patterns, axes=1), 0.0, 1.0)

    def pullback_batch(self, xb, ab, upstream):
        """Batched :meth:`pullback`; returns ``(grad_images, grad_attributes)``."""
        raw = xb + np.tensordot(ab, self.basis.patterns, axes=1)
        masked = upstream * ((raw > 0.0) & (raw < 1.0))
        grad_a = np.tensordot(masked, self.basis.patterns, axes=([1, 2, 3], [1, 2, 3]))
        return masked, grad_a

    def __call__(self, x, a) -> np.ndarray:
        return self.decode(self.encode(x), a)

    def pullback(self, x: np.ndarray, a, upstream: np.ndarray) -> GradientBundle:
        """Gradients of ``<upstream, G(x, a)>`` w.r.t. ``x`` and ``a``.

        The clamp passes gradient only where the pre-clamp value is strictly
        inside ``(0, 1)``.
        """
        raw = render_unclamped(self.basis, x, a)
        masked = upstream * ((raw > 0.0) & (raw < 1.0))
        grad_a = np.tensordot(self.basis.patterns, masked, axes=([1, 2, 3], [0, 1, 2]))
        return GradientBundle(grad_image=masked, grad_attributes=grad_a)


@dataclass(frozen=True)
class LabelRule:
    """``label = 1`` iff ``a[attribute] >= threshold``."""

    attribute: int = 0
    threshold: float = 0.5

    def __call__(self, a) -> int:
        return int(a[self.attribute] >= self.threshold)

    def to_dict(self) -> dict:
        return {"kind": "threshold", "attribute": self.attribute, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelRule":
        if d.get("kind", "threshold") != "threshold":
            raise ValueError(f"unknown label rule kind {d.get('kind')!r}")
        return cls(int(d["attribute"]), float(d["threshold"]))


@dataclass
class ToySample:
    base_image: np.ndarray
    attributes: np.ndarray
    label: int
    keypoints: np.ndarray  # (J, 2) float (row, col)

    def __post_init__(self):
        h, w = self.base_image.shape[:2]
        kp = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        if np.any(kp < 0) or np.any(kp[:, 0] > h - 1) or np.any(kp[:, 1] > w - 1):
            raise ValueError("keypoints must lie inside the image")
        self.keypoints = kp
        self.attributes = np.asarray(self.attributes, dtype=np.float64)


@dataclass
class ToyDataset:
    samples: list[ToySample]
    manifest: dict
    basis: PatternBasis = field(repr=False, default=None)

    def __post_init__(self):
        if self.basis is None:
            self.basis = basis_from_manifest(self.manifest)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def generator(self) -> AnalyticGenerator:
        return AnalyticGenerator(self.basis)

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return self.basis.names

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def bases(self) -> np.ndarray:
        return np.stack([s.base_image for s in self.samples])

    def attributes(self) -> np.ndarray:
        return np.stack([s.attributes for s in self.samples])

    def keypoints(self) -> np.ndarray:
        return np.stack([s.keypoints for s in self.samples])

    def images(self) -> np.ndarray:
        """Rendered images ``G(base, a)`` for every sample, ``(N, H, W, C)``."""
        raw = self.bases() + np.tensordot(self.attributes(), self.basis.patterns, axes=1)
        return np.clip(raw, 0.0, 1.0)

    def subset(self, indices: Sequence[int], **manifest_updates) -> "ToyDataset":
        """Dataset over ``indices``; samples are shared with ``self``, not copied."""
        samples = [self.samples[i] for i in indices]
        manifest = dict(self.manifest, N=len(samples), parent_N=self.manifest.get("N"),
                        **manifest_updates)
        return ToyDataset(samples, manifest, self.basis)

    def split(self, n_first: int) -> tuple["ToyDataset", "ToyDataset"]:
        n = len(self)
        return (self.subset(range(min(n_first, n)), split="head"),
                self.subset(range(min(n_first, n), n), split="tail"))


def basis_from_manifest(manifest: dict) -> PatternBasis:
    b = manifest["basis"]
    return make_basis(manifest["K"], tuple(manifest["image_size"]), b["amplitude"], b["seed"],
                      b.get("primary_gain", 1.0))


def smooth_field(rng: np.random.Generator, shape, coarse: int = 4, lo: float = 0.3,
                 hi: float = 0.7) -> np.ndarray:
    h, w, c = shape
    coarse_grid = rng.uniform(lo, hi, size=(coarse, coarse, c))
    field_ = ndimage.zoom(coarse_grid, (h / coarse, w / coarse, 1), order=1, mode="nearest")
    return field_[:h, :w, :]


def keypoint_anchors(shape, n_keypoints: int = 2) -> np.ndarray:
    h, w = shape[:2]
    anchors = np.array([[0.3, 0.3], [0.62, 0.62], [0.3, 0.62], [0.62, 0.3]])[:n_keypoints]
    return anchors * np.array([h - 1, w - 1])


def place_keypoints(a: np.ndarray, shape, n_keypoints: int = 2) -> np.ndarray:
    """Anchor positions shifted by designated attributes.

    Keypoint ``j`` moves ``KEYPOINT_SHIFT * a_{j+1}`` pixels: even ``j`` along
    columns, odd ``j`` along rows.
    """
    kp = keypoint_anchors(shape, n_keypoints).copy()
    for j in range(n_keypoints):
        designated = (j + 1) % len(a)
        kp[j, (j + 1) % 2] += KEYPOINT_SHIFT * a[designated]
    return kp


def draw_markers(base: np.ndarray, keypoints: np.ndarray) -> np.ndarray:
    h, w, c = base.shape
    out = base.copy()
    for j, (r, col) in enumerate(keypoints):
        dot = _blob((h, w), (r, col), MARKER_SIGMA)[..., None]
        color = MARKER_COLORS[j % len(MARKER_COLORS), :c]
        out -= MARKER_DEPTH * dot * color
    return out


def generate_dataset(K: int = 6, N: int = 2000, image_size=DEFAULT_SHAPE,
                     label_rule: Callable | None = None, seed: int = 0,
                     amplitude: float = 0.35, primary_gain: float = 1.0, noise: float = 0.02,
                     n_keypoints: int = 2, spurious: Sequence[float] | None = None) -> ToyDataset:
    """Deterministic toy dataset of ``N`` samples with ``K`` binary attributes.

    Every attribute is marginally Bernoulli(0.5). ``spurious[k-1]`` is the
    probability that attribute ``k`` copies attribute 0 instead of being drawn
    independently, which plants label-correlated shortcuts of graded strength.
    Base images are quantized to 8 bits so the PNG round trip is exact.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    if N < 1:
        raise ValueError("N must be >= 1")
    label_rule = LabelRule() if label_rule is None else label_rule
    spurious = np.zeros(K - 1) if spurious is None else np.asarray(spurious, dtype=np.float64)
    if spurious.shape != (K - 1,) or np.any(spurious < 0) or np.any(spurious > 1):
        raise ValueError("spurious needs K-1 probabilities in [0, 1]")
    shape = tuple(int(v) for v in image_size)
    basis = make_basis(K, shape, amplitude, seed, primary_gain)
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(N):
        a = (rng.random(K) < 0.5).astype(np.float64)
        copy = rng.random(K - 1) < spurious
        a[1:][copy] = a[0]
        kp = place_keypoints(a, shape, n_keypoints)
        base = smooth_field(rng, shape) + noise * rng.standard_normal(shape)
        base = draw_markers(base, kp)
        base = np.round(np.clip(base, 0.0, 1.0) * 255.0) / 255.0
        samples.append(ToySample(base, a, int(label_rule(a)), kp))
    labels = np.array([s.label for s in samples])
    manifest = {
        "seed": int(seed), "K": int(K), "N": int(N), "image_size": list(shape),
        "label_rule": label_rule.to_dict() if hasattr(label_rule, "to_dict") else repr(label_rule),
        "basis": {"amplitude": amplitude, "seed": int(seed), "primary_gain": primary_gain},
        "noise": noise, "n_keypoints": n_keypoints, "spurious": spurious.tolist(), "positive_fraction": float(labels.mean()),
        "attribute_names": list(basis.names), "warnings": [],
    }
    if labels.min() == labels.max():
        msg = f"degenerate label rule: every sample has label {labels[0]}"
        manifest["warnings"].append(msg)
        warnings.warn(msg)
    return ToyDataset(samples, manifest, basis)


def regenerate(manifest: dict) -> ToyDataset:
    rule = manifest["label_rule"]
    if not isinstance(rule, dict):
        raise ValueError("only serializable label rules can be regenerated")
    return generate_dataset(manifest["K"], manifest["N"], tuple(manifest["image_size"]),
                            LabelRule.from_dict(rule), manifest["seed"],
                            manifest["basis"]["amplitude"],
                            manifest["basis"].get("primary_gain", 1.0), manifest["noise"],
                            manifest["n_keypoints"], manifest.get("spurious"))


def heatmap_from_keypoints(points, shape, sigma: float = 1.5) -> np.ndarray:
    """One Gaussian heatmap per keypoint, ``(J, H, W)``, peak 1.0 at the nearest pixel."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = shape[:2]
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if np.any(pts < 0) or np.any(pts[:, 0] > h - 1) or np.any(pts[:, 1] > w - 1):
        raise ValueError("keypoint out of bounds")
    rr, cc = np.mgrid[0:h, 0:w]
    maps = np.empty((len(pts), h, w))
    for j, (r, c) in enumerate(pts):
        nr, nc = np.rint(r), np.rint(c)
        maps[j] = np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2.0 * sigma ** 2))
        maps[j] /= maps[j][int(nr), int(nc)]
        np.minimum(maps[j], 1.0, out=maps[j])
    return maps


# --- on-disk layout: manifest.json, samples.json, images/NNNNNN.png ---

def save_dataset(dataset: ToyDataset, directory) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(dataset.samples):
        rel = f"images/{i:06d}.png"
        pixels = np.round(np.clip(s.base_image, 0, 1) * 255.0).astype(np.uint8)
        Image.fromarray(pixels.squeeze() if pixels.shape[2] == 1 else pixels).save(directory / rel)
        records.append({"image": rel, "attributes": [float(v) for v in s.attributes],
                        "label": int(s.label), "keypoints": s.keypoints.tolist()})
    (directory / "manifest.json").write_text(json.dumps(dataset.manifest, indent=2, sort_keys=True))
    (directory / "samples.json").write_text(json.dumps(records, indent=1))
    return directory


def load_dataset(directory) -> ToyDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    records = json.loads((directory / "samples.json").read_text())
    samples = []
    for rec in records:
        pixels = np.asarray(Image.open(directory / rec["image"]), dtype=np.float64) / 255.0
        if pixels.ndim == 2:
            pixels = pixels[..., None]
        samples.append(ToySample(pixels, np.array(rec["attributes"]), int(rec["label"]),
                                 np.array(rec["keypoints"])))
    return ToyDataset(samples, manifest)
