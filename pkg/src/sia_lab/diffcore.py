"""Differentiable contracts and the primitives of the joint signed-gradient update.

Images are ``(H, W, C)`` float arrays in ``[0, 1]``; attribute vectors are
length-``K`` float arrays in ``[0, 1]``. Models and generators are duck-typed
against :class:`TargetModel` and :class:`AttributeGenerator`; the only thing
asked of a gradient is that it passes :func:`check_gradient`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence, runtime_checkable

import numpy as np

FD_STEP = 1e-4


class NumericError(ArithmeticError):
    """Raised when a gradient or function value is NaN or infinite.

    ``iteration`` and ``sample`` are filled in by callers that know them.
    """

    def __init__(self, message: str, iteration: int | None = None, sample: int | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.sample = sample

    def __str__(self) -> str:
        parts = [super().__str__()]
        if self.sample is not None:
            parts.append(f"sample={self.sample}")
        if self.iteration is not None:
            parts.append(f"iteration={self.iteration}")
        return " ".join(parts)


@dataclass(frozen=True)
class AttributeVector:
    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or len(values) != len(self.names):
            raise ValueError("attribute values and names must have equal length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("attribute names must be unique")
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise ValueError("attribute values must lie in [0, 1]")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", tuple(self.names))

    def __len__(self) -> int:
        return len(self.names)


@dataclass
class GradientBundle:
    grad_image: np.ndarray
    grad_attributes: np.ndarray

    def __post_init__(self):
        ensure_finite(self.grad_image, "image gradient")
        ensure_finite(self.grad_attributes, "attribute gradient")


@runtime_checkable
class TargetModel(Protocol):
    """Model under attack.

    ``kind`` is ``"binary-classifier"`` (ground truth is a 0/1 label, loss is
    binary cross-entropy) or ``"keypoint-detector"`` (ground truth is a
    ``(J, 2)`` keypoint array, loss is heatmap MSE).
    """

    kind: str

    def forward(self, x: np.ndarray) -> np.ndarray: ...

    def loss(self, x: np.ndarray, ground_truth: Any) -> float: ...

    def loss_gradient(self, x: np.ndarray, ground_truth: Any) -> np.ndarray: ...

    def is_fooled(self, x: np.ndarray, ground_truth: Any) -> bool: ...


@runtime_checkable
class AttributeGenerator(Protocol):
    attribute_names: tuple[str, ...]

    def encode(self, x: np.ndarray) -> np.ndarray: ...

    def decode(self, latent: np.ndarray, a: np.ndarray) -> np.ndarray: ...

    def pullback(self, x: np.ndarray, a: np.ndarray, upstream: np.ndarray) -> GradientBundle: ...


def ensure_finite(arr, what: str = "value") -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what}")


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def signed_step(v, grad, eta: float) -> np.ndarray:
    """Return ``v + eta * sign(grad)`` with ``sign(0) == 0``."""
    v = np.asarray(v, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    _check_same_shape(v, grad, "signed_step")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    ensure_finite(grad, "gradient")
    return v + eta * np.sign(grad)


def project_linf(v, center, epsilon, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Clip ``v`` into the l-inf ball around ``center``, then into ``[lo, hi]``.

    ``epsilon`` may be a scalar or an array broadcastable to ``v`` (per-attribute caps).
    """
    v = np.asarray(v, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    _check_same_shape(v, center, "project_linf")
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if np.any(epsilon < 0):
        raise ValueError("epsilon must be non-negative")
    if lo > hi:
        raise ValueError("lo must not exceed hi")
    out = np.clip(v, center - epsilon, center + epsilon)
    return np.clip(out, lo, hi)


def finite_difference_gradient(f: Callable[[np.ndarray], float], point, h: float = FD_STEP,
                               coords: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``point``.

    With ``coords`` (flat indices) only those coordinates are estimated; the
    rest of the returned array is zero.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    point = np.asarray(point, dtype=np.float64)
    flat = point.ravel()
    grad = np.zeros_like(flat)
    indices = range(flat.size) if coords is None else coords
    for i in indices:
        probe = flat.copy()
        probe[i] = flat[i] + h
        f_plus = f(probe.reshape(point.shape))
        probe[i] = flat[i] - h
        f_minus = f(probe.reshape(point.shape))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"function is non-finite near coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(point.shape)


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


@dataclass
class GradientCheckReport:
    passed: bool
    max_relative_error: float
    probes: int
    tol: float
    errors: list[float] = field(default_factory=list)


def _probe_coords(rng: np.random.Generator, size: int, n: int) -> np.ndarray:
    return rng.choice(size, size=min(n, size), replace=False)


def check_gradient(target, probes: int = 8, tol: float = 1e-3, seed: int = 0,
                   coords_per_probe: int = 12, h: float = FD_STEP) -> GradientCheckReport:
    """Compare analytic and central-difference gradients on random probes.

    ``target`` is either a target model (must expose ``image_shape`` and
    ``random_ground_truth(rng)``) or an attribute generator (must expose
    ``image_shape``). Probe images are drawn away from ``[0, 1]`` edges so
    clipping kinks are not straddled by the finite-difference stencil.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = np.random.default_rng(seed)
    shape = tuple(target.image_shape)
    errors: list[float] = []
    is_generator = hasattr(target, "pullback")
    for _ in range(probes):
        x = rng.uniform(0.2, 0.8, size=shape)
        if is_generator:
            errors.extend(_check_generator_probe(target, x, rng, coords_per_probe, h))
        else:
            gt = target.random_ground_truth(rng)
            analytic = target.loss_gradient(x, gt)
            idx = _probe_coords(rng, x.size, coords_per_probe)
            numeric = finite_difference_gradient(lambda z: target.loss(z, gt), x, h, coords=idx)
            errors.extend(relative_error(analytic.ravel()[idx], numeric.ravel()[idx]).tolist())
    worst = float(max(errors)) if errors else 0.0
    return GradientCheckReport(passed=worst <= tol, max_relative_error=worst, probes=probes,
                               tol=tol, errors=errors)


def _check_generator_probe(gen, x, rng, n_coords, h):
    k = len(gen.attribute_names)
    a = rng.uniform(0.0, 1.0, size=k)
    upstream = rng.normal(size=x.shape)
    # scalar of the output: <upstream, G(x, a)>
    bundle = gen.pullback(x, a, upstream)

    def through_image(z):
        return float(np.sum(upstream * gen.decode(gen.encode(z), a)))

    def through_attrs(b):
        return float(np.sum(upstream * gen.decode(gen.encode(x), b)))

    # keep only coordinates whose stencil does not cross a clip boundary
    out = gen.decode(gen.encode(x), a)
    inner = np.flatnonzero((out.ravel() > 2 * h) & (out.ravel() < 1 - 2 * h))
    idx = rng.choice(inner, size=min(n_coords, inner.size), replace=False) if inner.size else []
    errs = []
    if len(idx):
        num_x = finite_difference_gradient(through_image, x, h, coords=idx)
        errs.extend(relative_error(bundle.grad_image.ravel()[idx], num_x.ravel()[idx]).tolist())
    # attribute probes are only valid when no pixel's clip state flips within +-h
    attr_ok = [j for j in range(k) if _attr_stencil_clean(gen, x, a, j, h)]
    if attr_ok:
        num_a = finite_difference_gradient(through_attrs, a, h, coords=attr_ok)
        errs.extend(relative_error(bundle.grad_attributes[attr_ok], num_a[attr_ok]).tolist())
    return errs


def _attr_stencil_clean(gen, x, a, j, h) -> bool:
    lo, hi = a.copy(), a.copy()
    lo[j] -= h
    hi[j] += h
    z = gen.encode(x)
    masks = [_unclipped(gen.decode_unclamped(z, b)) if hasattr(gen, "decode_unclamped") else None
             for b in (lo, a, hi)]
    if masks[0] is None:
        return True
    return bool(np.array_equal(masks[0], masks[1]) and np.array_equal(masks[1], masks[2]))


def _unclipped(raw: np.ndarray) -> np.ndarray:
    return (raw > 0.0) & (raw < 1.0)
