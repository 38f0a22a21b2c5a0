"""Small trainable target models with analytic gradients.

Both models accept a single ``(H, W, C)`` image or a ``(N, H, W, C)`` batch.
Parameters are snapped to float32 after every training call so that a
checkpoint round trip reproduces the in-memory model exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..diffcore import NumericError, ensure_finite
from .world import heatmap_from_keypoints

CLASSIFIER = "binary-classifier"
DETECTOR = "keypoint-detector"
CHECKPOINT_MAGIC = b"SIAM"


class TrainingError(RuntimeError):
    pass


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    return x, False


def _snap(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


class ToyClassifier:
    """Average-pool -> tanh hidden layer -> logit.

    The loss is binary cross-entropy on the logit; labels may be soft
    (CutMix) and samples may carry weights (reweighting).
    """

    kind = CLASSIFIER

    def __init__(self, image_shape, pool: int = 4, hidden: int = 16, seed: int = 0,
                 params: dict | None = None):
        self.image_shape = tuple(image_shape)
        self.pool = pool
        self.hidden = hidden
        self.seed = seed
        h, w, c = self.image_shape
        if h % pool or w % pool:
            raise ValueError("image size must be divisible by the pool size")
        self.n_features = (h // pool) * (w // pool) * c
        if params is None:
            rng = np.random.default_rng([seed, 0xC1A5])
            params = {
                "W1": rng.normal(0.0, 1.0 / np.sqrt(self.n_features), (self.n_features, hidden)),
                "b1": np.zeros(hidden),
                "w2": rng.normal(0.0, 1.0 / np.sqrt(hidden), hidden),
                "b2": np.zeros(1),
            }
        self.params = {k: _snap(v) for k, v in params.items()}

    # -- structure -------------------------------------------------------
    def config(self) -> dict:
        return {"kind": self.kind, "image_shape": list(self.image_shape), "pool": self.pool,
                "hidden": self.hidden, "seed": self.seed}

    def copy(self) -> "ToyClassifier":
        return ToyClassifier(self.image_shape, self.pool, self.hidden, self.seed,
                             {k: v.copy() for k, v in self.params.items()})

    def _features(self, xb):
        n, h, w, c = xb.shape
        p = self.pool
        pooled = xb.reshape(n, h // p, p, w // p, p, c).mean(axis=(2, 4))
        return pooled.reshape(n, -1) - 0.5

    def _features_backward(self, g_feat, n):
        h, w, c = self.image_shape
        p = self.pool
        g = g_feat.reshape(n, h // p, 1, w // p, 1, c) / (p * p)
        return np.broadcast_to(g, (n, h // p, p, w // p, p, c)).reshape(n, h, w, c)

    def _forward_parts(self, xb):
        f = self._features(xb)
        hid = np.tanh(f @ self.params["W1"] + self.params["b1"])
        z = hid @ self.params["w2"] + self.params["b2"][0]
        return f, hid, z

    # -- TargetModel contract -------------------------------------------
    def logits(self, x) -> np.ndarray:
        xb, single = _as_batch(x)
        z = self._forward_parts(xb)[2]
        return z[0] if single else z

    def forward(self, x):
        """Probability of the positive class."""
        return _sigmoid(self.logits(x))

    def predict(self, x):
        z = self.logits(x)
        return (np.asarray(z) >= 0.0).astype(np.int64)

    def loss(self, x, ground_truth, weights=None) -> float:
        xb, _ = _as_batch(x)
        y = np.broadcast_to(np.asarray(ground_truth, dtype=np.float64), (len(xb),))
        z = self._forward_parts(xb)[2]
        per = _softplus(z) - y * z
        if weights is not None:
            return float(np.sum(per * weights) / np.sum(weights))
        return float(per.mean())

    def per_sample_loss(self, xb, labels) -> np.ndarray:
        z = self._forward_parts(np.asarray(xb, dtype=np.float64))[2]
        y = np.asarray(labels, dtype=np.float64)
        return _softplus(z) - y * z

    def loss_gradient(self, x, ground_truth) -> np.ndarray:
        """d loss / d image; for a batch, the per-sample loss gradients (unaveraged)."""
        xb, single = _as_batch(x)
        y = np.broadcast_to(np.asarray(ground_truth, dtype=np.float64), (len(xb),))
        _, hid, z = self._forward_parts(xb)
        dz = _sigmoid(z) - y
        dpre = dz[:, None] * self.params["w2"] * (1.0 - hid ** 2)
        g = self._features_backward(dpre @ self.params["W1"].T, len(xb))
        return g[0] if single else g

    def is_fooled(self, x, ground_truth) -> bool:
        return int(self.predict(x)) != int(ground_truth)

    def random_ground_truth(self, rng: np.random.Generator):
        return int(rng.integers(0, 2))

    # -- training ---------------------------------------------------------
    def param_gradients(self, xb, y, weights=None, features=None) -> tuple[float, dict]:
        f = self._features(xb) if features is None else features
        n = len(f)
        weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        wsum = weights.sum()
        hid = np.tanh(f @ self.params["W1"] + self.params["b1"])
        z = hid @ self.params["w2"] + self.params["b2"][0]
        loss = float(np.sum((_softplus(z) - y * z) * weights) / wsum)
        dz = (_sigmoid(z) - y) * weights / wsum
        grads = {"w2": hid.T @ dz, "b2": np.array([dz.sum()])}
        dpre = dz[:, None] * self.params["w2"] * (1.0 - hid ** 2)
        grads["W1"] = f.T @ dpre
        grads["b1"] = dpre.sum(axis=0)
        return loss, grads

    def fit(self, images, labels, epochs: int, lr: float, weights=None, weight_decay: float = 0.0,
            batch_size: int | None = None, seed: int = 0) -> list[float]:
        """Gradient descent on weighted BCE; in-place.

        ``batch_size=None`` is full-batch descent. With a batch size, each
        epoch visits a seeded permutation of the data in fixed-size chunks.
        """
        feats = self._features(np.asarray(images, dtype=np.float64))
        y = np.asarray(labels, dtype=np.float64)
        history = []
        rng = np.random.default_rng([seed, 0x5EED])
        n = len(feats)
        for epoch in range(epochs):
            if batch_size is None:
                batches = [np.arange(n)]
            else:
                order = rng.permutation(n)
                batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
            for idx in batches:
                wb = None if weights is None else np.asarray(weights)[idx]
                loss, grads = self.param_gradients(None, y[idx], wb, features=feats[idx])
                for k, g in grads.items():
                    ensure_finite(g, f"gradient of {k}")
                    self.params[k] = self.params[k] - lr * (g + weight_decay * self.params[k]
                                                            * (k in ("W1", "w2")))
                history.append(loss)
            if not np.isfinite(history[-1]):
                raise NumericError("training diverged", iteration=epoch)
        self.params = {k: _snap(v) for k, v in self.params.items()}
        return history


class ToyKeypointDetector:
    """Linear ``k x k`` convolution to one heatmap per keypoint, plus per-channel bias.

    Loss is the mean squared error against Gaussian ground-truth heatmaps.
    """

    kind = DETECTOR
    batched_gradients = True

    def __init__(self, image_shape, n_keypoints: int = 2, kernel: int = 5, sigma: float = 1.5,
                 seed: int = 0, params: dict | None = None, success_fraction: float = 0.10):
        self.image_shape = tuple(image_shape)
        self.n_keypoints = n_keypoints
        self.kernel = kernel
        self.sigma = sigma
        self.seed = seed
        self.success_fraction = success_fraction
        c = self.image_shape[2]
        if params is None:
            rng = np.random.default_rng([seed, 0xDE7])
            params = {"K": rng.normal(0.0, 0.01, (kernel, kernel, c, n_keypoints)),
                      "b": np.zeros(n_keypoints)}
        self.params = {k: _snap(v) for k, v in params.items()}

    def config(self) -> dict:
        return {"kind": self.kind, "image_shape": list(self.image_shape),
                "n_keypoints": self.n_keypoints, "kernel": self.kernel, "sigma": self.sigma,
                "seed": self.seed, "success_fraction": self.success_fraction}

    def copy(self) -> "ToyKeypointDetector":
        return ToyKeypointDetector(self.image_shape, self.n_keypoints, self.kernel, self.sigma,
                                   self.seed, {k: v.copy() for k, v in self.params.items()},
                                   self.success_fraction)

    @property
    def diagonal(self) -> float:
        h, w = self.image_shape[:2]
        return float(np.hypot(h, w))

    def _patches(self, xb):
        r = self.kernel // 2
        padded = np.pad(xb - 0.5, ((0, 0), (r, r), (r, r), (0, 0)))
        # (N, H, W, C, k, k) -> (N, H, W, k, k, C)
        win = sliding_window_view(padded, (self.kernel, self.kernel), axis=(1, 2))
        return win.transpose(0, 1, 2, 4, 5, 3)

    def heatmaps(self, x) -> np.ndarray:
        xb, single = _as_batch(x)
        out = np.einsum("nhwijc,ijcq->nqhw", self._patches(xb), self.params["K"],
                        optimize=True)
        out = out + self.params["b"][None, :, None, None]
        return out[0] if single else out

    def forward(self, x):
        return self.heatmaps(x)

    def _targets(self, keypoints, n):
        kp = np.asarray(keypoints, dtype=np.float64)
        if kp.ndim == 2:
            kp = np.broadcast_to(kp, (n,) + kp.shape)
        return np.stack([heatmap_from_keypoints(k, self.image_shape, self.sigma) for k in kp])

    def loss(self, x, ground_truth) -> float:
        xb, _ = _as_batch(x)
        diff = self.heatmaps(xb) - self._targets(ground_truth, len(xb))
        return float(np.mean(diff ** 2))

    def per_sample_loss(self, xb, keypoints) -> np.ndarray:
        xb = np.asarray(xb, dtype=np.float64)
        diff = self.heatmaps(xb) - self._targets(keypoints, len(xb))
        return np.mean(diff ** 2, axis=(1, 2, 3))

    def loss_gradient(self, x, ground_truth) -> np.ndarray:
        xb, single = _as_batch(x)
        diff = self.heatmaps(xb) - self._targets(ground_truth, len(xb))
        # per-sample mean over (J, H, W)
        g_out = 2.0 * diff / diff[0].size
        g = self._conv_transpose(g_out)
        return g[0] if single else g

    def _conv_transpose(self, g_out):
        k, r = self.kernel, self.kernel // 2
        n, _, h, w = g_out.shape
        c = self.image_shape[2]
        g_pad = np.zeros((n, h + 2 * r, w + 2 * r, c))
        for i in range(k):
            for j in range(k):
                g_pad[:, i:i + h, j:j + w, :] += np.einsum("nqhw,cq->nhwc", g_out,
                                                           self.params["K"][i, j])
        return g_pad[:, r:r + h, r:r + w, :]

    def predict_keypoints(self, x) -> np.ndarray:
        """Argmax of each heatmap refined by a 3x3 centroid; ``(J, 2)`` or ``(N, J, 2)``."""
        xb, single = _as_batch(x)
        hm = self.heatmaps(xb)
        n, q, h, w = hm.shape
        out = np.empty((n, q, 2))
        for s in range(n):
            for j in range(q):
                m = hm[s, j]
                r, c = np.unravel_index(np.argmax(m), m.shape)
                r0, r1, c0, c1 = max(r - 1, 0), min(r + 2, h), max(c - 1, 0), min(c + 2, w)
                patch = np.clip(m[r0:r1, c0:c1], 0.0, None)
                if patch.sum() > 0:
                    rr, cc = np.mgrid[r0:r1, c0:c1]
                    out[s, j] = [(rr * patch).sum() / patch.sum(), (cc * patch).sum() / patch.sum()]
                else:
                    out[s, j] = [r, c]
        return out[0] if single else out

    def keypoint_error(self, x, keypoints) -> np.ndarray | float:
        pred = self.predict_keypoints(x)
        err = np.linalg.norm(pred - np.asarray(keypoints), axis=-1).mean(axis=-1)
        return float(err) if np.ndim(err) == 0 else err

    def is_fooled(self, x, ground_truth) -> bool:
        return self.keypoint_error(x, ground_truth) > self.success_fraction * self.diagonal

    def random_ground_truth(self, rng: np.random.Generator):
        h, w = self.image_shape[:2]
        return rng.uniform([2, 2], [h - 3, w - 3], size=(self.n_keypoints, 2))

    def _design(self, xb):
        """Patch matrix with a trailing bias column, ``(N*H*W, k*k*C + 1)``."""
        p = self._patches(xb).reshape(-1, self.kernel * self.kernel * self.image_shape[2])
        return np.hstack([p, np.ones((len(p), 1))])

    def _theta(self):
        d = self.kernel * self.kernel * self.image_shape[2]
        return np.vstack([self.params["K"].reshape(d, self.n_keypoints), self.params["b"][None]])

    def _set_theta(self, theta):
        k, c = self.kernel, self.image_shape[2]
        self.params["K"] = theta[:-1].reshape(k, k, c, self.n_keypoints)
        self.params["b"] = theta[-1].copy()

    def sufficient_statistics(self, images, keypoints, chunk: int = 64):
        """Gram matrix, cross term and target energy of the least-squares loss."""
        images = np.asarray(images, dtype=np.float64)
        kp = np.asarray(keypoints, dtype=np.float64)
        d = self.kernel * self.kernel * self.image_shape[2] + 1
        gram = np.zeros((d, d))
        cross = np.zeros((d, self.n_keypoints))
        energy = np.zeros(self.n_keypoints)
        for i in range(0, len(images), chunk):
            x = self._design(images[i:i + chunk])
            t = self._targets(kp[i:i + chunk], len(images[i:i + chunk]))
            t = t.transpose(0, 2, 3, 1).reshape(-1, self.n_keypoints)
            gram += x.T @ x
            cross += x.T @ t
            energy += np.sum(t ** 2, axis=0)
        count = len(images) * self.image_shape[0] * self.image_shape[1] * self.n_keypoints
        return gram, cross, energy, count

    def fit(self, images, keypoints, epochs: int, lr: float = 1.0, seed: int = 0,
            momentum: float = 0.9) -> list[float]:
        """Full-batch heavy-ball descent on the heatmap MSE.

        The model is linear in its parameters, so each epoch's exact gradient
        is formed from precomputed sufficient statistics. ``lr`` is relative
        to ``1 / L`` where ``L`` is the loss curvature's largest eigenvalue.
        """
        gram, cross, energy, count = self.sufficient_statistics(images, keypoints)
        curvature = 2.0 * np.linalg.eigvalsh(gram)[-1] / count
        step = lr / curvature
        theta = self._theta()
        velocity = np.zeros_like(theta)
        history = []
        for epoch in range(epochs):
            g_theta = gram @ theta
            loss = float((np.sum(theta * g_theta) - 2 * np.sum(theta * cross) + energy.sum())
                         / count)
            grad = 2.0 * (g_theta - cross) / count
            ensure_finite(grad, "detector gradient")
            velocity = momentum * velocity - step * grad
            theta = theta + velocity
            history.append(loss)
            if not np.isfinite(loss):
                raise NumericError("training diverged", iteration=epoch)
        self._set_theta(theta)
        self.params = {k: _snap(v) for k, v in self.params.items()}
        return history


def train_classifier(dataset, epochs: int = 300, lr: float = 1.0, seed: int = 0,
                     hidden: int = 16, pool: int = 4, weight_decay: float = 1e-3,
                     weights=None) -> ToyClassifier:
    """Full-batch gradient descent on BCE over the dataset's rendered images."""
    labels = dataset.labels()
    if epochs > 0 and len(np.unique(labels)) < 2:
        raise TrainingError("classifier training needs both classes")
    model = ToyClassifier(dataset.basis.base_shape, pool=pool, hidden=hidden, seed=seed)
    model.fit(dataset.images(), labels, epochs, lr, weights=weights, weight_decay=weight_decay,
              seed=seed)
    return model


def train_keypoint_detector(dataset, epochs: int = 2000, lr: float = 1.0, sigma: float = 1.5,
                            seed: int = 0, kernel: int = 5, momentum: float = 0.9
                            ) -> ToyKeypointDetector:
    kps = dataset.keypoints()
    if kps.size == 0:
        raise TrainingError("dataset samples carry no keypoints")
    model = ToyKeypointDetector(dataset.basis.base_shape, kps.shape[1], kernel, sigma, seed)
    model.fit(dataset.images(), kps, epochs, lr, seed=seed, momentum=momentum)
    return model


# --- checkpoint: magic, u32 header length, JSON header, float32 LE blob ---

def save_checkpoint(model, path, extra: dict | None = None) -> Path:
    path = Path(path)
    blobs, entries, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"architecture": model.config(), "params": entries, "dtype": "float32-le",
              **(extra or {})}
    raw = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(b"".join(blobs))
    return path


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a model checkpoint")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + n])
    blob = data[8 + n:]
    params = {}
    for e in header["params"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    arch = dict(header["architecture"])
    kind = arch.pop("kind")
    shape = arch.pop("image_shape")
    if kind == CLASSIFIER:
        return ToyClassifier(shape, params=params, **arch)
    if kind == DETECTOR:
        return ToyKeypointDetector(shape, params=params, **arch)
    raise ValueError(f"unknown model kind {kind!r}")
