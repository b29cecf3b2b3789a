"""Fréchet distance over regressor features, and landmark error of translations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import decode_landmarks
from .nets import ModelBundle, regressor_forward
from .tensor import Tensor

FEATURE_DIM = 64
PROJECTION_SEED = 0xF1D
COV_EPS = 1e-6
SMALL_SAMPLE_SHRINK = 0.1


@dataclass
class FeatureSet:
    features: np.ndarray  # (n, d) float64
    source: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be n x d, got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError(f"feature set {self.source!r} has non-finite values")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


def projection_matrix(d_in: int = 1024, d_out: int = FEATURE_DIM, seed: int = PROJECTION_SEED) -> np.ndarray:
    """Fixed (d_in, d_out) matrix with orthonormal columns."""
    g = np.random.default_rng(seed).standard_normal((d_in, d_out))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def _as_batch(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"images must be N x 3 x S x S, got {arr.shape}")
    return arr


def extract_features(images, bundle: ModelBundle, domain: str = "Y", source: str = "",
                     batch: int = 16) -> FeatureSet:
    """Regressor bottleneck (conv5) activations, pooled and projected to 64-D."""
    arr = _as_batch(images)
    if len(arr) == 0:
        raise ValueError("no images to extract features from")
    pooled = []
    for i in range(0, len(arr), batch):
        _, kept = regressor_forward(bundle, domain, Tensor(arr[i:i + batch]), keep=("conv5",))
        pooled.append(kept["conv5"].data.astype(np.float64).mean(axis=(2, 3)))
    feats = np.concatenate(pooled)
    return FeatureSet(feats @ projection_matrix(feats.shape[1]), source)


def _covariance(x: np.ndarray) -> np.ndarray:
    n, d = x.shape
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    if n < d + 1:
        # rank deficient: pull toward the scaled identity
        cov = (1 - SMALL_SAMPLE_SHRINK) * cov + SMALL_SAMPLE_SHRINK * (np.trace(cov) / d) * np.eye(d)
    return cov + COV_EPS * np.eye(d)


def _psd_sqrt(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric square root and the clamped eigenvalues."""
    w, v = np.linalg.eigh((m + m.T) / 2)
    w = np.clip(w, 0, None)
    return (v * np.sqrt(w)) @ v.T, w


def frechet_distance(a: FeatureSet | np.ndarray, b: FeatureSet | np.ndarray) -> float:
    fa = a.features if isinstance(a, FeatureSet) else np.asarray(a, dtype=np.float64)
    fb = b.features if isinstance(b, FeatureSet) else np.asarray(b, dtype=np.float64)
    if fa.ndim == 1:
        fa = fa[:, None]
    if fb.ndim == 1:
        fb = fb[:, None]
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"feature dimensions differ: {fa.shape[1]} vs {fb.shape[1]}")
    if len(fa) < 2 or len(fb) < 2:
        raise ValueError("need at least 2 samples per set")
    mu = fa.mean(axis=0) - fb.mean(axis=0)
    ca, cb = _covariance(fa), _covariance(fb)
    ra, _ = _psd_sqrt(ca)
    _, w = _psd_sqrt(ra @ cb @ ra)
    value = float(mu @ mu + np.trace(ca) + np.trace(cb) - 2 * np.sqrt(w).sum())
    return max(value, 0.0)


def normalize_intensity(images) -> np.ndarray:
    """Per-image min-max rescale to [-1, 1]; constant images map to 0."""
    arr = _as_batch(images).astype(np.float64)
    lo = arr.min(axis=(1, 2, 3), keepdims=True)
    hi = arr.max(axis=(1, 2, 3), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.where(hi > lo, 2 * (arr - lo) / span - 1, 0.0).astype(np.float32)


def predict_landmarks(images, bundle: ModelBundle, domain: str, batch: int = 16) -> np.ndarray:
    arr = _as_batch(images)
    out = []
    for i in range(0, len(arr), batch):
        hm = regressor_forward(bundle, domain, Tensor(arr[i:i + batch])).data
        out.extend(decode_landmarks(h) for h in hm)
    return np.stack(out)


def landmark_error(images, landmarks, bundle: ModelBundle, domain: str, renormalize: bool = False) -> float:
    """Mean Euclidean px distance between decoded regressor landmarks on
    ``images`` and the conditioning ``landmarks`` (n, 5, 2)."""
    arr = _as_batch(images)
    lm = np.asarray(landmarks, dtype=np.float64).reshape(-1, 5, 2)
    if len(arr) == 0:
        raise ValueError("landmark_error: empty batch")
    if len(arr) != len(lm):
        raise ValueError(f"{len(arr)} images but {len(lm)} landmark sets")
    if renormalize:
        arr = normalize_intensity(arr)
    pred = predict_landmarks(arr, bundle, domain)
    return float(np.linalg.norm(pred - lm, axis=2).mean())
