"""Landmark <-> heatmap encoding, landmark-anchored patch crops, and the
shifted-image negatives used by the conditional discriminator.

Landmarks are float arrays of shape (5, 2) holding (x, y) pixel coordinates
in the order of :data:`LANDMARK_NAMES`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import ops
from .tensor import Tensor

LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "mouth_left", "mouth_right")
LEFT_EYE, RIGHT_EYE, NOSE, MOUTH_LEFT, MOUTH_RIGHT = range(5)


def default_sigma(size: int) -> float:
    return size / 32


def _round(v: float) -> int:
    return int(np.floor(v + 0.5))


def validate_landmarks(landmarks, size: int, check_order: bool = False) -> np.ndarray:
    lm = np.asarray(landmarks, dtype=np.float64)
    if lm.shape != (5, 2):
        raise ValueError(f"landmarks must have shape (5, 2), got {lm.shape}")
    if not np.isfinite(lm).all() or (lm < 0).any() or (lm >= size).any():
        raise ValueError(f"landmarks outside [0, {size}): {lm.tolist()}")
    if check_order:
        if not lm[LEFT_EYE, 0] < lm[RIGHT_EYE, 0]:
            raise ValueError("left eye must lie left of right eye")
        if not lm[MOUTH_LEFT, 0] < lm[MOUTH_RIGHT, 0]:
            raise ValueError("mouth-left must lie left of mouth-right")
    return lm


def encode_heatmaps(landmarks, size: int, sigma: float | None = None) -> np.ndarray:
    """(5, S, S) float32 stack of unit-peak Gaussians centred on each point."""
    if sigma is None:
        sigma = default_sigma(size)
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    lm = validate_landmarks(landmarks, size)
    grid = np.arange(size, dtype=np.float64)
    dy = (grid[None, :] - lm[:, 1:2]) ** 2  # (5, S) over rows
    dx = (grid[None, :] - lm[:, 0:1]) ** 2  # (5, S) over cols
    d2 = dy[:, :, None] + dx[:, None, :]
    hm = np.exp(-d2 / (2 * sigma * sigma)).astype(np.float32)
    # far tails underflow to float32 subnormals, which are very slow in BLAS
    hm[hm < np.finfo(np.float32).tiny] = 0
    return hm


def decode_landmarks(heatmaps) -> np.ndarray:
    """Per-channel argmax as (x, y); ties go to the first row-major pixel."""
    hm = heatmaps.data if isinstance(heatmaps, Tensor) else np.asarray(heatmaps)
    if hm.ndim == 4:
        if hm.shape[0] != 1:
            raise ValueError("decode_landmarks takes a single sample")
        hm = hm[0]
    c, h, w = hm.shape
    idx = hm.reshape(c, -1).argmax(axis=1)
    return np.stack([idx % w, idx // w], axis=1).astype(np.float64)


# ---------------------------------------------------------------- patches

@dataclass
class PatchSet:
    eyes: Tensor
    nose: Tensor
    mouth: Tensor
    rects: dict  # part -> (x0, y0, w, h) source rectangle; eyes -> [left, right]

    def __getitem__(self, part: str) -> Tensor:
        return getattr(self, part)


def centered_rect(cx: float, cy: float, w: int, h: int, size: int) -> tuple[int, int, int, int]:
    """Rect of fixed size centred at (cx, cy), shifted (never shrunk) into the image."""
    x0 = _round(cx) - w // 2
    y0 = _round(cy) - h // 2
    x0 = min(max(x0, 0), size - w)
    y0 = min(max(y0, 0), size - h)
    return x0, y0, w, h


def mouth_rect(landmarks, w: int, h: int, size: int) -> tuple[int, int, int, int]:
    """Source rect spanning the mouth corners plus a sixth of the span per side,
    with the target aspect ratio around the corners' mean y."""
    lm = np.asarray(landmarks, dtype=np.float64)
    xl, xr = sorted((lm[MOUTH_LEFT, 0], lm[MOUTH_RIGHT, 0]))
    span = xr - xl
    if span < 1:
        raise ValueError(f"degenerate mouth landmarks: corners {lm[MOUTH_LEFT].tolist()} / {lm[MOUTH_RIGHT].tolist()}")
    margin = span / 6
    src_w = min(max(_round(span + 2 * margin), 2), size)
    src_h = min(max(_round(src_w * h / w), 1), size)
    ymean = (lm[MOUTH_LEFT, 1] + lm[MOUTH_RIGHT, 1]) / 2
    x0 = _round(xl - margin)
    y0 = _round(ymean - src_h / 2)
    x0 = min(max(x0, 0), size - src_w)
    y0 = min(max(y0, 0), size - src_h)
    return x0, y0, src_w, src_h


def extract_patches(image: Tensor, landmarks, sizes: dict[str, tuple[int, int]]) -> PatchSet:
    """Crop eyes/nose/mouth from a (1, 3, S, S) image. Crops are recorded ops,
    so gradients reach the source pixels. ``sizes`` maps part -> (w, h)."""
    if image.data.ndim != 4 or image.shape[0] != 1:
        raise ValueError(f"extract_patches expects a 1 x C x S x S image, got {image.shape}")
    size = image.shape[2]
    lm = np.asarray(landmarks, dtype=np.float64)
    for part in ("eyes", "nose"):
        w, h = sizes[part]
        if w % 2 or h % 2 or w >= size or h >= size:
            raise ValueError(f"{part} patch {w}x{h} must be even and smaller than {size}")
    ew, eh = sizes["eyes"]
    left = centered_rect(*lm[LEFT_EYE], ew, eh, size)
    right = centered_rect(*lm[RIGHT_EYE], ew, eh, size)
    eyes = ops.concat_channels([ops.crop(image, *left), ops.crop(image, *right)])
    nw, nh = sizes["nose"]
    nose_r = centered_rect(*lm[NOSE], nw, nh, size)
    nose = ops.crop(image, *nose_r)
    mw, mh = sizes["mouth"]
    mouth_r = mouth_rect(lm, mw, mh, size)
    mouth = ops.crop(image, *mouth_r)
    if (mouth_r[2], mouth_r[3]) != (mw, mh):
        mouth = ops.resize_bilinear(mouth, mh, mw)
    return PatchSet(eyes, nose, mouth, {"eyes": [left, right], "nose": nose_r, "mouth": mouth_r})


# ---------------------------------------------------------------- unmatched pairs

class UnmatchedPair(NamedTuple):
    image: np.ndarray
    heatmaps: np.ndarray
    offset: tuple[int, int]


def translate_image(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Move content by (dx, dy) pixels; exposed borders replicate the edge.
    Works on (..., H, W) arrays."""
    h, w = image.shape[-2:]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return image[..., rows[:, None], cols[None, :]]


def shift_floor(size: int) -> int:
    return max(1, size // 16)


def make_unmatched_pair(image: np.ndarray, landmarks, rng: np.random.Generator, max_shift: int | None = None,
                        sigma: float | None = None, floor: int | None = None) -> UnmatchedPair:
    """Translate ``image`` by a random offset with L1 length >= ``floor`` and
    pair it with heatmaps of the ORIGINAL landmarks."""
    size = image.shape[-1]
    if floor is None:
        floor = shift_floor(size)
    if max_shift is None:
        max_shift = size // 8
    if max_shift < floor:
        raise ValueError(f"max_shift={max_shift} below the displacement floor {floor}")
    while True:
        dx, dy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
        if abs(dx) + abs(dy) >= floor:
            break
    shifted = translate_image(image, dx, dy)
    return UnmatchedPair(shifted, encode_heatmaps(landmarks, size, sigma), (dx, dy))
