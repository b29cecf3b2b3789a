"""Procedural two-domain face corpus with exact landmark ground truth.

Faces are drawn from signed-distance shapes (ellipse head, disc eyes,
triangle nose, capsule mouth) with one-pixel linear anti-aliasing. Domain X is
"photo-like": shaded skin, small eyes, per-pixel noise. Domain Y is
"cartoon-like": flat palette, outlined head, eyes 1.8x larger and a mouth 1.3x
wider. Landmarks are the analytic part centres and mouth endpoints, so they
are exact by construction.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ManifestRecord, Sample, to_unit_range, write_manifest, write_ppm
from .errors import DataError

DOMAIN_IDS = {"X": 1, "Y": 2}

SKIN = np.array([[0.96, 0.80, 0.69], [0.88, 0.67, 0.52], [0.76, 0.55, 0.40], [0.55, 0.38, 0.26],
                 [0.93, 0.76, 0.62]])
FLAT = np.array([[1.00, 0.87, 0.40], [0.98, 0.76, 0.63], [0.70, 0.85, 1.00], [0.80, 0.95, 0.70],
                 [1.00, 0.70, 0.80]])
BACKDROP_Y = np.array([[0.20, 0.50, 0.85], [0.95, 0.45, 0.30], [0.30, 0.70, 0.45], [0.55, 0.35, 0.75]])


@dataclass
class SynthParams:
    """Geometry is in fractions of the image side; jitters are half-ranges."""

    size: int = 64
    seed: int = 0
    head_center_jitter: float = 0.03
    head_axes: tuple[float, float] = (0.33, 0.40)
    head_axes_jitter: float = 0.02
    eye_dx: float = 0.15
    eye_dx_jitter: float = 0.02
    eye_y: float = -0.08
    eye_y_jitter: float = 0.03
    eye_radius: float = 0.035
    nose_y: float = 0.07
    nose_size: float = 0.07
    mouth_y: float = 0.22
    mouth_y_jitter: float = 0.03
    mouth_half_width: float = 0.08
    mouth_half_width_jitter: float = 0.015
    mouth_thickness: float = 0.022
    roll_jitter_deg: float = 8.0
    eye_radius_scale_y: float = 1.8
    mouth_width_scale_y: float = 1.3
    noise_x: float = 0.03


def draw_layout(params: SynthParams, rng: np.random.Generator) -> dict:
    """Domain-independent random draws for one face."""
    u = lambda j: float(rng.uniform(-j, j))  # noqa: E731
    return {
        "cx": 0.5 + u(params.head_center_jitter),
        "cy": 0.5 + u(params.head_center_jitter),
        "ax": params.head_axes[0] + u(params.head_axes_jitter),
        "ay": params.head_axes[1] + u(params.head_axes_jitter),
        "eye_dx": params.eye_dx + u(params.eye_dx_jitter),
        "eye_y": params.eye_y + u(params.eye_y_jitter),
        "mouth_y": params.mouth_y + u(params.mouth_y_jitter),
        "mouth_hw": params.mouth_half_width + u(params.mouth_half_width_jitter),
        "nose_y": params.nose_y + u(0.02),
        "roll": math.radians(u(params.roll_jitter_deg)),
    }


def face_geometry(layout: dict, params: SynthParams, domain: str) -> dict:
    """Pixel-space geometry (and landmarks) for a layout in one domain."""
    s = params.size
    eye_r = params.eye_radius * (params.eye_radius_scale_y if domain == "Y" else 1.0)
    mouth_hw = layout["mouth_hw"] * (params.mouth_width_scale_y if domain == "Y" else 1.0)
    c, sn = math.cos(layout["roll"]), math.sin(layout["roll"])
    cx, cy = layout["cx"] * s, layout["cy"] * s

    def place(dx, dy):
        return cx + (c * dx - sn * dy) * s, cy + (sn * dx + c * dy) * s

    lm = np.array([
        place(-layout["eye_dx"], layout["eye_y"]),
        place(layout["eye_dx"], layout["eye_y"]),
        place(0.0, layout["nose_y"]),
        place(-mouth_hw, layout["mouth_y"]),
        place(mouth_hw, layout["mouth_y"]),
    ])
    return {
        "center": (cx, cy), "axes": (layout["ax"] * s, layout["ay"] * s), "roll": layout["roll"],
        "eye_r": eye_r * s, "nose": params.nose_size * s, "mouth_r": params.mouth_thickness * s,
        "landmarks": lm,
    }


def _check_on_canvas(geo: dict, size: int):
    lm = geo["landmarks"]
    reach = max(geo["eye_r"], geo["nose"], geo["mouth_r"]) + 1
    cx, cy = geo["center"]
    ax, ay = geo["axes"]
    ext = max(ax, ay) + 1
    if (lm - reach < 0).any() or (lm + reach > size - 1).any() or cx - ext < 0 or cy - ext < 0 \
            or cx + ext > size or cy + ext > size:
        raise ValueError("synthetic face parts fall off the canvas; shrink the geometry or jitter ranges")


def _coverage(sd: np.ndarray) -> np.ndarray:
    return np.clip(0.5 - sd, 0.0, 1.0)


def _seg_dist(px, py, a, b):
    ax, ay = a
    bx, by = b
    vx, vy = bx - ax, by - ay
    t = np.clip(((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy), 0, 1)
    return np.hypot(px - ax - t * vx, py - ay - t * vy)


def _paint(img, alpha, color):
    img *= 1 - alpha[..., None]
    img += alpha[..., None] * np.asarray(color)


def render_face(layout: dict, params: SynthParams, domain: str, style_rng: np.random.Generator):
    """Return (uint8 HWC RGB, landmarks (5, 2))."""
    s = params.size
    geo = face_geometry(layout, params, domain)
    _check_on_canvas(geo, s)
    py, px = np.mgrid[0:s, 0:s].astype(np.float64)
    cx, cy = geo["center"]
    ax, ay = geo["axes"]
    c, sn = math.cos(geo["roll"]), math.sin(geo["roll"])
    # head in its own rotated frame
    hx = c * (px - cx) + sn * (py - cy)
    hy = -sn * (px - cx) + c * (py - cy)
    head_sd = (np.hypot(hx / ax, hy / ay) - 1) * min(ax, ay)
    lm = geo["landmarks"]

    if domain == "X":
        bg = style_rng.uniform(0.15, 0.6, size=3)
        img = np.broadcast_to(bg, (s, s, 3)).copy()
        img += (py / s - 0.5)[..., None] * 0.15
        skin = SKIN[style_rng.integers(len(SKIN))] * style_rng.uniform(0.9, 1.05)
        shade = 1 - 0.25 * np.clip((hx / ax + 1) / 2, 0, 1)
        head = np.clip(skin[None, None, :] * shade[..., None], 0, 1)
        a = _coverage(head_sd)
        img = img * (1 - a[..., None]) + head * a[..., None]
        eye_col = np.array([0.25, 0.15, 0.08]) * style_rng.uniform(0.6, 1.2)
        nose_col = skin * 0.72
        mouth_col = np.array([0.70, 0.25, 0.25]) * style_rng.uniform(0.8, 1.1)
    else:
        bg = BACKDROP_Y[style_rng.integers(len(BACKDROP_Y))]
        img = np.broadcast_to(bg, (s, s, 3)).copy()
        face = FLAT[style_rng.integers(len(FLAT))]
        outline = np.array([0.08, 0.06, 0.05])
        _paint(img, _coverage(head_sd - 0.0), outline)
        _paint(img, _coverage(head_sd + max(1.0, s / 64)), face)
        eye_col = np.array([0.05, 0.05, 0.08])
        nose_col = face * 0.6
        mouth_col = np.array([0.45, 0.08, 0.12])

    er = geo["eye_r"]
    for k in (0, 1):
        ex, ey = lm[k]
        _paint(img, _coverage(np.hypot(px - ex, py - ey) - er), eye_col)
        if domain == "Y":
            hl = er * 0.35
            _paint(img, _coverage(np.hypot(px - ex - er * 0.35, py - ey + er * 0.35) - hl), (1.0, 1.0, 1.0))

    # nose: upward-pointing triangle whose centroid is the landmark
    nx, ny = lm[2]
    n = geo["nose"]
    local = [(0.0, -2 * n / 3), (-n / 2, n / 3), (n / 2, n / 3)]
    verts = [(nx + c * vx - sn * vy, ny + sn * vx + c * vy) for vx, vy in local]
    sd = np.full((s, s), -np.inf)
    for i in range(3):
        (x0, y0), (x1, y1) = verts[i], verts[(i + 1) % 3]
        ln = math.hypot(x1 - x0, y1 - y0)
        nrm = ((y1 - y0) / ln, (x0 - x1) / ln)
        if (nx - x0) * nrm[0] + (ny - y0) * nrm[1] > 0:
            nrm = (-nrm[0], -nrm[1])
        sd = np.maximum(sd, (px - x0) * nrm[0] + (py - y0) * nrm[1])
    _paint(img, _coverage(sd), nose_col)

    _paint(img, _coverage(_seg_dist(px, py, lm[3], lm[4]) - geo["mouth_r"]), mouth_col)

    if domain == "X" and params.noise_x > 0:
        img = img + style_rng.normal(0, params.noise_x, size=img.shape)
    rgb = np.floor(np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)
    return rgb, lm


def synth_generate(params: SynthParams, domain: str, n: int, start: int = 0) -> list[Sample]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if domain not in DOMAIN_IDS:
        raise ValueError(f"unknown domain {domain!r}")
    out = []
    for i in range(start, start + n):
        layout = draw_layout(params, np.random.default_rng([params.seed, DOMAIN_IDS[domain], i, 0]))
        rgb, lm = render_face(layout, params, domain, np.random.default_rng([params.seed, DOMAIN_IDS[domain], i, 1]))
        out.append(Sample(to_unit_range(rgb), lm, domain, f"images/{domain}{i:06d}.ppm"))
    return out


def write_synth_dataset(out: str | os.PathLike, n_per_domain: int, params: SynthParams, force: bool = False):
    """Write ``<out>/{X,Y}/images/*.ppm`` and the two manifests."""
    if params.size % 32:
        raise ValueError(f"size must be divisible by 32 (landmark regressor constraint), got {params.size}")
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"{out} exists and is not empty (use --force)")
    for domain in ("X", "Y"):
        d = out / domain
        (d / "images").mkdir(parents=True, exist_ok=True)
        records = []
        for i in range(n_per_domain):
            layout = draw_layout(params, np.random.default_rng([params.seed, DOMAIN_IDS[domain], i, 0]))
            rgb, lm = render_face(layout, params, domain,
                                  np.random.default_rng([params.seed, DOMAIN_IDS[domain], i, 1]))
            rel = f"images/{domain}{i:06d}.ppm"
            write_ppm(d / rel, rgb)
            records.append(ManifestRecord(rel, lm))
        write_manifest(d / "manifest.tsv", records)
