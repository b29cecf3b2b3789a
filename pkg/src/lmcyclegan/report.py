"""Loss-log parsing, metrics TSV, matplotlib figures and PPM mosaics."""
from __future__ import annotations

import os
from collections import defaultdict
from pathlib import Path

import numpy as np

from .data import to_uint8, write_ppm


def read_loss_log(path: str | os.PathLike) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """term -> (iterations, values) from an ``iter<TAB>term<TAB>value`` log."""
    its: dict[str, list[int]] = defaultdict(list)
    vals: dict[str, list[float]] = defaultdict(list)
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        it, term, value = line.split("\t")
        its[term].append(int(it))
        vals[term].append(float(value))
    return {k: (np.array(its[k]), np.array(vals[k])) for k in its}


def window_means(values, fraction: float = 0.1) -> tuple[float, float]:
    """Means of the first and last ``fraction`` of a series."""
    v = np.asarray(values, dtype=np.float64)
    k = max(1, int(len(v) * fraction))
    return float(v[:k].mean()), float(v[-k:].mean())


def format_metrics(metrics: dict[str, float]) -> str:
    return "".join(f"{k}\t{float(v)!r}\n" for k, v in metrics.items())


def parse_metrics(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line:
            k, v = line.split("\t")
            out[k] = float(v)
    return out


def write_metrics(path: str | os.PathLike, metrics: dict[str, float]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_metrics(metrics))


def _smooth(v: np.ndarray, k: int) -> np.ndarray:
    if k <= 1 or len(v) < k:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[k:] - c[:-k]) / k


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_losses(log_path: str | os.PathLike, out_png: str | os.PathLike, terms: list[str] | None = None,
                smooth: int = 50, title: str | None = None) -> Path:
    curves = read_loss_log(log_path)
    if terms is None:
        terms = [t for t in curves if not t.startswith("skipped")]
    terms = [t for t in terms if t in curves]
    plt = _pyplot()
    n = max(1, len(terms))
    cols = min(3, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 2.6 * rows), squeeze=False)
    for ax, term in zip(axes.flat, terms):
        it, v = curves[term]
        ax.plot(it, v, lw=0.4, alpha=0.35, color="tab:blue")
        s = _smooth(v, smooth)
        ax.plot(it[len(it) - len(s):], s, lw=1.2, color="tab:blue")
        ax.set_title(term, fontsize=9)
        ax.tick_params(labelsize=7)
    for ax in list(axes.flat)[len(terms):]:
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    out = Path(out_png)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return out


def plot_metrics(metrics: dict[str, float], out_png: str | os.PathLike) -> Path:
    """Bar charts of the Fréchet distances and the landmark errors."""
    plt = _pyplot()
    groups = [("Fréchet distance", [k for k in metrics if k.startswith("fid_")]),
              ("landmark error (px)", [k for k in metrics if k.endswith("_px")])]
    groups = [(t, ks) for t, ks in groups if ks]
    fig, axes = plt.subplots(1, max(1, len(groups)), figsize=(5 * max(1, len(groups)), 3), squeeze=False)
    for ax, (title, keys) in zip(axes.flat, groups):
        ax.barh(range(len(keys)), [metrics[k] for k in keys], color="tab:gray")
        ax.set_yticks(range(len(keys)))
        ax.set_yticklabels(keys, fontsize=7)
        ax.set_title(title, fontsize=9)
        ax.tick_params(axis="x", labelsize=7)
    fig.tight_layout()
    out = Path(out_png)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return out


def mosaic(pairs: list[tuple[np.ndarray, np.ndarray]], per_row: int = 4, gap: int = 2) -> np.ndarray:
    """Grid of (input | output) tiles from CHW [-1, 1] images, as uint8 HWC."""
    if not pairs:
        raise ValueError("mosaic needs at least one pair")
    s = pairs[0][0].shape[-1]
    tile_w = 2 * s + gap
    rows = (len(pairs) + per_row - 1) // per_row
    canvas = np.full((rows * (s + gap) + gap, per_row * (tile_w + gap) + gap, 3), 255, dtype=np.uint8)
    for k, (a, b) in enumerate(pairs):
        r, c = divmod(k, per_row)
        y = gap + r * (s + gap)
        x = gap + c * (tile_w + gap)
        canvas[y:y + s, x:x + s] = to_uint8(a)
        canvas[y:y + s, x + s + gap:x + 2 * s + gap] = to_uint8(b)
    return canvas


def write_mosaic(path: str | os.PathLike, pairs, per_row: int = 4) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(p, mosaic(pairs, per_row))
    return p
