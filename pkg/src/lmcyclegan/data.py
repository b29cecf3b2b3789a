"""Dataset layout, manifests, image codecs and augmentation.

Layout on disk::

    <root>/X/images/*.ppm   <root>/X/manifest.tsv
    <root>/Y/images/*.ppm   <root>/Y/manifest.tsv

A manifest line is ``relative/path<TAB>x1<TAB>y1 ... x5<TAB>y5`` with the
points in :data:`~lmcyclegan.geometry.LANDMARK_NAMES` order, paths relative
to ``<root>/<domain>``.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import LEFT_EYE, MOUTH_LEFT, MOUTH_RIGHT, RIGHT_EYE
from .ops import bilinear_matrix

log = logging.getLogger(__name__)

MAX_BAD_FRACTION = 0.01


@dataclass
class Sample:
    image: np.ndarray  # (3, S, S) float32 in [-1, 1], RGB
    landmarks: np.ndarray  # (5, 2) float64, (x, y)
    domain: str
    id: str


@dataclass
class ManifestRecord:
    path: str
    landmarks: np.ndarray


# ---------------------------------------------------------------- manifests

def _fmt(v: float) -> str:
    return repr(float(v))


def format_manifest(records: list[ManifestRecord]) -> str:
    lines = []
    for r in records:
        nums = np.asarray(r.landmarks, dtype=np.float64).reshape(-1)
        lines.append("\t".join([r.path] + [_fmt(v) for v in nums]))
    return "".join(line + "\n" for line in lines)


def parse_manifest(text: str, source: str = "<manifest>") -> list[ManifestRecord]:
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 11:
            raise DataError(f"{source}:{lineno}: expected path + 10 numbers, got {len(fields)} fields")
        try:
            nums = np.array([float(v) for v in fields[1:]], dtype=np.float64)
        except ValueError as e:
            raise DataError(f"{source}:{lineno}: {e}") from None
        records.append(ManifestRecord(fields[0], nums.reshape(5, 2)))
    return records


def read_manifest(path: str | os.PathLike) -> list[ManifestRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    return parse_manifest(path.read_text(), str(path))


def write_manifest(path: str | os.PathLike, records: list[ManifestRecord]):
    Path(path).write_text(format_manifest(records))


# ---------------------------------------------------------------- image codecs

def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PPM header")
        tokens.append(buf[i:j])
        i = j
    return tokens, i + 1


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), off = _ppm_tokens(buf, 4)
    if magic != b"P6" or int(maxval) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(w), int(h)
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=off)
    return data.reshape(h, w, 3)


def write_ppm(path: str | os.PathLike, rgb: np.ndarray):
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(rgb.tobytes())


def read_image(path: str | os.PathLike) -> np.ndarray:
    """8-bit RGB image as (H, W, 3) uint8. PPM natively, PNG via Pillow."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pnm"):
        return read_ppm(path)
    if suffix == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    raise ValueError(f"{path}: unsupported image format {suffix!r}")


def write_image(path: str | os.PathLike, rgb: np.ndarray):
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path)
    else:
        write_ppm(path, rgb)


def to_unit_range(rgb: np.ndarray) -> np.ndarray:
    """uint8 HWC -> float32 CHW in [-1, 1]."""
    return (rgb.astype(np.float32).transpose(2, 0, 1) / np.float32(127.5) - 1).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """float CHW in [-1, 1] -> uint8 HWC."""
    img = np.clip((np.asarray(image, dtype=np.float64) + 1) * 127.5, 0, 255)
    return np.floor(img + 0.5).astype(np.uint8).transpose(1, 2, 0)


def resize_rgb(rgb: np.ndarray, size: int) -> np.ndarray:
    h, w, _ = rgb.shape
    if (h, w) == (size, size):
        return rgb
    ry = bilinear_matrix(h, size)
    rx = bilinear_matrix(w, size)
    out = np.einsum("oh,hwc,pw->opc", ry, rgb.astype(np.float64), rx)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- loading

def load_folder(base: str | os.PathLike, size: int, domain: str = "", seed: int | None = None,
                manifest: str | os.PathLike | None = None) -> list[Sample]:
    """Decode every record of ``<base>/manifest.tsv`` at size S.

    Bad records are logged and skipped; more than 1% bad aborts with
    :class:`DataError`. With ``seed`` the order is shuffled deterministically.
    """
    base = Path(base)
    records = read_manifest(manifest if manifest is not None else base / "manifest.tsv")
    if not records:
        raise DataError(f"{base}: manifest is empty")
    samples, bad = [], []
    for r in records:
        try:
            rgb = read_image(base / r.path)
            h, w, _ = rgb.shape
            lm = r.landmarks * np.array([size / w, size / h])
            if (lm < 0).any() or (lm >= size).any():
                raise ValueError(f"landmarks outside the image: {r.landmarks.tolist()}")
            samples.append(Sample(to_unit_range(resize_rgb(rgb, size)), lm, domain, r.path))
        except (OSError, ValueError) as e:
            bad.append(r.path)
            log.warning("skipping record %s: %s", r.path, e)
    if len(bad) > MAX_BAD_FRACTION * len(records):
        raise DataError(f"{base}: {len(bad)} of {len(records)} records failed to load (first: {bad[0]})")
    if seed is not None:
        order = np.random.default_rng([seed, 0xDA7A]).permutation(len(samples))
        samples = [samples[i] for i in order]
    return samples


def load_dataset(root: str | os.PathLike, domain: str, size: int, seed: int | None = None,
                 manifest: str | os.PathLike | None = None) -> list[Sample]:
    """Samples of one domain from the ``<root>/<domain>`` layout."""
    return load_folder(Path(root) / domain, size, domain, seed, manifest)


def split_holdout(samples: list[Sample], fraction: float = 0.1, seed: int = 0) -> tuple[list[Sample], list[Sample]]:
    """Seeded (train, held-out) split; the split depends only on sample ids."""
    ids = sorted(s.id for s in samples)
    n_test = max(1, int(round(fraction * len(ids)))) if len(ids) > 1 else 0
    perm = np.random.default_rng([seed, 0x5EED]).permutation(len(ids))
    test_ids = {ids[i] for i in perm[:n_test]}
    return [s for s in samples if s.id not in test_ids], [s for s in samples if s.id in test_ids]


# ---------------------------------------------------------------- augmentation

def flip_landmarks(landmarks: np.ndarray, size: int) -> np.ndarray:
    lm = np.asarray(landmarks, dtype=np.float64).copy()
    lm[:, 0] = size - 1 - lm[:, 0]
    lm[[LEFT_EYE, RIGHT_EYE]] = lm[[RIGHT_EYE, LEFT_EYE]]
    lm[[MOUTH_LEFT, MOUTH_RIGHT]] = lm[[MOUTH_RIGHT, MOUTH_LEFT]]
    return lm


def augment(sample: Sample, rng: np.random.Generator, force: bool | None = None) -> Sample:
    """Horizontal flip with probability 0.5 (or as forced)."""
    flip = bool(rng.random() < 0.5) if force is None else force
    if not flip:
        return sample
    size = sample.image.shape[-1]
    return replace(sample, image=np.ascontiguousarray(sample.image[:, :, ::-1]),
                   landmarks=flip_landmarks(sample.landmarks, size))
