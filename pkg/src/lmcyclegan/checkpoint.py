"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"LMCG" | u32 version | u64 iteration | u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 rank | rank x u32 dims | f32 payload
    u32 CRC32 of every preceding byte

Run metadata (phase, config hash, rng state, Adam step counts) travels as a
tensor named ``meta/json`` whose payload words are the space-padded UTF-8
JSON bytes. Adam moments are tensors ``adam.m/<param>`` and ``adam.v/<param>``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .optim import AdamState

MAGIC = b"LMCG"
VERSION = 1
META_NAME = "meta/json"


@dataclass
class Checkpoint:
    iteration: int
    phase: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    config_hash: str = ""
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def _meta_words(meta: dict) -> np.ndarray:
    raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    raw += b" " * (-len(raw) % 4)
    return np.frombuffer(raw, dtype="<f4")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.meta)
    meta.update(phase=ckpt.phase, config_hash=ckpt.config_hash, rng=ckpt.rng_state)
    items = [(META_NAME, _meta_words(meta))] + list(ckpt.tensors.items())
    parts = [MAGIC, struct.pack("<IQI", ckpt.version, ckpt.iteration, len(items))]
    for name, arr in items:
        nb = name.encode()
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < 24:
        raise CheckpointError(CheckpointError.TRUNCATED, f"{source}: file too short")
    if buf[:4] != MAGIC:
        raise CheckpointError(CheckpointError.BAD_MAGIC, f"{source}: not an LMCG checkpoint")
    version, iteration, count = struct.unpack_from("<IQI", buf, 4)
    if version != VERSION:
        raise CheckpointError(CheckpointError.VERSION, f"{source}: format version {version}, expected {VERSION}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    off = 20
    tensors: dict[str, np.ndarray] = {}
    meta: dict = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if off + 4 * n > len(body):
                raise struct.error("payload runs past the end")
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            if name == META_NAME:
                meta = json.loads(arr.tobytes().decode().rstrip(" "))
            else:
                tensors[name] = arr.astype(np.float32)
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(CheckpointError.TRUNCATED, f"{source}: {e}") from None
    if off != len(body):
        raise CheckpointError(CheckpointError.TRUNCATED, f"{source}: {len(body) - off} trailing bytes")
    if zlib.crc32(body) != crc:
        raise CheckpointError(CheckpointError.CHECKSUM, f"{source}: CRC32 mismatch")
    return Checkpoint(iteration=iteration, phase=meta.pop("phase", ""), tensors=tensors,
                      config_hash=meta.pop("config_hash", ""), rng_state=meta.pop("rng", {}), meta=meta,
                      version=version)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint):
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(CheckpointError.MISSING, f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))


# ---------------------------------------------------------------- bundle glue

def bundle_checkpoint(bundle, nets: list[str], phase: str, iteration: int, config_hash: str,
                      rng_state: dict | None = None, optimizer: bool = True, meta: dict | None = None) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    steps = {}
    for net in nets:
        for k, t in bundle.group(net).items():
            tensors[k] = t.data
    if optimizer:
        for group in sorted(bundle.opt):
            if not set(group.split("+")) & set(nets):
                continue
            st = bundle.opt[group]
            steps[group] = st.step
            for k in sorted(st.m):
                tensors[f"adam.m/{k}"] = st.m[k]
                tensors[f"adam.v/{k}"] = st.v[k]
    m = {"nets": list(nets), "adam_steps": steps, "arch": bundle.arch_dict()}
    m.update(meta or {})
    return Checkpoint(iteration=iteration, phase=phase, tensors=tensors, config_hash=config_hash,
                      rng_state=dict(rng_state or {}), meta=m)


def restore_bundle(bundle, ckpt: Checkpoint, expected_hash: str | None = None, allow_hash_mismatch: bool = False):
    """Copy checkpoint tensors into ``bundle`` (parameters and Adam state)."""
    if expected_hash is not None and ckpt.config_hash != expected_hash and not allow_hash_mismatch:
        raise CheckpointError(CheckpointError.CONFIG_HASH,
                              f"checkpoint config hash {ckpt.config_hash[:12]} != run config {expected_hash[:12]}; "
                              "pass the override flag to load anyway")
    moments: dict[str, tuple[str, np.ndarray]] = {}
    for name, arr in ckpt.tensors.items():
        if name.startswith("adam.m/") or name.startswith("adam.v/"):
            kind, pname = name.split("/", 1)
            if pname not in bundle.params:
                raise CheckpointError(CheckpointError.UNKNOWN_TENSOR, f"moment for unknown parameter {pname!r}")
            moments[name] = (pname, arr)
            continue
        if name not in bundle.params:
            raise CheckpointError(CheckpointError.UNKNOWN_TENSOR, f"unknown tensor {name!r}")
        p = bundle.params[name]
        if p.data.shape != arr.shape:
            raise CheckpointError(CheckpointError.UNKNOWN_TENSOR,
                                  f"tensor {name!r} has shape {arr.shape}, model expects {p.data.shape}")
        p.data = arr.copy()
    steps = ckpt.meta.get("adam_steps", {})
    for group, step in steps.items():
        st = AdamState(step=int(step))
        members = group.split("+")
        for name, (pname, arr) in moments.items():
            if pname.split(".", 1)[0] in members:
                (st.m if name.startswith("adam.m/") else st.v)[pname] = arr.copy()
        bundle.opt[group] = st
