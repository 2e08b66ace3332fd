"""Binary checkpoints for a scene plus its deformation field.

Layout (all integers little-endian)::

    b"GSDYN\\0"                       magic
    u32 version
    u32 N, D_d, L, F, log2(T), K     counts
    u32 n_arrays
    u32 meta_len, meta bytes        training config as key = value text
    per array: u16 name_len, name, u8 dtype (0 = f32, 1 = f64), u8 ndim, u32 dims...
    array payloads in the same order
    u32 CRC32 of everything between the magic and the checksum
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .scene import ATTRS, Scene

MAGIC = b"GSDYN\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(Exception):
    pass


class MagicMismatch(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class DimensionMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    counts: dict[str, int]
    meta: str
    extent: float

    def scene(self) -> Scene:
        return Scene.from_arrays({a: self.arrays[f"scene.{a}"] for a in ATTRS}, self.extent)

    def field_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if not k.startswith("scene.")}


COUNT_KEYS = ("N", "D_d", "L", "F", "log2T", "K")


def encode(arrays: dict[str, np.ndarray], counts: dict[str, int], meta: str = "") -> bytes:
    body = [struct.pack("<I", VERSION), struct.pack("<6I", *(counts[k] for k in COUNT_KEYS))]
    body.append(struct.pack("<I", len(arrays)))
    mb = meta.encode("utf-8")
    body.append(struct.pack("<I", len(mb)) + mb)
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = 1 if arr.dtype == np.float64 else 0
        nb = name.encode("utf-8")
        body.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        body.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    data = b"".join(body + payload)
    return MAGIC + data + struct.pack("<I", zlib.crc32(data))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"checkpoint truncated: needed {n} bytes at offset {self.pos + len(MAGIC)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(raw: bytes) -> tuple[dict[str, np.ndarray], dict[str, int], str]:
    if len(raw) < len(MAGIC):
        raise TruncatedFile("checkpoint shorter than its magic string")
    if raw[: len(MAGIC)] != MAGIC:
        raise MagicMismatch(f"bad magic {raw[:len(MAGIC)]!r}")
    r = _Reader(raw[len(MAGIC) :])
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    counts = dict(zip(COUNT_KEYS, r.unpack("<6I")))
    (n_arrays,) = r.unpack("<I")
    (meta_len,) = r.unpack("<I")
    meta = r.take(meta_len).decode("utf-8")
    table = []
    for _ in range(n_arrays):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"array {name!r}: unknown dtype code {code}")
        table.append((name, _DTYPES[code], r.unpack(f"<{ndim}I")))
    arrays = {}
    for name, dt, shape in table:
        n = int(np.prod(shape)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    (crc,) = r.unpack("<I")
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after checksum")
    if zlib.crc32(r.buf[: r.pos - 4]) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    return arrays, counts, meta


def save_checkpoint(path, scene: Scene, field_params: dict, counts: dict[str, int], meta: str = "") -> None:
    """Write atomically: the file appears complete or not at all."""
    arrays = {f"scene.{a}": v for a, v in scene.arrays().items()}
    arrays["scene.extent"] = np.array([scene.extent], dtype=np.float64)
    for name, p in field_params.items():
        arrays[name] = getattr(p, "data", p)
    counts = dict(counts, N=len(scene), D_d=scene.dyn_dim)
    blob = encode(arrays, counts, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path, expect: dict[str, int] | None = None) -> Checkpoint:
    """Read ``path``; ``expect`` pins counts (e.g. ``{"D_d": 8}``) that must match."""
    with open(path, "rb") as f:
        raw = f.read()
    arrays, counts, meta = decode(raw)
    for key, want in (expect or {}).items():
        if counts.get(key) != want:
            raise DimensionMismatch(f"checkpoint has {key}={counts.get(key)}, expected {want}")
    missing = [a for a in ATTRS if f"scene.{a}" not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks scene arrays {missing}")
    if arrays["scene.mu"].shape[0] != counts["N"] or arrays["scene.dyn_attr"].shape[1] != counts["D_d"]:
        raise DimensionMismatch("array shapes disagree with the header counts")
    extent = float(arrays.pop("scene.extent")[0]) if "scene.extent" in arrays else 1.0
    return Checkpoint(arrays, counts, meta, extent)
