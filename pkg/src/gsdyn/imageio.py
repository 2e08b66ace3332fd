"""PPM (8-bit) and PFM (32-bit float) image files."""

from __future__ import annotations

import os

import numpy as np


def write_ppm(path, img) -> None:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    h, w = arr.shape[:2]
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def _ppm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    data = open(path, "rb").read()
    (magic, w, h, maxval), pos = _ppm_tokens(data, 4)
    if magic not in (b"P6", b"P5"):
        raise ValueError(f"{path}: not a binary PPM/PGM file")
    w, h, maxval = int(w), int(h), int(maxval)
    ch = 3 if magic == b"P6" else 1
    dtype = np.uint8 if maxval < 256 else ">u2"
    arr = np.frombuffer(data, dtype=dtype, count=w * h * ch, offset=pos).reshape(h, w, ch)
    arr = arr.astype(np.float64) / maxval
    return np.repeat(arr, 3, axis=2) if ch == 1 else arr


def write_pfm(path, img) -> None:
    arr = np.asarray(img, dtype="<f4")
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        arr = np.frombuffer(f.read(w * h * ch * 4), dtype=dtype).reshape(h, w, ch)[::-1]
    arr = arr.astype(np.float64)
    return np.repeat(arr, 3, axis=2) if ch == 1 else arr


def read_image(path) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pfm":
        return read_pfm(path)
    if ext in (".ppm", ".pgm", ".pnm"):
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover
        raise ValueError(f"{path}: unsupported image format {ext!r} (install Pillow)") from None
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_image(stem, img) -> None:
    """Write ``stem.ppm`` and ``stem.pfm``."""
    write_ppm(f"{stem}.ppm", img)
    write_pfm(f"{stem}.pfm", img)
