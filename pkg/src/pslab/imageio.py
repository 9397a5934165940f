"""Binary PPM (P6) and PGM (P5) images with maxval 255."""
from __future__ import annotations

import os
import re

import numpy as np


class ImageFormatError(ValueError):
    pass


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to 0..255 with round-half-up (0.5 -> 128)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ImageFormatError(f"PGM needs a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write an ``H x W x 3`` uint8 array."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ImageFormatError(f"PPM needs an H x W x 3 uint8 array, got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


_HEADER = re.compile(rb"\A(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read a P5 or P6 file; returns ``H x W`` or ``H x W x 3`` uint8."""
    with open(path, "rb") as fh:
        buf = fh.read()
    m = _HEADER.match(buf)
    if not m:
        raise ImageFormatError(f"{path}: not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    data = buf[m.end():]
    if len(data) != w * h * channels:
        raise ImageFormatError(f"{path}: expected {w * h * channels} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8).copy()
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def chw_to_ppm_array(image: np.ndarray) -> np.ndarray:
    """Convert a ``3 x H x W`` float image in [0, 1] to ``H x W x 3`` uint8."""
    return to_uint8(np.transpose(np.asarray(image), (1, 2, 0)))
