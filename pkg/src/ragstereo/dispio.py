"""Disparity map files: PFM (little-endian float32) and KITTI-style 16-bit PNG."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

PNG_SCALE = 256.0


def write_pfm(path, disparity: np.ndarray):
    data = np.asarray(disparity, dtype="<f4")
    if data.ndim != 2:
        raise ValueError(f"PFM writer expects a 2-D map, got shape {data.shape}")
    h, w = data.shape
    with open(path, "wb") as f:
        # negative scale marks little-endian; rows are stored bottom to top
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file (header {header!r})")
        channels = 1 if header == b"Pf" else 3
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * channels
        data = np.frombuffer(f.read(4 * count), dtype=dtype)
    if data.size != count:
        raise ValueError(f"{path}: truncated PFM payload")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_png16(path, disparity: np.ndarray):
    """Quantise to 1/256 px; zero encodes an invalid pixel."""
    d = np.asarray(disparity, dtype=np.float64)
    q = np.clip(np.round(d * PNG_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(Path(path), format="PNG")


def read_png16(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (disparity in px, validity mask)."""
    raw = np.asarray(Image.open(path)).astype(np.float64)
    return (raw / PNG_SCALE).astype(np.float32), raw > 0
