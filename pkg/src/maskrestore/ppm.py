"""Binary portable pixmap I/O: P6 for color images, P5 for masks."""

from __future__ import annotations

import numpy as np


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3,H,W) float image in [0,1] as an 8-bit binary P6 file."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) image, got shape {img.shape}")
    data = np.clip(img * 255.0, 0, 255).round().astype(np.uint8)
    h, w = img.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.transpose(1, 2, 0).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Write a (H,W) float image in [0,1] as an 8-bit binary P5 file."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"expected (H,W) image, got shape {img.shape}")
    data = np.clip(img * 255.0, 0, 255).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def _read_header(fh, magic: bytes):
    if fh.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise ValueError("truncated pixmap header")
        text = line.split(b"#", 1)[0]
        fields.extend(int(tok) for tok in text.split())
    w, h, maxval = fields[:3]
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    return w, h


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into a (3,H,W) float64 image in [0,1]."""
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P6")
        raw = fh.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise ValueError(f"truncated pixel data in {path}")
        data = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return data.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P5")
        raw = fh.read(w * h)
        if len(raw) != w * h:
            raise ValueError(f"truncated pixel data in {path}")
        data = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / 255.0
