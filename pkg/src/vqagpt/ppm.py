"""Binary PPM (P6, 8-bit) image reading and writing.

The dataset stores every rendered scene as a P6 file so the corpus stays
dependency-free and diffable with standard tools.  Pixels cross this
boundary as float arrays of shape (H, W, 3) scaled to [0, 1]; quantization
to 8 bits happens only here.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def write_ppm(path, img: np.ndarray) -> None:
    """Write an (H, W, 3) float array in [0, 1] as a P6 file with maxval 255."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    raw = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(raw.tobytes())


def _read_header_token(f) -> bytes:
    # PPM headers allow '#' comments and arbitrary whitespace between tokens.
    token = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise DataError("truncated ppm header")
        if ch == b"#":
            while ch and ch != b"\n":
                ch = f.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_ppm(path) -> np.ndarray:
    """Read a P6 file into an (H, W, 3) float32 array scaled to [0, 1]."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P6":
            raise DataError(f"{path}: not a binary ppm (magic {magic!r})")
        try:
            w = int(_read_header_token(f))
            h = int(_read_header_token(f))
            maxval = int(_read_header_token(f))
        except ValueError as exc:
            raise DataError(f"{path}: malformed ppm header") from exc
        if maxval != 255:
            raise DataError(f"{path}: unsupported maxval {maxval}, expected 255")
        if w <= 0 or h <= 0:
            raise DataError(f"{path}: bad dimensions {w}x{h}")
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise DataError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float32) / 255.0
