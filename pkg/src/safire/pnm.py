"""Binary PPM/PGM image files.

Plain-format headers (P6 for RGB, P5 for grayscale) with 8-bit samples.
Values travel as floats in [0, 1] on the python side and are rounded to
the nearest of 256 levels on write, so a write/read round trip is exact
for data that already sits on the uint8 grid.
"""

from __future__ import annotations

import numpy as np


class PnmError(ValueError):
    pass


def _quantize(values: np.ndarray) -> np.ndarray:
    if np.min(values) < 0.0 or np.max(values) > 1.0:
        raise PnmError("sample values must lie in [0, 1]")
    return np.rint(values * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an [H,W,3] float array in [0,1] as a binary P6 file."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise PnmError(f"expected [H,W,3], got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(_quantize(image).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Write an [H,W] float array in [0,1] as a binary P5 file."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise PnmError(f"expected [H,W], got {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(_quantize(image).tobytes())


def _read_header(f) -> tuple[bytes, int, int]:
    # header = magic, width, height, maxval as whitespace-separated tokens;
    # '#' starts a comment running to end of line
    tokens = []
    magic = f.read(2)
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported magic {magic!r}")
    while len(tokens) < 3:
        ch = f.read(1)
        if not ch:
            raise PnmError("truncated header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            continue
        tok = ch
        ch = f.read(1)
        while ch and not ch.isspace() and ch != b"#":
            tok += ch
            ch = f.read(1)
        tokens.append(tok)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise PnmError(f"bad header tokens {tokens}") from None
    if maxval != 255:
        raise PnmError(f"only maxval 255 is supported, got {maxval}")
    if w <= 0 or h <= 0:
        raise PnmError(f"bad dimensions {w}x{h}")
    return magic, w, h


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into an [H,W,3] float array in [0,1]."""
    with open(path, "rb") as f:
        magic, w, h = _read_header(f)
        if magic != b"P6":
            raise PnmError("not a P6 file")
        raw = f.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise PnmError("truncated pixel data")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 file into an [H,W] float array in [0,1]."""
    with open(path, "rb") as f:
        magic, w, h = _read_header(f)
        if magic != b"P5":
            raise PnmError("not a P5 file")
        raw = f.read(w * h)
    if len(raw) != w * h:
        raise PnmError("truncated pixel data")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / 255.0
