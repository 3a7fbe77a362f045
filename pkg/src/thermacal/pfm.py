"""Minimal Portable Float Map I/O.

Only the grayscale variant ("Pf") is supported. Files are written
little-endian (scale -1.0) with the conventional bottom-to-top row order.
NaN encodes missing pixels.
"""

import numpy as np

from .errors import ContractError


def write_pfm(path, data):
    """Write a 2-D float array as a grayscale PFM file."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ContractError(f"PFM writer expects a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        f.write(np.flipud(arr.astype("<f4")).tobytes())


def _read_token(f, path):
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise ContractError(f"{path}: truncated PFM header")
        if c.isspace():
            if tok:
                return tok
        else:
            tok += c


def read_pfm(path):
    """Read a grayscale PFM file into a float64 H x W array."""
    try:
        f = open(path, "rb")
    except OSError as e:
        raise ContractError(f"cannot read {path}: {e}") from None
    with f:
        magic = _read_token(f, path)
        if magic != b"Pf":
            raise ContractError(f"{path}: expected grayscale PFM magic 'Pf', got {magic!r}")
        try:
            w = int(_read_token(f, path))
            h = int(_read_token(f, path))
            scale = float(_read_token(f, path))
        except ValueError as e:
            raise ContractError(f"{path}: malformed PFM header ({e})") from None
        if w <= 0 or h <= 0:
            raise ContractError(f"{path}: invalid PFM dimensions {w}x{h}")
        payload = f.read()
    if len(payload) != 4 * w * h:
        raise ContractError(
            f"{path}: PFM payload has {len(payload)} bytes, expected {4 * w * h}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return np.flipud(arr).astype(np.float64)
