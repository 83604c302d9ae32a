"""Binary (P5) PGM read/write for 8-bit grayscale images and masks.

Arrays are written row-major exactly as indexed, so an image stored as
(j, k) round-trips with the same layout.  Masks use the 0 = object
convention: object pixels are written as 0, background as 255.
"""

from __future__ import annotations

import numpy as np

__all__ = ["write_pgm", "read_pgm", "write_mask", "read_mask", "to_uint8"]


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a float image in [0, 1] to uint8; uint8 passes through."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    arr = to_uint8(image)
    if arr.ndim != 2:
        raise ValueError(f"write_pgm: expected a 2-D image, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    # header: magic, width, height, maxval as whitespace-separated tokens
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGMs are supported (maxval {maxval})")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


def write_mask(path, mask: np.ndarray) -> None:
    """Write a {0, 1} mask as a {0, 255} PGM (0 = object)."""
    arr = np.asarray(mask)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("write_mask: mask values must be 0 or 1")
    write_pgm(path, (arr * 255).astype(np.uint8))


def read_mask(path) -> np.ndarray:
    """Read a mask PGM back to {0, 1} (pixels > 127 count as background 1)."""
    return (read_pgm(path) > 127).astype(np.uint8)
