"""Binary feature files and PGM mask files.

Feature file layout (little-endian)::

    b"FCPF" | u32 version | u32 ndim | u32 dims[ndim] | f32 payload (row-major)
"""

from __future__ import annotations

import os
import struct

import numpy as np

FEATURE_MAGIC = b"FCPF"
FEATURE_VERSION = 1


class FormatError(ValueError):
    pass


def save_feature_map(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write ``array`` as float32. Values not representable in float32 are rounded."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = FEATURE_MAGIC + struct.pack("<II", FEATURE_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def load_feature_map(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = 12 + 4 * ndim
    if len(raw) < offset:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", raw, 12)
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if len(raw) - offset != expected:
        raise FormatError(f"{path}: payload has {len(raw) - offset} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(dims).astype(np.float32)


def save_mask_pgm(path: str | os.PathLike, mask: np.ndarray) -> None:
    """Write a [0, 1] mask as binary PGM (P5, maxval 255)."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise FormatError("mask must be 2-d")
    pix = np.clip(np.rint(m * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def _pgm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1  # single whitespace byte before the raster


def load_mask_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a P5 PGM as a binary float mask: foreground where value >= 128."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = _pgm_tokens(raw, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    data = raw[pos : pos + width * height]
    if len(data) != width * height:
        raise FormatError(f"{path}: truncated raster")
    pix = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
    return (pix >= 128).astype(np.float64)
