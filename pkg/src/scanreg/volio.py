"""VMMVOL01 volume container and dataset manifest I/O.

Layout: 8-byte magic ``VMMVOL01``, five little-endian u32 fields (dtype code,
channels, D, H, W), three little-endian f32 spacings, then the raw payload in
C order with channels major. dtype code 0 is float64, 1 is int32. Round-trips
are bit-exact regardless of host endianness.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"VMMVOL01"
_HEADER = struct.Struct("<5I3f")
DTYPE_F64, DTYPE_I32 = 0, 1
_CODES = {DTYPE_F64: np.dtype("<f8"), DTYPE_I32: np.dtype("<i4")}


def write_volume(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a [D,H,W] or [C,D,H,W] array; floats as f64, integers as i32."""
    data = np.asarray(data)
    if data.ndim == 3:
        channels, extents = 1, data.shape
    elif data.ndim == 4:
        channels, extents = data.shape[0], data.shape[1:]
    else:
        raise FormatError(f"volume must be 3- or 4-dimensional, got shape {data.shape}")
    code = DTYPE_I32 if np.issubdtype(data.dtype, np.integer) else DTYPE_F64
    payload = np.ascontiguousarray(data, dtype=_CODES[code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(code, channels, *extents, *spacing))
        fh.write(payload)


def read_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a container; returns (data, spacing). Single-channel data is [D,H,W]."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"bad magic {raw[:8]!r}, expected {MAGIC!r}", offset=0)
    if len(raw) < 8 + _HEADER.size:
        raise FormatError("truncated header", offset=len(raw))
    code, channels, d, h, w, *spacing = _HEADER.unpack_from(raw, 8)
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}", offset=8)
    dtype = _CODES[code]
    expected = channels * d * h * w * dtype.itemsize
    start = 8 + _HEADER.size
    if len(raw) - start != expected:
        raise FormatError(f"payload is {len(raw) - start} bytes, expected {expected}",
                          offset=start)
    data = np.frombuffer(raw, dtype=dtype, offset=start).reshape(channels, d, h, w)
    data = data.astype(np.float64) if code == DTYPE_F64 else data.astype(np.int32)
    return (data[0] if channels == 1 else data), tuple(spacing)


def write_manifest(path, entries: list[dict]) -> None:
    """Dataset manifest: a JSON list of {seed, split, file path} records."""
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return json.load(fh)
