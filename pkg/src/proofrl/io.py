"""Binary raster (``RLC1``) and checkpoint (``RLCW``) formats.

RLC1 layout, all integers little-endian::

    b"RLC1" | u32 width | u32 height | u8 kind | row-major samples

kind 0 is an EM image (u8 samples), 1 a label map (u32), 2 a point map (f32).

RLCW layout::

    b"RLCW" | u32 count | count x f32 parameters | u32 meta_len | meta_len bytes of UTF-8 JSON
"""
import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .validation import check_em_image, check_label_map, check_point_map

RASTER_MAGIC = b"RLC1"
CHECKPOINT_MAGIC = b"RLCW"

KIND_EM, KIND_LABELS, KIND_POINTS = 0, 1, 2
_SAMPLE_DTYPES = {
    KIND_EM: np.dtype("u1"),
    KIND_LABELS: np.dtype("<u4"),
    KIND_POINTS: np.dtype("<f4"),
}
_HEADER = struct.Struct("<4sIIB")


def raster_to_bytes(raster, kind):
    if kind == KIND_EM:
        arr = check_em_image(raster)
    elif kind == KIND_LABELS:
        arr = check_label_map(raster)
    elif kind == KIND_POINTS:
        arr = check_point_map(raster)
    else:
        raise FormatError(f"unknown raster kind {kind}")
    h, w = arr.shape
    body = np.ascontiguousarray(arr, dtype=_SAMPLE_DTYPES[kind]).tobytes()
    return _HEADER.pack(RASTER_MAGIC, w, h, kind) + body


def raster_from_bytes(data):
    """Parse RLC1 bytes; returns ``(array, kind)`` with native-endian dtype."""
    if len(data) < _HEADER.size:
        raise FormatError("truncated RLC1 header")
    magic, w, h, kind = _HEADER.unpack_from(data)
    if magic != RASTER_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if kind not in _SAMPLE_DTYPES:
        raise FormatError(f"unknown raster kind {kind}")
    dtype = _SAMPLE_DTYPES[kind]
    expected = _HEADER.size + w * h * dtype.itemsize
    if len(data) != expected:
        raise FormatError(f"RLC1 payload is {len(data)} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype=dtype, offset=_HEADER.size).reshape(h, w)
    return arr.astype(dtype.newbyteorder("="), copy=True), kind


def write_raster(path, raster, kind):
    Path(path).write_bytes(raster_to_bytes(raster, kind))


def read_raster(path, expect_kind=None):
    arr, kind = raster_from_bytes(Path(path).read_bytes())
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"{path}: expected raster kind {expect_kind}, found {kind}")
    return arr


def checkpoint_to_bytes(params, metadata):
    params = np.asarray(params, dtype="<f4").ravel()
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<I", params.size),
        params.tobytes(),
        struct.pack("<I", len(meta)),
        meta,
    ])


def checkpoint_from_bytes(data):
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {bytes(data[:4])!r}")
    (count,) = struct.unpack_from("<I", data, 4)
    start = 8
    stop = start + 4 * count
    if len(data) < stop + 4:
        raise FormatError("truncated RLCW parameters")
    params = np.frombuffer(data, dtype="<f4", count=count, offset=start).astype(np.float32)
    (meta_len,) = struct.unpack_from("<I", data, stop)
    meta_bytes = data[stop + 4:stop + 4 + meta_len]
    if len(meta_bytes) != meta_len or len(data) != stop + 4 + meta_len:
        raise FormatError("RLCW metadata block has the wrong length")
    return params, json.loads(meta_bytes.decode("utf-8"))


def write_checkpoint(path, params, metadata):
    Path(path).write_bytes(checkpoint_to_bytes(params, metadata))


def read_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())
