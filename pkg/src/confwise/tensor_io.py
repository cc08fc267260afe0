"""SEGT binary tensor files, CSV import, and label/probability map validation.

Layout of a SEGT file (all integers little-endian)::

    offset  size  field
    0       4     magic b"SEGT"
    4       2     format version, uint16 (currently 1)
    6       1     dtype code, uint8 (0=f32, 1=f64, 2=u8)
    7       1     ndim, uint8
    8       4*nd  dimensions, uint32 each
    ...           payload, row-major, little-endian

Tensors are plain ``numpy.ndarray`` objects; only float32, float64 and uint8
can be stored.
"""
from __future__ import annotations

import csv
import os
import struct

import numpy as np

MAGIC = b"SEGT"
VERSION = 1

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_DTYPES = {code: dt for dt, code in _CODES.items()}


class TensorFormatError(ValueError):
    """Base class for malformed SEGT files."""

    def __init__(self, path, message):
        self.path = os.fspath(path)
        super().__init__(f"{self.path}: {message}")


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class UnknownDtypeError(TensorFormatError):
    pass


class TruncatedFileError(TensorFormatError):
    pass


class ShapeMismatchError(TensorFormatError):
    """Payload length disagrees with the header shape."""


def _normalize(t):
    t = np.asarray(t)
    dt = t.dtype.newbyteorder("<") if t.dtype.byteorder == ">" else t.dtype
    if dt not in _CODES:
        raise TypeError(f"unsupported tensor dtype {t.dtype}; expected float32, float64 or uint8")
    if t.ndim == 0 or t.ndim > 255 or any(d < 1 for d in t.shape):
        raise ValueError(f"tensor shape {t.shape} must have 1..255 dimensions, each >= 1")
    return np.ascontiguousarray(t, dtype=dt.newbyteorder("<"))


def encode_tensor(t) -> bytes:
    t = _normalize(t)
    header = MAGIC + struct.pack("<HBB", VERSION, _CODES[t.dtype], t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    return header + t.tobytes(order="C")


def decode_tensor(buf: bytes, path="<bytes>") -> np.ndarray:
    if not MAGIC.startswith(buf[:4]):
        raise BadMagicError(path, f"bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise TruncatedFileError(path, "file shorter than the fixed header")
    version, code, ndim = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(path, f"unsupported format version {version}")
    if code not in _DTYPES:
        raise UnknownDtypeError(path, f"unknown dtype code {code}")
    if ndim == 0:
        raise ShapeMismatchError(path, "ndim is 0")
    end = 8 + 4 * ndim
    if len(buf) < end:
        raise TruncatedFileError(path, "file ends inside the shape header")
    shape = struct.unpack_from(f"<{ndim}I", buf, 8)
    if any(d == 0 for d in shape):
        raise ShapeMismatchError(path, f"zero-sized dimension in shape {shape}")
    dt = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    payload = len(buf) - end
    if payload < expected:
        raise TruncatedFileError(path, f"payload has {payload} bytes, header needs {expected}")
    if payload > expected:
        raise ShapeMismatchError(path, f"payload has {payload} bytes, header shape {shape} needs {expected}")
    return np.frombuffer(buf, dtype=dt, offset=end).reshape(shape).copy()


def write_tensor(path, t) -> None:
    data = encode_tensor(t)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write tensor: {exc.strerror}", os.fspath(path)) from exc


def read_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read tensor: {exc.strerror}", os.fspath(path)) from exc
    return decode_tensor(buf, path)


def read_csv_tensor(path, shape=None, dtype=np.float64) -> np.ndarray:
    """Import a tensor from CSV rows ``h,w,c,value`` (one row per pixel and channel).

    The result has shape ``[C, H, W]``; an optional header row is skipped. Cells
    not listed in the file are zero. With ``shape`` given, coordinates outside
    it are rejected; otherwise the extent is inferred from the maximum indices.
    For label maps write ``c = 0`` and use ``dtype=np.uint8``; the channel axis
    is then squeezed away.
    """
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or rec[0].lstrip().startswith("#"):
                continue
            try:
                h, w, c = (int(v) for v in rec[:3])
                value = float(rec[3])
            except (ValueError, IndexError):
                if lineno == 1:
                    continue  # header
                raise ValueError(f"{path}:{lineno}: expected 'h,w,c,value', got {rec!r}") from None
            if min(h, w, c) < 0:
                raise ValueError(f"{path}:{lineno}: negative index")
            rows.append((h, w, c, value))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    idx = np.array([r[:3] for r in rows], dtype=np.int64)
    vals = np.array([r[3] for r in rows])
    if shape is None:
        H, W, C = (idx.max(axis=0) + 1).tolist()
    else:
        C, H, W = shape
        if (idx >= np.array([H, W, C])).any():
            raise ValueError(f"{path}: index outside shape {shape}")
    out = np.zeros((C, H, W), dtype=dtype)
    out[idx[:, 2], idx[:, 0], idx[:, 1]] = vals
    if np.dtype(dtype) == np.uint8 and C == 1:
        return out[0]
    return out


def check_labels(labels, num_classes: int) -> np.ndarray:
    """Validate an ``[H, W]`` label map with values in ``[0, num_classes)``."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"label map must be integer, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels


def check_probs(probs, atol: float = 1e-5) -> np.ndarray:
    """Validate a ``[C, H, W]`` probability map and widen it to float64."""
    probs = np.asarray(probs)
    if probs.ndim != 3:
        raise ValueError(f"probability map must be [C,H,W], got shape {probs.shape}")
    probs = probs.astype(np.float64, copy=False)
    if not np.isfinite(probs).all():
        raise ValueError("probability map contains non-finite values")
    if probs.min() < 0 or probs.max() > 1:
        raise ValueError("probabilities must lie in [0, 1]")
    if np.abs(probs.sum(axis=0) - 1).max() > atol:
        raise ValueError("probabilities must sum to 1 over classes at every pixel")
    return probs


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = check_labels(labels, num_classes)
    return (np.arange(num_classes)[:, None, None] == labels[None]).astype(np.float64)
