"""Binary file formats. Everything is little-endian.

    PTNSR1  one tensor: magic, u8 precision (1 single, 2 double), u8
            rank, u32 extents, raw row-major buffer
    PCKPT1  checkpoint: magic, then (u16 name length, utf-8 name,
            PTNSR1 payload) records until end of file
    PTC1    channel raster: magic, u32 height, u32 width, u8 plane
            count, NUL-terminated utf-8 plane names, float32 planes
    PLBL1   label raster: magic, u32 height, u32 width, u16 class
            count, NUL-terminated class names, u16 per pixel (0 means
            unlabeled)

Writers go through a temp file plus rename, so readers never observe a
half-written file. Readers raise DataError with the byte offset where
parsing stopped making sense.
"""

from __future__ import annotations

import os
import struct
import tempfile
from collections import OrderedDict

import numpy as np

from .errors import DataError

TENSOR_MAGIC = b"PTNSR1"
CHECKPOINT_MAGIC = b"PCKPT1"
RASTER_MAGIC = b"PTC1"
LABELS_MAGIC = b"PLBL1"

_PRECISION_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def atomic_write(path, data: bytes):
    """Write bytes then rename into place; partial files never land."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=os.path.basename(path) + ".", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _read_bytes(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {os.fspath(path)}: {exc}") from None


class _Reader:
    def __init__(self, buf, origin):
        self.buf = buf
        self.off = 0
        self.origin = origin

    def fail(self, why):
        raise DataError(f"{self.origin}: {why} at byte {self.off}")

    def take(self, n, what):
        if self.off + n > len(self.buf):
            self.fail(f"truncated while reading {what}")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def magic(self, expected):
        got = self.take(len(expected), "magic")
        if got != expected:
            self.off = 0
            self.fail(f"bad magic {got!r}, expected {expected!r}")

    def u8(self, what):
        return self.take(1, what)[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def cstring(self, what):
        end = self.buf.find(b"\0", self.off)
        if end < 0:
            self.fail(f"unterminated {what}")
        raw = self.buf[self.off : end]
        self.off = end + 1
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            self.fail(f"{what} is not valid utf-8")

    def done(self):
        return self.off >= len(self.buf)

    def expect_end(self):
        if not self.done():
            self.fail(f"{len(self.buf) - self.off} unexpected trailing bytes")


# -- PTNSR1 ---------------------------------------------------------------


def tensor_to_bytes(arr):
    # asarray, not ascontiguousarray: the latter promotes rank-0 to rank-1
    # and the header records the true rank.  tobytes() emits C order anyway.
    arr = np.asarray(arr)
    if arr.dtype not in _CODE_FOR_DTYPE:
        raise TypeError(f"only float32/float64 tensors serialize, got {arr.dtype}")
    parts = [
        TENSOR_MAGIC,
        struct.pack("<BB", _CODE_FOR_DTYPE[arr.dtype], arr.ndim),
        struct.pack(f"<{arr.ndim}I", *arr.shape),
        arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(),
    ]
    return b"".join(parts)


def _read_tensor(r):
    r.magic(TENSOR_MAGIC)
    code = r.u8("precision code")
    if code not in _PRECISION_CODES:
        r.off -= 1
        r.fail(f"unknown precision code {code}")
    dtype = _PRECISION_CODES[code]
    rank = r.u8("rank")
    shape = tuple(r.u32(f"extent {i}") for i in range(rank))
    count = 1
    for s in shape:
        if s < 1:
            r.fail(f"invalid extent {s}")
        count *= s
    raw = r.take(count * dtype.itemsize, "tensor buffer")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def write_tensor(path, arr):
    atomic_write(path, tensor_to_bytes(arr))


def read_tensor(path):
    r = _Reader(_read_bytes(path), os.fspath(path))
    arr = _read_tensor(r)
    r.expect_end()
    return arr


# -- PCKPT1 ---------------------------------------------------------------


def write_checkpoint(path, entries):
    """entries: iterable of (name, ndarray); order is preserved on disk."""
    parts = [CHECKPOINT_MAGIC]
    seen = set()
    for name, arr in entries:
        raw = name.encode("utf-8")
        if not raw or len(raw) > 0xFFFF:
            raise ValueError(f"bad checkpoint entry name {name!r}")
        if name in seen:
            raise ValueError(f"duplicate checkpoint entry {name!r}")
        seen.add(name)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(tensor_to_bytes(arr))
    atomic_write(path, b"".join(parts))


def read_checkpoint(path):
    r = _Reader(_read_bytes(path), os.fspath(path))
    r.magic(CHECKPOINT_MAGIC)
    entries = OrderedDict()
    while not r.done():
        n = r.u16("name length")
        name = r.take(n, "entry name").decode("utf-8")
        if name in entries:
            r.fail(f"duplicate entry {name!r}")
        entries[name] = _read_tensor(r)
    return entries


# -- PTC1 -----------------------------------------------------------------


def write_raster(path, planes):
    """planes: iterable of (name, 2-d float array); all same shape."""
    planes = [(n, np.asarray(p)) for n, p in planes]
    if not planes:
        raise ValueError("a raster needs at least one plane")
    h, w = planes[0][1].shape
    parts = [RASTER_MAGIC, struct.pack("<IIB", h, w, len(planes))]
    seen = set()
    for name, _ in planes:
        raw = name.encode("utf-8")
        if b"\0" in raw or not raw:
            raise ValueError(f"bad plane name {name!r}")
        if name in seen:
            raise ValueError(f"duplicate plane name {name!r}")
        seen.add(name)
        parts.append(raw + b"\0")
    for name, plane in planes:
        if plane.shape != (h, w):
            raise ValueError(f"plane {name!r} is {plane.shape}, expected {(h, w)}")
        parts.append(np.ascontiguousarray(plane, dtype="<f4").tobytes())
    atomic_write(path, b"".join(parts))


def read_raster(path):
    """Returns (names, data) with data shaped (planes, H, W) float32."""
    r = _Reader(_read_bytes(path), os.fspath(path))
    r.magic(RASTER_MAGIC)
    h = r.u32("height")
    w = r.u32("width")
    count = r.u8("plane count")
    if h < 1 or w < 1 or count < 1:
        r.fail(f"degenerate raster {h}x{w} with {count} planes")
    names = tuple(r.cstring(f"plane name {i}") for i in range(count))
    data = np.empty((count, h, w), dtype=np.float32)
    for i in range(count):
        raw = r.take(h * w * 4, f"plane {names[i]!r}")
        data[i] = np.frombuffer(raw, dtype="<f4").reshape(h, w)
    r.expect_end()
    return names, data


# -- PLBL1 ----------------------------------------------------------------


def write_labels(path, labels, class_names):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label raster must be 2-d, got {labels.shape}")
    n = len(class_names)
    if n < 1 or n > 0xFFFF:
        raise ValueError(f"class count {n} out of range")
    if labels.min() < 0 or labels.max() > n:
        raise ValueError(f"label ids must lie in 0..{n}")
    h, w = labels.shape
    parts = [LABELS_MAGIC, struct.pack("<IIH", h, w, n)]
    for name in class_names:
        raw = name.encode("utf-8")
        if b"\0" in raw or not raw:
            raise ValueError(f"bad class name {name!r}")
        parts.append(raw + b"\0")
    parts.append(np.ascontiguousarray(labels, dtype="<u2").tobytes())
    atomic_write(path, b"".join(parts))


def read_labels(path):
    """Returns (labels int32 (H, W), class names)."""
    r = _Reader(_read_bytes(path), os.fspath(path))
    r.magic(LABELS_MAGIC)
    h = r.u32("height")
    w = r.u32("width")
    n = r.u16("class count")
    if h < 1 or w < 1 or n < 1:
        r.fail(f"degenerate label raster {h}x{w} with {n} classes")
    names = tuple(r.cstring(f"class name {i}") for i in range(n))
    raw = r.take(h * w * 2, "label buffer")
    labels = np.frombuffer(raw, dtype="<u2").reshape(h, w).astype(np.int32)
    r.expect_end()
    if labels.max() > n:
        r.off = len(r.buf) - h * w * 2
        r.fail(f"label id {labels.max()} exceeds class count {n}")
    return labels, names
