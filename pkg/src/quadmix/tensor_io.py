"""Tensor containers, the QTNS binary format and PPM image emission.

Tensors are plain numpy arrays restricted to three dtypes (float32, uint8,
uint16).  QTNS layout::

    b"QTNS" | version u8 (=1) | dtype u8 | rank u8 | rank x u32 LE dims | payload

The payload is the row-major array in little-endian byte order, so files are
byte-identical across hosts.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .errors import FormatError, ShapeError, TensorIOError, TruncationError

MAGIC = b"QTNS"
VERSION = 1
MAX_RANK = 5
IGNORE = 255

DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("u1"): 1, np.dtype("<u2"): 2}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}

PathOrStream = Union[str, Path, BinaryIO]


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel category ids (uint16, H x W) with IGNORE for unlabeled pixels."""

    values: np.ndarray
    num_categories: int
    ignore_value: int = IGNORE

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ShapeError(f"label map must be H x W, got shape {values.shape}")
        if self.num_categories < 2:
            raise ShapeError(f"num_categories must be >= 2, got {self.num_categories}")
        if self.num_categories > self.ignore_value:
            raise ShapeError("num_categories collides with ignore_value")
        values = values.astype(np.uint16, copy=False)
        bad = (values >= self.num_categories) & (values != self.ignore_value)
        if bad.any():
            raise ShapeError(f"label ids outside [0, {self.num_categories}) found: {np.unique(values[bad])[:5]}")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def valid(self) -> np.ndarray:
        return self.values != self.ignore_value

    def with_values(self, values: np.ndarray) -> "LabelMap":
        return LabelMap(values, self.num_categories, self.ignore_value)


def check_flow(flow: np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Validate an H x W x 2 backward flow field (u = dx, v = dy)."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ShapeError(f"flow must be H x W x 2, got {flow.shape}")
    if shape is not None and flow.shape[:2] != tuple(shape):
        raise ShapeError(f"flow is {flow.shape[:2]}, expected {tuple(shape)}")
    if not np.isfinite(flow).all():
        raise ShapeError("flow contains NaN or Inf")
    return flow


def check_frames(frames: np.ndarray) -> np.ndarray:
    """Validate a T x C x H x W frame stack with T in {1, 2}."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] not in (1, 2):
        raise ShapeError(f"frame stack must be T x C x H x W with T in {{1, 2}}, got {frames.shape}")
    return frames


# --------------------------------------------------------------------------
# QTNS


def _normalize(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    dt = {"f4": "<f4", "u1": "u1", "u2": "<u2"}.get(f"{t.dtype.kind}{t.dtype.itemsize}")
    if dt is None:
        raise ShapeError(f"unsupported dtype {t.dtype}; use float32, uint8 or uint16")
    dt = np.dtype(dt)
    if not 1 <= t.ndim <= MAX_RANK:
        raise ShapeError(f"rank must be 1..{MAX_RANK}, got {t.ndim}")
    if min(t.shape) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got {t.shape}")
    return np.ascontiguousarray(t, dtype=dt)


def encode_tensor(t: np.ndarray) -> bytes:
    t = _normalize(t)
    header = MAGIC + bytes([VERSION, DTYPE_CODES[t.dtype], t.ndim])
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    return header + t.tobytes(order="C")


def write_tensor(t: np.ndarray, sink: PathOrStream) -> int:
    """Serialize ``t`` as QTNS into a path or binary stream; returns bytes written."""
    blob = encode_tensor(t)
    if isinstance(sink, (str, Path)):
        with open(sink, "wb") as fh:
            return _write_all(fh, blob)
    return _write_all(sink, blob)


def _write_all(fh: BinaryIO, blob: bytes) -> int:
    offset = 0
    view = memoryview(blob)
    try:
        while offset < len(blob):
            n = fh.write(view[offset:])
            if n is None:  # unbuffered raw streams may return None
                n = len(blob) - offset
            if n == 0:
                raise OSError("sink accepted zero bytes")
            offset += n
    except OSError as exc:
        raise TensorIOError(offset, exc) from exc
    return offset


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if data is None:
        data = b""
    if len(data) != n:
        raise TruncationError(n, len(data), what)
    return data


def read_tensor(source: PathOrStream) -> np.ndarray:
    """Inverse of :func:`write_tensor`; returns a read-only native-endian array."""
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return read_tensor(fh)
    if isinstance(source, (bytes, bytearray)):
        return read_tensor(io.BytesIO(source))
    magic = source.read(4) or b""
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, code, rank = _read_exact(source, 3, "header")
    if version != VERSION:
        raise FormatError(f"unsupported QTNS version {version}")
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"invalid rank {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(source, 4 * rank, "shape"))
    if min(dims) < 1:
        raise FormatError(f"zero-sized dimension in {dims}")
    dtype = CODE_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = source.read(expected) or b""
    if len(payload) != expected:
        raise TruncationError(expected, len(payload))
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=False)


def save_labels(label: LabelMap, path: PathOrStream) -> int:
    return write_tensor(label.values.astype(np.uint16), path)


def load_labels(path: PathOrStream, num_categories: int) -> LabelMap:
    values = read_tensor(path)
    if values.dtype != np.uint16:
        raise FormatError(f"label maps are stored as uint16, got {values.dtype}")
    return LabelMap(values, num_categories)


# --------------------------------------------------------------------------
# PPM


def palette(i: np.ndarray | int) -> np.ndarray:
    i = np.asarray(i, dtype=np.int64)
    rgb = np.stack([(i * 67) % 256, (i * 113) % 256, (i * 197) % 256], axis=-1)
    return rgb.astype(np.uint8)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def render_frame(frame: np.ndarray) -> np.ndarray:
    """C x H x W float frame (C in {1, 3}) -> H x W x 3 uint8."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[0] not in (1, 3):
        raise ShapeError(f"frame must be C x H x W with C in {{1, 3}}, got {frame.shape}")
    if frame.shape[0] == 1:
        frame = np.repeat(frame, 3, axis=0)
    return _to_u8(frame.transpose(1, 2, 0))


def render_labels(label: LabelMap) -> np.ndarray:
    rgb = palette(label.values)
    rgb[label.values == label.ignore_value] = 0
    return rgb


def render_flow(flow: np.ndarray) -> np.ndarray:
    """HSV flow coloring: hue from direction, value from magnitude / max magnitude."""
    flow = check_flow(flow).astype(np.float64)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    peak = mag.max()
    val = mag / peak if peak > 0 else np.zeros_like(mag)
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    h6 = hue * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    frac = h6 - np.floor(h6)
    p = np.zeros_like(val)
    q = val * (1.0 - frac)
    t = val * frac
    choices = [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)]
    rgb = np.zeros(flow.shape[:2] + (3,))
    for s, (r, g, b) in enumerate(choices):
        sel = sector == s
        rgb[sel, 0], rgb[sel, 1], rgb[sel, 2] = r[sel], g[sel], b[sel]
    return _to_u8(rgb)


def write_ppm(rgb: np.ndarray, sink: PathOrStream) -> int:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    blob = f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes()
    if isinstance(sink, (str, Path)):
        with open(sink, "wb") as fh:
            return _write_all(fh, blob)
    return _write_all(sink, blob)


def emit_image(obj, sink: PathOrStream, kind: str | None = None) -> int:
    """Write a frame, LabelMap or flow field as binary PPM.

    ``kind`` is one of ``"frame"``, ``"labels"``, ``"flow"``; it is inferred for
    LabelMap and must be given for arrays whose layout is ambiguous.
    """
    if isinstance(obj, LabelMap):
        rgb = render_labels(obj)
    else:
        arr = np.asarray(obj)
        if kind is None:
            if arr.ndim == 3 and arr.shape[0] in (1, 3) and arr.shape[2] != 2:
                kind = "frame"
            elif arr.ndim == 3 and arr.shape[2] == 2 and arr.shape[0] not in (1, 3):
                kind = "flow"
            else:
                raise ShapeError(f"cannot infer image kind for shape {arr.shape}; pass kind=")
        if kind == "frame":
            rgb = render_frame(arr)
        elif kind == "flow":
            rgb = render_flow(arr)
        elif kind == "labels":
            rgb = render_labels(LabelMap(arr, int(arr[arr != IGNORE].max(initial=1)) + 1))
        else:
            raise ValueError(f"unknown image kind {kind!r}")
    return write_ppm(rgb, sink)
