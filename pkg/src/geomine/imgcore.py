"""Raster and field types plus the PGM / VF1 / VS1 codecs.

Arrays are stored row-major as ``(height, width)`` for images and scalar
fields and ``(height, width, channels)`` for vector fields. Channel 0 of a
vector field is the column (x) displacement, channel 1 the row (y)
displacement, channel 2 (when present) the out-of-plane (z) component.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np


class FormatError(ValueError):
    """Malformed file content. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class TruncationError(FormatError):
    """Payload shorter than the header promises."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    """2-D grayscale image with real-valued intensities in ``[0, max_value]``."""

    data: np.ndarray
    max_value: int = 255

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"image data must be a non-empty 2-D array, got shape {data.shape}")
        if int(self.max_value) != self.max_value or self.max_value < 1:
            raise ValueError(f"max_value must be a positive integer, got {self.max_value}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image data contains non-finite values")
        if data.min() < 0 or data.max() > self.max_value:
            raise ValueError(f"image values must lie in [0, {self.max_value}]")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "max_value", int(self.max_value))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @classmethod
    def from_flat(cls, width: int, height: int, max_value: int, values) -> "Image":
        values = np.asarray(values, dtype=np.float64)
        if values.size != width * height:
            raise ValueError(f"expected {width * height} values, got {values.size}")
        return cls(values.reshape(height, width), max_value)


@dataclass(frozen=True, eq=False)
class VectorField:
    """Dense per-pixel displacement field with 2 or 3 components, in pixels."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 3 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"field data must have shape (h, w, c), got {data.shape}")
        if data.shape[2] not in (2, 3):
            raise ValueError(f"field channels must be 2 or 3, got {data.shape[2]}")
        if not np.all(np.isfinite(data)):
            raise ValueError("field contains non-finite components")
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @classmethod
    def zeros(cls, height: int, width: int, channels: int = 2) -> "VectorField":
        return cls(np.zeros((height, width, channels)))

    @classmethod
    def from_flat(cls, width: int, height: int, channels: int, values) -> "VectorField":
        values = np.asarray(values, dtype=np.float64)
        if values.size != width * height * channels:
            raise ValueError(f"expected {width * height * channels} values, got {values.size}")
        return cls(values.reshape(height, width, channels))


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Dense per-pixel real-valued map (e.g. a Jacobian determinant)."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"scalar field must be a non-empty 2-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("scalar field contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5)


def mean_squared_difference(a: np.ndarray, b: np.ndarray) -> float:
    """Mean of elementwise squared differences; shared by every MSE-type quantity."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(diff * diff))


# --------------------------------------------------------------------------
# PGM
# --------------------------------------------------------------------------

_WHITESPACE = b" \t\n\r\v\f"


class _HeaderReader:
    def __init__(self, buf: bytes, pos: int):
        self.buf = buf
        self.pos = pos

    def skip_separators(self) -> None:
        buf = self.buf
        while self.pos < len(buf):
            c = buf[self.pos]
            if c in _WHITESPACE:
                self.pos += 1
            elif c == ord("#"):
                end = buf.find(b"\n", self.pos)
                self.pos = len(buf) if end < 0 else end + 1
            else:
                return

    def integer(self, name: str) -> int:
        start = self.pos
        buf = self.buf
        while self.pos < len(buf) and buf[self.pos] not in _WHITESPACE:
            self.pos += 1
        token = buf[start:self.pos]
        if not token:
            raise TruncationError(f"missing {name} in PGM header", start)
        if not token.isdigit():
            raise FormatError(f"invalid {name} {token!r} in PGM header", start)
        return int(token)


def decode_image(buf: bytes) -> Image:
    """Decode a P2 (ASCII) or P5 (binary) PGM file.

    Header comments (``#`` to end of line) are accepted between tokens. P5
    payloads use one byte per sample when ``max_value <= 255`` and two
    big-endian bytes otherwise, and must have exactly the promised length.
    """
    buf = bytes(buf)
    if len(buf) < 2:
        raise TruncationError("file too short for a PGM magic number", 0)
    magic = buf[:2]
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"unsupported magic {magic!r}", 0)
    if len(buf) < 3:
        raise TruncationError("PGM header ends after magic number", 2)
    if buf[2] not in _WHITESPACE:
        raise FormatError("expected whitespace after magic number", 2)

    reader = _HeaderReader(buf, 2)
    dims = []
    for name in ("width", "height", "max value"):
        reader.skip_separators()
        offset = reader.pos
        value = reader.integer(name)
        if name == "max value" and not 1 <= value <= 65535:
            raise FormatError(f"max value {value} outside 1..65535", offset)
        if name != "max value" and value < 1:
            raise FormatError(f"{name} must be at least 1", offset)
        dims.append(value)
    width, height, max_value = dims
    count = width * height

    if magic == b"P5":
        if reader.pos >= len(buf):
            raise TruncationError("missing separator before PGM payload", reader.pos)
        start = reader.pos + 1  # exactly one whitespace byte precedes the raster
        sample = 1 if max_value <= 255 else 2
        expected = count * sample
        payload = buf[start:]
        if len(payload) < expected:
            raise TruncationError(
                f"payload has {len(payload)} bytes, expected {expected}", len(buf)
            )
        if len(payload) > expected:
            raise FormatError(
                f"payload has {len(payload) - expected} trailing bytes", start + expected
            )
        dtype = np.uint8 if sample == 1 else np.dtype(">u2")
        values = np.frombuffer(payload, dtype=dtype).astype(np.float64)
        bad = np.nonzero(values > max_value)[0]
        if bad.size:
            raise FormatError(f"sample exceeds max value {max_value}", start + int(bad[0]) * sample)
    else:
        if count > len(buf) - reader.pos:
            raise TruncationError(f"P2 raster cannot hold {count} samples", len(buf))
        values = np.empty(count, dtype=np.float64)
        for i in range(count):
            reader.skip_separators()
            offset = reader.pos
            v = reader.integer(f"sample {i}")
            if v > max_value:
                raise FormatError(f"sample {v} exceeds max value {max_value}", offset)
            values[i] = v
        reader.skip_separators()
        if reader.pos != len(buf):
            raise FormatError("unexpected data after P2 raster", reader.pos)

    return Image(values.reshape(height, width), max_value)


def encode_image(img: Image) -> bytes:
    """Encode as canonical P5 (no comments); samples are rounded half-up."""
    header = f"P5\n{img.width} {img.height}\n{img.max_value}\n".encode("ascii")
    values = np.clip(round_half_up(img.data), 0, img.max_value)
    dtype = np.uint8 if img.max_value <= 255 else np.dtype(">u2")
    return header + values.astype(dtype).tobytes()


# --------------------------------------------------------------------------
# VF1 (vector fields) and VS1 (scalar fields)
# --------------------------------------------------------------------------

_VF1_HEADER = re.compile(rb"VF1 (\d+) (\d+) (\d+)\n")
_VS1_HEADER = re.compile(rb"VS1 (\d+) (\d+)\n")


def _float_payload(buf: bytes, start: int, count: int) -> np.ndarray:
    expected = 4 * count
    payload = buf[start:]
    if len(payload) < expected:
        raise TruncationError(f"payload has {len(payload)} bytes, expected {expected}", len(buf))
    if len(payload) > expected:
        raise FormatError(
            f"payload length {len(payload)} does not match dimensions ({expected} bytes)",
            start + expected,
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    bad = np.nonzero(~np.isfinite(values))[0]
    if bad.size:
        raise FormatError("non-finite component in payload", start + 4 * int(bad[0]))
    return values


def decode_field(buf: bytes) -> VectorField:
    """Decode a VF1 file: ``"VF1 <w> <h> <c>\\n"`` then little-endian float32 samples."""
    buf = bytes(buf)
    if not buf.startswith(b"VF1 "):
        raise FormatError(f"bad VF1 magic {buf[:4]!r}", 0)
    m = _VF1_HEADER.match(buf)
    if m is None:
        raise FormatError("malformed VF1 header", 0)
    width, height, channels = (int(g) for g in m.groups())
    if channels not in (2, 3):
        raise FormatError(f"VF1 channels must be 2 or 3, got {channels}", m.start(3))
    if width < 1 or height < 1:
        raise FormatError("VF1 dimensions must be positive", m.start(1))
    values = _float_payload(buf, m.end(), width * height * channels)
    return VectorField(values.reshape(height, width, channels))


def encode_field(f: VectorField) -> bytes:
    """Encode as VF1. Components are stored as float32."""
    header = f"VF1 {f.width} {f.height} {f.channels}\n".encode("ascii")
    return header + f.data.astype("<f4").tobytes()


def decode_scalar(buf: bytes) -> ScalarField:
    """Decode a VS1 file: ``"VS1 <w> <h>\\n"`` then little-endian float32 samples."""
    buf = bytes(buf)
    if not buf.startswith(b"VS1 "):
        raise FormatError(f"bad VS1 magic {buf[:4]!r}", 0)
    m = _VS1_HEADER.match(buf)
    if m is None:
        raise FormatError("malformed VS1 header", 0)
    width, height = int(m.group(1)), int(m.group(2))
    if width < 1 or height < 1:
        raise FormatError("VS1 dimensions must be positive", m.start(1))
    values = _float_payload(buf, m.end(), width * height)
    return ScalarField(values.reshape(height, width))


def encode_scalar(f: ScalarField) -> bytes:
    header = f"VS1 {f.width} {f.height}\n".encode("ascii")
    return header + f.data.astype("<f4").tobytes()


def float32_exact(values: np.ndarray) -> bool:
    values = np.asarray(values, dtype=np.float64)
    return bool(np.array_equal(values.astype(np.float32).astype(np.float64), values))


__all__ = [
    "FormatError",
    "TruncationError",
    "Image",
    "VectorField",
    "ScalarField",
    "decode_image",
    "encode_image",
    "decode_field",
    "encode_field",
    "decode_scalar",
    "encode_scalar",
    "round_half_up",
    "mean_squared_difference",
]
