"""Binary matrix files, CRC-checked checkpoints and binary PGM images.

All multi-byte fields are little-endian regardless of host byte order, except
16-bit PGM samples, which the PGM format defines as big-endian.

Matrix record (24-byte header, then payload)::

    magic "SVFM" | version u8 = 1 | dtype u8 = 1 (f64) | reserved u16 = 0
    rows u64 | cols u64 | rows*cols f64 values, row-major

Checkpoint::

    magic "SVFC" | version u8 = 1 | tensor_count u32
    per tensor: name_len u16 | UTF-8 name | matrix record
    CRC32 (IEEE) of every preceding byte, u32
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import (
    BadFormat,
    BadMagic,
    ChecksumError,
    DuplicateName,
    InvalidInput,
    TruncatedPayload,
    UnsupportedMaxval,
    UnsupportedVersion,
)

MATRIX_MAGIC = b"SVFM"
CHECKPOINT_MAGIC = b"SVFC"
FORMAT_VERSION = 1
DTYPE_F64 = 1

_MATRIX_HEADER = struct.Struct("<4sBBHQQ")
_CKPT_HEADER = struct.Struct("<4sBI")
_NAME_LEN = struct.Struct("<H")
_CRC = struct.Struct("<I")
MATRIX_HEADER_SIZE = _MATRIX_HEADER.size


def _check_matrix(m) -> np.ndarray:
    a = np.asarray(m)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInput(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    a = a.astype(np.float64, copy=False)
    if not np.isfinite(a).all():
        raise InvalidInput("matrix contains NaN or Inf")
    return a


# -- matrices -----------------------------------------------------------------

def encode_matrix(m) -> bytes:
    a = _check_matrix(m)
    rows, cols = a.shape
    header = _MATRIX_HEADER.pack(MATRIX_MAGIC, FORMAT_VERSION, DTYPE_F64, 0, rows, cols)
    return header + np.ascontiguousarray(a, dtype="<f8").tobytes()


def decode_matrix(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one matrix record at ``offset``; return it and the end offset."""
    buf = memoryview(buf)
    if len(buf) - offset < MATRIX_HEADER_SIZE:
        if len(buf) - offset >= 4 and bytes(buf[offset:offset + 4]) != MATRIX_MAGIC:
            raise BadMagic(f"bad matrix magic {bytes(buf[offset:offset + 4])!r}")
        raise TruncatedPayload("matrix header is truncated")
    magic, version, dtype, reserved, rows, cols = _MATRIX_HEADER.unpack_from(buf, offset)
    if magic != MATRIX_MAGIC:
        raise BadMagic(f"bad matrix magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"matrix format version {version} is not supported")
    if dtype != DTYPE_F64:
        raise BadFormat(f"unsupported dtype code {dtype}")
    if reserved != 0:
        raise BadFormat("reserved header field must be zero")
    if rows < 1 or cols < 1:
        raise BadFormat(f"invalid matrix shape {rows}x{cols}")
    start = offset + MATRIX_HEADER_SIZE
    nbytes = rows * cols * 8
    if len(buf) - start < nbytes:
        raise TruncatedPayload(f"payload needs {nbytes} bytes, {len(buf) - start} present")
    a = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=start)
    a = a.astype(np.float64).reshape(rows, cols)
    if not np.isfinite(a).all():
        raise InvalidInput("matrix payload contains NaN or Inf")
    return a, start + nbytes


def write_matrix(path, m) -> None:
    data = encode_matrix(m)
    with open(path, "wb") as fh:
        fh.write(data)


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    a, end = decode_matrix(data)
    if end != len(data):
        raise BadFormat(f"{len(data) - end} trailing bytes after matrix payload")
    return a


# -- checkpoints --------------------------------------------------------------

def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    names = list(tensors)
    if len(set(names)) != len(names):  # pragma: no cover - Mapping keys are unique
        raise DuplicateName("tensor names must be unique")
    parts = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(names))]
    for name in names:
        raw = name.encode("utf-8")
        if not raw or len(raw) > 0xFFFF:
            raise InvalidInput(f"tensor name length must be 1..65535 bytes: {name!r}")
        parts.append(_NAME_LEN.pack(len(raw)))
        parts.append(raw)
        parts.append(encode_matrix(tensors[name]))
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    buf = memoryview(data)
    if len(buf) >= 4 and bytes(buf[:4]) != CHECKPOINT_MAGIC:
        raise BadMagic(f"bad checkpoint magic {bytes(buf[:4])!r}")
    if len(buf) < _CKPT_HEADER.size + _CRC.size:
        raise TruncatedPayload("checkpoint is truncated")
    magic, version, count = _CKPT_HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"checkpoint format version {version} is not supported")
    body_end = len(buf) - _CRC.size
    (stored,) = _CRC.unpack_from(buf, body_end)
    if zlib.crc32(buf[:body_end]) != stored:
        raise ChecksumError("checkpoint CRC32 mismatch")
    body = buf[:body_end]
    out: dict[str, np.ndarray] = {}
    pos = _CKPT_HEADER.size
    for _ in range(count):
        if len(body) - pos < _NAME_LEN.size:
            raise TruncatedPayload("tensor name length is truncated")
        (n,) = _NAME_LEN.unpack_from(body, pos)
        pos += _NAME_LEN.size
        if len(body) - pos < n:
            raise TruncatedPayload("tensor name is truncated")
        try:
            name = bytes(body[pos:pos + n]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BadFormat(f"tensor name is not valid UTF-8: {exc}") from None
        pos += n
        if name in out:
            raise DuplicateName(f"duplicate tensor name {name!r}")
        out[name], pos = decode_matrix(body, pos)
    if pos != len(body):
        raise BadFormat(f"{len(body) - pos} unexpected bytes before checksum")
    return out


def write_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    data = encode_checkpoint(tensors)
    with open(path, "wb") as fh:
        fh.write(data)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def sniff(path) -> str:
    """Guess a file's kind from its leading bytes: "matrix", "checkpoint" or "pgm"."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MATRIX_MAGIC:
        return "matrix"
    if head == CHECKPOINT_MAGIC:
        return "checkpoint"
    if head[:1] == b"P":
        return "pgm"
    raise BadMagic(f"unrecognized file signature {head!r} in {os.fspath(path)}")


# -- PGM ----------------------------------------------------------------------

@dataclass
class GrayImage:
    """Grayscale image with ``pixels`` shaped (height, width), values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise InvalidInput(f"image pixels must be a non-empty 2-D array, got {p.shape}")
        if not np.isfinite(p).all():
            raise InvalidInput("image contains NaN or Inf")
        self.pixels = p

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def decode_pgm(data: bytes) -> GrayImage:
    if data[:2] != b"P5":
        raise BadFormat(f"only binary PGM (P5) is supported, got {data[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        # header tokens may be separated by whitespace and '#' comment lines
        while True:
            while pos < len(data) and data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                nl = data.find(b"\n", pos)
                if nl < 0:
                    raise BadFormat("unterminated comment in PGM header")
                pos = nl + 1
                continue
            break
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise BadFormat("malformed PGM header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise BadFormat("PGM header must end with a single whitespace byte")
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise BadFormat(f"invalid PGM size {width}x{height}")
    if not 1 <= maxval <= 65535:
        raise UnsupportedMaxval(f"maxval {maxval} outside 1..65535")
    dtype = ">u1" if maxval < 256 else ">u2"
    nbytes = width * height * np.dtype(dtype).itemsize
    if len(data) - pos < nbytes:
        raise TruncatedPayload(f"PGM raster needs {nbytes} bytes, {len(data) - pos} present")
    raster = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    if raster.max(initial=0) > maxval:
        raise BadFormat("PGM sample exceeds maxval")
    pixels = raster.reshape(height, width).astype(np.float64) / maxval
    return GrayImage(pixels)


def encode_pgm(img: GrayImage) -> bytes:
    q = np.rint(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = b"P5\n%d %d\n255\n" % (img.width, img.height)
    return header + q.tobytes()


def read_pgm(path) -> GrayImage:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


def write_pgm(path, img: GrayImage) -> None:
    data = encode_pgm(img)
    with open(path, "wb") as fh:
        fh.write(data)
