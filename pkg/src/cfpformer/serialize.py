"""Binary formats: CFPT tensors, CFPC checkpoints, and binary PGM images.

CFPT v1 record::

    b"CFPT" | u8 version=1 | u8 dtype (0=f32, 1=f64, 2=u8) | u8 ndim | u8 pad
    | ndim x u32 extents | row-major payload            (all little-endian)

CFPC v1 container::

    b"CFPC" | u8 version=1 | u32 count | count x (u16 name_len | utf-8 name | CFPT record)
"""

from __future__ import annotations

import io
import os
import struct
from collections import OrderedDict
from typing import BinaryIO, Mapping

import numpy as np

from .errors import FormatError

CFPT_MAGIC = b"CFPT"
CFPC_MAGIC = b"CFPC"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.kind == "f" else arr.dtype
    if dt not in _CODES:
        raise FormatError(f"CFPT cannot store dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("CFPT supports at most 255 dimensions")
    f.write(CFPT_MAGIC + struct.pack("<BBBB", VERSION, _CODES[dt], arr.ndim, 0))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4, "CFPT magic")
    if magic != CFPT_MAGIC:
        raise FormatError(f"bad CFPT magic {magic!r}")
    version, code, ndim, _ = struct.unpack("<BBBB", _read_exact(f, 4, "CFPT header"))
    if version != VERSION:
        raise FormatError(f"unsupported CFPT version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown CFPT dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "CFPT extents"))
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(f, count * dt.itemsize, "CFPT payload")
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy()


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_tensor(f)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after CFPT record")
    return arr


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CFPC_MAGIC + struct.pack("<BI", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        buf.write(struct.pack("<H", len(raw)) + raw)
        write_tensor(buf, arr)
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> "OrderedDict[str, np.ndarray]":
    f = io.BytesIO(data)
    magic = _read_exact(f, 4, "CFPC magic")
    if magic != CFPC_MAGIC:
        raise FormatError(f"not a CFPC checkpoint (magic {magic!r})")
    version, count = struct.unpack("<BI", _read_exact(f, 5, "CFPC header"))
    if version != VERSION:
        raise FormatError(f"unsupported CFPC version {version}")
    out = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(f, 2, "CFPC name length"))
        name = _read_exact(f, n, "CFPC name").decode("utf-8")
        out[name] = read_tensor(f)
    if f.read(1):
        raise FormatError("trailing bytes after CFPC container")
    return out


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    data = encode_checkpoint(tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def write_pgm(path, image: np.ndarray) -> None:
    """Write an (H, W) uint8 array as binary PGM (P5, maxval 255)."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise FormatError(f"PGM needs a 2-d uint8 array, got {image.dtype} {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()
