"""Self-describing binary container for models, checkpoints and descriptor dumps.

Layout (all integers little-endian uint32)::

    b"PTCHFRG1"                    magic
    version
    len, utf-8 architecture string
    len, utf-8 mode string
    len, utf-8 JSON metadata
    tensor count
    per tensor: len, utf-8 name, rank, extents..., float32 little-endian data
    crc32 of every preceding byte
"""
import json
import struct
import zlib

import numpy as np

from .errors import ChecksumError, FormatVersionError, ModelFormatError

MAGIC = b"PTCHFRG1"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


def _pack_str(text):
    raw = text.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def encode(arch, mode, metadata, tensors):
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _pack_str(arch), _pack_str(mode),
             _pack_str(json.dumps(metadata, sort_keys=True)), _U32.pack(len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(_pack_str(name))
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(n) for n in arr.shape)
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ModelFormatError("file is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return _U32.unpack(self.take(4))[0]

    def text(self):
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ModelFormatError(f"corrupt string field: {exc}") from None


def decode(data):
    """Inverse of :func:`encode`; returns (arch, mode, metadata, tensors)."""
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise ModelFormatError("not a patchdesc container (bad magic bytes)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"container format version {version} is not supported (expected {FORMAT_VERSION})")
    if len(data) < len(MAGIC) + 8:
        raise ModelFormatError("file is truncated")
    stored = _U32.unpack(data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored:
        raise ChecksumError("checksum mismatch: file is corrupt or truncated")
    r.data = data[:-4]
    arch = r.text()
    mode = r.text()
    try:
        metadata = json.loads(r.text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"corrupt metadata: {exc}") from None
    tensors = {}
    for _ in range(r.u32()):
        name = r.text()
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(r.data):
        raise ModelFormatError("trailing bytes after last tensor")
    return arch, mode, metadata, tensors


def write_container(path, arch, mode, metadata, tensors):
    with open(path, "wb") as fh:
        fh.write(encode(arch, mode, metadata, tensors))


def read_container(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
