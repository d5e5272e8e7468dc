"""Sectioned binary container used by the dataset store and checkpoints.

Layout (little-endian):

    magic[4] | u32 version | u32 n_sections | section* | u32 file_crc

    section := u16 name_len | name (utf-8) | u8 kind | u8 ndim |
               u32 dim* | u64 payload_len | payload | u32 payload_crc

Payloads are zlib-compressed array bytes (C order) or raw bytes for
``kind == KIND_RAW``.  The trailing file CRC covers everything between the
version field and itself.  Corruption surfaces as one of three distinct
errors: :class:`VersionMismatchError`, :class:`TruncatedFileError`,
:class:`ChecksumError`.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

KIND_F64 = 0
KIND_F32 = 1
KIND_I32 = 2
KIND_I64 = 3
KIND_RAW = 4

_DTYPES = {
    KIND_F64: np.dtype("<f8"),
    KIND_F32: np.dtype("<f4"),
    KIND_I32: np.dtype("<i4"),
    KIND_I64: np.dtype("<i8"),
}
_KIND_OF = {v: k for k, v in _DTYPES.items()}


class FormatError(RuntimeError):
    """Base class for container-format problems."""


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def _kind_for(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<")
    if dt not in _KIND_OF:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return _KIND_OF[dt]


def write_container(path, magic: bytes, version: int, sections: dict[str, "np.ndarray | bytes"]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    body = bytearray()
    body += struct.pack("<II", version, len(sections))
    for name, value in sections.items():
        nb = name.encode("utf-8")
        if isinstance(value, (bytes, bytearray)):
            kind, dims, raw = KIND_RAW, (), bytes(value)
        else:
            arr = np.ascontiguousarray(value)
            kind = _kind_for(arr)
            dims = arr.shape
            raw = arr.astype(_DTYPES[kind], copy=False).tobytes()
        payload = zlib.compress(raw, 6)
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<BB", kind, len(dims))
        for d in dims:
            body += struct.pack("<I", d)
        body += struct.pack("<Q", len(payload)) + payload
        body += struct.pack("<I", zlib.crc32(payload))
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(bytes(body))


def read_container(path, magic: bytes, version: int) -> dict[str, "np.ndarray | bytes"]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise TruncatedFileError(f"{path}: file too short")
    if blob[:4] != magic:
        raise VersionMismatchError(f"{path}: bad magic {blob[:4]!r}")
    body = blob[4:]
    if zlib.crc32(body[:-4]) != struct.unpack("<I", body[-4:])[0]:
        raise ChecksumError(f"{path}: file checksum mismatch")
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(body) - 4:
            raise TruncatedFileError(f"{path}: unexpected end of file")
        chunk = body[off:off + n]
        off += n
        return chunk

    file_version, n_sections = struct.unpack("<II", take(8))
    if file_version != version:
        raise VersionMismatchError(f"{path}: version {file_version}, expected {version}")
    out: dict[str, np.ndarray | bytes] = {}
    for _ in range(n_sections):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        kind, ndim = struct.unpack("<BB", take(2))
        dims = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        (payload_len,) = struct.unpack("<Q", take(8))
        payload = take(payload_len)
        (crc,) = struct.unpack("<I", take(4))
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"{path}: checksum mismatch in section '{name}'")
        raw = zlib.decompress(payload)
        if kind == KIND_RAW:
            out[name] = raw
        else:
            out[name] = np.frombuffer(raw, dtype=_DTYPES[kind]).reshape(dims).copy()
    return out
