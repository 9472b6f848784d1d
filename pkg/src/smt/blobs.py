"""Little-endian binary blob helpers.

Every blob starts with a 4-byte magic tag, a uint32 format version and the
32-byte SHA-256 digest of the config that produced it (all zeros when the
blob was written outside a pipeline run).
"""
import io
import struct

import numpy as np

from .errors import FormatError, HashMismatchError

HEADER = struct.Struct("<4sI32s")
NO_HASH = b"\x00" * 32


def hash_bytes(config_hash):
    if config_hash is None:
        return NO_HASH
    if isinstance(config_hash, bytes):
        raw = config_hash
    else:
        raw = bytes.fromhex(config_hash)
    if len(raw) != 32:
        raise ValueError("config hash must be a 32-byte SHA-256 digest")
    return raw


def write_header(fh, magic, version, config_hash=None):
    fh.write(HEADER.pack(magic, version, hash_bytes(config_hash)))


def read_header(fh, magic, version, expect_hash=None):
    raw = fh.read(HEADER.size)
    if len(raw) != HEADER.size:
        raise FormatError("blob shorter than its header")
    got_magic, got_version, digest = HEADER.unpack(raw)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise FormatError(f"unsupported version {got_version} for {magic!r}")
    if expect_hash is not None and digest != hash_bytes(expect_hash):
        raise HashMismatchError(
            f"{magic.decode()} blob was produced by config {digest.hex()[:12]}, "
            f"expected {hash_bytes(expect_hash).hex()[:12]}"
        )
    return None if digest == NO_HASH else digest.hex()


def write_struct(fh, fmt, *values):
    fh.write(struct.pack("<" + fmt, *values))


def read_struct(fh, fmt):
    s = struct.Struct("<" + fmt)
    raw = fh.read(s.size)
    if len(raw) != s.size:
        raise FormatError("blob truncated")
    return s.unpack(raw)


def write_array(fh, arr, dtype="<f8", order="C"):
    fh.write(np.asarray(arr).astype(dtype).tobytes(order=order))


def read_array(fh, shape, dtype="<f8", order="C"):
    dt = np.dtype(dtype)
    count = int(np.prod(shape))
    raw = fh.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise FormatError("blob truncated")
    return np.frombuffer(raw, dtype=dt).reshape(shape, order=order).astype(dt.newbyteorder("="))


def save(obj, path, config_hash=None):
    """Write ``obj`` (anything with ``to_bytes``) to ``path``."""
    with open(path, "wb") as fh:
        fh.write(obj.to_bytes(config_hash))


def open_bytes(data):
    return io.BytesIO(data)
