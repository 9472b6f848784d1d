"""Sparse lifting functions: 1-sparse vector quantisation and thresholded cosine codes.

Batches of codes are scipy CSR matrices with one row per input vector and
binary (1.0) entries; :class:`SparseCode` is the single-vector view.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import blobs
from .dictionary import Dictionary, nearest_centroid
from .errors import FormatError
from .preprocess import preprocess_patches

CHUNK = 16384
CODES_MAGIC = b"SMTC"
CODES_VERSION = 1

# default thresholds for encode_gq
COLOR_THRESHOLD = 0.3
GRAY_THRESHOLD = 0.45


@dataclass(frozen=True)
class SparseCode:
    dim: int
    indices: tuple
    values: tuple = field(default=None)

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("indices must be strictly increasing")
        if idx and (idx[0] < 0 or idx[-1] >= self.dim):
            raise ValueError("index out of range")
        vals = (1.0,) * len(idx) if self.values is None else tuple(float(v) for v in self.values)
        if len(vals) != len(idx) or any(v <= 0 for v in vals):
            raise ValueError("values must be positive and match indices")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    def dense(self):
        out = np.zeros(self.dim)
        out[list(self.indices)] = self.values
        return out

    def to_csr(self):
        return sp.csr_matrix(
            (np.array(self.values), np.array(self.indices, dtype=np.int64), [0, len(self.indices)]),
            shape=(1, self.dim),
        )

    @classmethod
    def from_row(cls, row):
        row = sp.csr_matrix(row)
        row.sort_indices()
        return cls(row.shape[1], tuple(row.indices), tuple(row.data))


def _as_matrix(D):
    return D.elements if isinstance(D, Dictionary) else np.asarray(D)


def _check(x, E):
    if x.shape[-1] != E.shape[0]:
        raise ValueError(f"vector length {x.shape[-1]} does not match dictionary dim {E.shape[0]}")


def encode_vq_batch(X, D, metric="cosine"):
    """1-hot codes for the rows of X (n, d) as an (n, K) CSR matrix.

    ``cosine`` picks the column with the largest dot product (inputs and
    columns are unit norm, so this is also the nearest on the sphere; zero
    inputs land on index 0). ``euclidean`` picks the nearest column in the
    raw space.
    """
    E = _as_matrix(D)
    X = np.asarray(X)
    _check(X, E)
    X2 = X.reshape(-1, E.shape[0])
    Et = E.T.astype(X2.dtype, copy=False)
    idx = nearest_centroid(X2, Et, spherical=(metric == "cosine"))
    n = len(X2)
    return sp.csr_matrix(
        (np.ones(n), idx, np.arange(n + 1)), shape=(n, E.shape[1])
    )


def encode_vq(x, D, metric="cosine") -> SparseCode:
    return SparseCode.from_row(encode_vq_batch(np.asarray(x)[None], D, metric))


def encode_gq_batch(X, D, t):
    """Binary codes with a 1 wherever cos(x, column) >= t.

    Rows with no column above threshold fall back to their single best column.
    """
    if not 0 < t < 1:
        raise ValueError("threshold must lie in (0, 1)")
    E = _as_matrix(D)
    X = np.asarray(X)
    _check(X, E)
    X2 = X.reshape(-1, E.shape[0])
    Et = E.astype(X2.dtype, copy=False)
    n, K = len(X2), E.shape[1]
    blocks = []
    for start in range(0, n, CHUNK):
        cos = X2[start:start + CHUNK] @ Et
        active = cos >= t
        dead = ~active.any(axis=1)
        if dead.any():
            active[np.flatnonzero(dead), np.argmax(cos[dead], axis=1)] = True
        blocks.append(sp.csr_matrix(active, dtype=np.float64))
    if not blocks:
        return sp.csr_matrix((0, K))
    return sp.vstack(blocks, format="csr")


def encode_gq(x, D, t) -> SparseCode:
    return SparseCode.from_row(encode_gq_batch(np.asarray(x)[None], D, t))


@dataclass
class Encoder:
    """Sparse feature configuration: ``kind`` is "vq" or "gq"."""

    kind: str = "vq"
    threshold: float = GRAY_THRESHOLD

    def __call__(self, X, D):
        if self.kind == "vq":
            return encode_vq_batch(X, D)
        if self.kind == "gq":
            return encode_gq_batch(X, D, self.threshold)
        raise ValueError(f"unknown encoder kind {self.kind!r}")


def batch_encode(patches, whitening, dictionary, encoder: Encoder, radius):
    """Whiten, normalise and encode a (rows, cols, dim) grid or (N, rows, cols, dim) batch.

    Returns a CSR matrix whose rows follow the grid's C-order flattening.
    """
    x = preprocess_patches(np.asarray(patches), whitening, radius)
    return encoder(x.reshape(-1, x.shape[-1]), dictionary)


# Binary run format for code streams: header, uint32 dim, then per code a
# uint32 count followed by that many uint32 indices. Values are implicit 1s.

def write_codes(fh, codes, config_hash=None, header=True):
    codes = sp.csr_matrix(codes)
    codes.sort_indices()
    if header:
        blobs.write_header(fh, CODES_MAGIC, CODES_VERSION, config_hash)
        fh.write(struct.pack("<I", codes.shape[1]))
    counts = np.diff(codes.indptr).astype("<u4")
    pieces = []
    for r in range(codes.shape[0]):
        pieces.append(counts[r:r + 1].tobytes())
        pieces.append(codes.indices[codes.indptr[r]:codes.indptr[r + 1]].astype("<u4").tobytes())
    fh.write(b"".join(pieces))


def read_codes(fh, expect_hash=None):
    """Read a whole code stream back into a CSR matrix."""
    blobs.read_header(fh, CODES_MAGIC, CODES_VERSION, expect_hash)
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError("code stream truncated")
    (dim,) = struct.unpack("<I", raw)
    rest = fh.read()
    if len(rest) % 4:
        raise FormatError("code stream truncated")
    payload = np.frombuffer(rest, dtype="<u4")
    indptr, indices = [0], []
    pos = 0
    while pos < len(payload):
        count = int(payload[pos])
        row = payload[pos + 1:pos + 1 + count]
        if len(row) != count:
            raise FormatError("code stream truncated")
        if count and row.max() >= dim:
            raise FormatError("code index out of range")
        indices.append(row)
        indptr.append(indptr[-1] + count)
        pos += 1 + count
    idx = np.concatenate(indices).astype(np.int64) if indices else np.zeros(0, np.int64)
    return sp.csr_matrix((np.ones(len(idx)), idx, indptr), shape=(len(indptr) - 1, dim))
