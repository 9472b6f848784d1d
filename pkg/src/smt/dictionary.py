"""Dictionaries (landmarks) for the sparse lifting: online K-means and random sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import blobs
from .preprocess import l2_normalize

log = logging.getLogger(__name__)

DICT_MAGIC = b"SMTD"
DICT_VERSION = 1
CHUNK = 65536


@dataclass
class Dictionary:
    elements: np.ndarray  # (d, K), one landmark per column
    spherical: bool = True

    @property
    def K(self):
        return self.elements.shape[1]

    @property
    def dim(self):
        return self.elements.shape[0]

    def to_bytes(self, config_hash=None):
        buf = blobs.open_bytes(b"")
        blobs.write_header(buf, DICT_MAGIC, DICT_VERSION, config_hash)
        blobs.write_struct(buf, "IIB", self.dim, self.K, int(self.spherical))
        blobs.write_array(buf, self.elements, order="F")
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data, expect_hash=None):
        fh = blobs.open_bytes(data)
        blobs.read_header(fh, DICT_MAGIC, DICT_VERSION, expect_hash)
        d, K, spherical = blobs.read_struct(fh, "IIB")
        elements = blobs.read_array(fh, (d, K), order="F")
        return cls(np.ascontiguousarray(elements), bool(spherical))


def nearest_centroid(X, centroids, spherical):
    """Index of the closest centroid for each row of X (rows of ``centroids``).

    Spherical mode maximises the dot product; otherwise squared Euclidean
    distance is minimised. Ties go to the lowest index.
    """
    out = np.empty(len(X), dtype=np.int64)
    c_sq = None if spherical else np.einsum("ij,ij->i", centroids, centroids)
    for start in range(0, len(X), CHUNK):
        block = X[start:start + CHUNK]
        scores = block @ centroids.T
        if spherical:
            out[start:start + CHUNK] = np.argmax(scores, axis=1)
        else:
            out[start:start + CHUNK] = np.argmin(c_sq[None, :] - 2.0 * scores, axis=1)
    return out


def quantization_loss(X, centroids):
    X = np.asarray(X, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    idx = nearest_centroid(X, centroids, spherical=False)
    return float(np.sum((X - centroids[idx]) ** 2))


def _validate(data, K):
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError("data must be an (N, d) array")
    if not np.all(np.isfinite(data)):
        raise ValueError("data contains non-finite values")
    if K < 1 or K > len(data):
        raise ValueError(f"dictionary size {K} exceeds the {len(data)} data points")
    return data


def kmeans_fit(data, K, spherical=True, epochs=30, eta=0.5, seed=0, tol=1e-5, callback=None):
    """Online 1-sparse dictionary learning (K-means) over the rows of ``data``.

    Each epoch assigns every point to its nearest centroid, then moves
    centroid j by ``eta / h_j`` times the summed residual of its h_j members;
    spherical mode normalises data and centroids onto the unit sphere.
    Iteration stops when the mean centroid displacement drops below ``tol``.
    Centroids start at K distinct data points; empty clusters are re-seeded
    from random data points.

    ``callback(epoch, centroids, assignment)`` is invoked after each epoch's
    assignment step, before the update.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    X = _validate(data, K)
    dtype = np.float32 if X.dtype == np.float32 else np.float64
    X = X.astype(dtype, copy=False)
    if spherical:
        X = l2_normalize(X)
    rng = np.random.default_rng(seed)
    _, first = np.unique(X, axis=0, return_index=True)
    if len(first) < K:
        raise ValueError(f"only {len(first)} distinct points for {K} centroids")
    # ``first`` follows the lexicographic order of the distinct rows, so the
    # initial centroids do not depend on the order of the input
    init = rng.choice(first, size=K, replace=False)
    C = X[init].copy()
    N = len(X)
    for epoch in range(epochs):
        assign = nearest_centroid(X, C, spherical)
        if callback is not None:
            callback(epoch, C.copy(), assign)
        onehot = sp.csr_matrix(
            (np.ones(N, dtype=dtype), (assign, np.arange(N))), shape=(K, N)
        )
        h = np.asarray(onehot.sum(axis=1)).ravel()
        sums = onehot @ X
        empty = h == 0
        live = ~empty
        new = C.copy()
        new[live] += (eta / h[live])[:, None] * (sums[live] - h[live][:, None] * C[live])
        if empty.any():
            new[empty] = X[rng.integers(0, N, size=int(empty.sum()))]
        if spherical:
            new = l2_normalize(new)
        shift = float(np.mean(np.linalg.norm(new - C, axis=1)))
        C = new
        log.debug("kmeans epoch %d: mean shift %.3g, %d empty", epoch, shift, int(empty.sum()))
        if shift < tol and not empty.any():
            break
    return Dictionary(np.ascontiguousarray(C.T), spherical=spherical)


def sample_dictionary(data, K, seed=0, normalize=True):
    """K rows drawn uniformly without replacement, as unit-norm columns.

    Zero rows are never drawn (they have no direction).
    """
    X = _validate(data, K)
    rng = np.random.default_rng(seed)
    if normalize:
        pool = np.flatnonzero(np.linalg.norm(X, axis=1) > 1e-12)
        if len(pool) < K:
            raise ValueError(f"only {len(pool)} non-zero points for {K} dictionary elements")
    else:
        pool = np.arange(len(X))
    idx = rng.choice(pool, size=K, replace=False)
    D = X[idx]
    if normalize:
        D = l2_normalize(D)
    return Dictionary(np.ascontiguousarray(D.T), spherical=normalize)
