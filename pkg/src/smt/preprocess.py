"""Contextual-mean removal, symmetric whitening and L2 normalisation of patches."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import blobs
from .dataset_io import PatchGrid
from .errors import SingularityError

EPS = 1e-12
WHITEN_MAGIC = b"SMTW"
WHITEN_VERSION = 1


@dataclass
class WhiteningOperator:
    forward: np.ndarray  # (lambda I + Sigma)^(-1/2)
    inverse: np.ndarray  # (lambda I + Sigma)^(1/2)
    lam: float

    @property
    def dim(self):
        return self.forward.shape[0]

    @classmethod
    def from_covariance(cls, cov, lam):
        cov = 0.5 * (cov + cov.T)
        w, E = np.linalg.eigh(cov + lam * np.eye(len(cov)))
        if w.min() <= 0:
            raise SingularityError(
                f"lambda*I + Sigma is not positive definite (min eigenvalue {w.min():.3g})"
            )
        forward = (E / np.sqrt(w)) @ E.T
        inverse = (E * np.sqrt(w)) @ E.T
        return cls(0.5 * (forward + forward.T), 0.5 * (inverse + inverse.T), float(lam))

    def to_bytes(self, config_hash=None):
        buf = blobs.open_bytes(b"")
        blobs.write_header(buf, WHITEN_MAGIC, WHITEN_VERSION, config_hash)
        blobs.write_struct(buf, "Id", self.dim, self.lam)
        blobs.write_array(buf, self.forward)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data, expect_hash=None):
        fh = blobs.open_bytes(data)
        blobs.read_header(fh, WHITEN_MAGIC, WHITEN_VERSION, expect_hash)
        dim, lam = blobs.read_struct(fh, "Id")
        forward = blobs.read_array(fh, (dim, dim))
        w, E = np.linalg.eigh(forward)
        inverse = (E / w) @ E.T
        return cls(forward, 0.5 * (inverse + inverse.T), lam)


def _box_sum(a, r, axis):
    """Sum of ``a`` over a window of half-width ``r`` along ``axis``, clipped at the borders."""
    n = a.shape[axis]
    c = np.cumsum(a, axis=axis, dtype=np.float64)
    zero = np.zeros_like(np.take(c, [0], axis=axis))
    c = np.concatenate([zero, c], axis=axis)
    idx = np.arange(n)
    hi = np.minimum(idx + r + 1, n)
    lo = np.maximum(idx - r, 0)
    return np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)


def contextual_mean(grid, radius):
    """Mean of all patches within ``radius`` grid steps (both axes), the patch included.

    Accepts a :class:`PatchGrid`, a (rows, cols, dim) array, or a batch
    (N, rows, cols, dim).
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    patches = grid.patches if isinstance(grid, PatchGrid) else np.asarray(grid)
    if patches.size == 0:
        raise ValueError("empty patch grid")
    if radius == 0:
        return patches.copy()
    ra, ca = patches.ndim - 3, patches.ndim - 2
    rows, cols = patches.shape[ra], patches.shape[ca]
    s = _box_sum(_box_sum(patches, radius, ra), radius, ca)
    i = np.arange(rows)
    j = np.arange(cols)
    nr = np.minimum(i + radius, rows - 1) - np.maximum(i - radius, 0) + 1
    nc = np.minimum(j + radius, cols - 1) - np.maximum(j - radius, 0) + 1
    counts = (nr[:, None] * nc[None, :])[..., None]
    return (s / counts).astype(patches.dtype, copy=False)


def remove_contextual_mean(patches, radius):
    return patches - contextual_mean(patches, radius)


def _iter_chunks(patches):
    if isinstance(patches, np.ndarray):
        yield patches.reshape(-1, patches.shape[-1])
    else:
        for chunk in patches:
            chunk = np.asarray(chunk)
            yield chunk.reshape(-1, chunk.shape[-1])


def fit_whitening(patches: np.ndarray | Iterable[np.ndarray], lambda_rel=1e-2):
    """Fit ``(lambda I + Sigma)^(-1/2)`` with ``lambda = lambda_rel * trace(Sigma) / dim``.

    ``patches`` is an (n, dim) array or an iterable of such chunks; the
    covariance is accumulated in float64 chunk by chunk.
    """
    if lambda_rel < 0:
        raise ValueError("lambda_rel must be non-negative")
    n = 0
    total = None
    outer = None
    for chunk in _iter_chunks(patches):
        chunk = chunk.astype(np.float64, copy=False)
        if total is None:
            total = np.zeros(chunk.shape[1])
            outer = np.zeros((chunk.shape[1], chunk.shape[1]))
        n += len(chunk)
        total += chunk.sum(axis=0)
        outer += chunk.T @ chunk
    if n == 0:
        raise ValueError("no patches to fit whitening on")
    dim = len(total)
    if n < dim + 1 and lambda_rel == 0:
        raise SingularityError(f"{n} samples cannot give a nonsingular {dim}-dim covariance")
    if n < 2:
        raise ValueError("need at least two samples")
    mean = total / n
    cov = (outer - n * np.outer(mean, mean)) / (n - 1)
    lam = lambda_rel * np.trace(cov) / dim
    return WhiteningOperator.from_covariance(cov, lam)


def _check_dim(vec, op):
    if vec.shape[-1] != op.dim:
        raise ValueError(f"vector length {vec.shape[-1]} does not match operator dim {op.dim}")


def whiten(patch, op: WhiteningOperator, mean=None):
    """``forward @ (patch - mean)`` applied along the last axis."""
    patch = np.asarray(patch)
    _check_dim(patch, op)
    x = patch if mean is None else patch - mean
    forward = op.forward.astype(x.dtype) if x.dtype == np.float32 else op.forward
    return x @ forward  # forward is symmetric


def unwhiten(vector, op: WhiteningOperator):
    vector = np.asarray(vector)
    _check_dim(vector, op)
    return vector @ op.inverse


def l2_normalize(v, eps=EPS):
    """Unit-normalise along the last axis; vectors with norm <= eps map to zero."""
    v = np.asarray(v)
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(norm > eps, norm, 1.0)
    return np.where(norm > eps, v / safe, 0.0).astype(v.dtype, copy=False)


def preprocess_patches(patches, op, radius):
    """Contextual-mean removal, whitening and normalisation of (..., rows, cols, dim) patches."""
    return l2_normalize(whiten(remove_contextual_mean(patches, radius), op))
