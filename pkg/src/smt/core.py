"""Co-occurrence statistics and the closed-form spectral embedding.

Given sparse codes alpha, the embedding P minimises ``tr(P C P^T)`` subject to
``P V P^T = I``, where V is the second moment of the codes and C the energy of
code differences between neighbouring samples. With ``V^(-1/2)`` restricted
to the well-conditioned eigenspace of V, the rows of P are
``U^T V^(-1/2)`` for the trailing eigenvectors U of
``Q = V^(-1/2) C V^(-1/2)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import blobs
from .errors import ModeError, NumericError, RankError
from .sparse_features import SparseCode

log = logging.getLogger(__name__)

MODES = ("pairwise", "aggregated", "second_order")
STATS_MAGIC = b"SMTS"
EMBED_MAGIC = b"SMTE"
VERSION = 1
DENSE_EIGH_MAX = 8192


def _as_rows(code, K):
    """Coerce a SparseCode, dense vector(s) or sparse matrix into a (n, K) CSR matrix."""
    if isinstance(code, SparseCode):
        m = code.to_csr()
    elif sp.issparse(code):
        m = sp.csr_matrix(code)
    else:
        arr = np.asarray(code, dtype=np.float64)
        m = sp.csr_matrix(arr.reshape(1, -1) if arr.ndim == 1 else arr)
    if m.shape[1] != K:
        raise ValueError(f"code dimension {m.shape[1]} does not match K={K}")
    return m


@dataclass
class CooccurrenceStats:
    """Running sums for V (second moment) and C (difference energy).

    Both are stored unnormalised; :meth:`normalized` divides V by
    ``n_samples`` and C by ``n_pairs``. With ``pair_second_moment`` set,
    every pair (or neighbourhood centre) also feeds V, each pair endpoint
    with weight 1/2; otherwise V is accumulated separately through
    :func:`accumulate_second_moment`.
    """

    K: int
    mode: str = "pairwise"
    pair_second_moment: bool = True
    dense: bool = True
    V: object = None
    C: object = None
    n_samples: int = 0
    n_pairs: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.V is None:
            self.V = np.zeros((self.K, self.K)) if self.dense else sp.csr_matrix((self.K, self.K))
        if self.C is None:
            self.C = np.zeros((self.K, self.K)) if self.dense else sp.csr_matrix((self.K, self.K))

    def _add(self, name, S):
        M = getattr(self, name)
        if not self.dense:
            setattr(self, name, (M + S).tocsr())
            return
        if sp.issparse(S):
            S = S.tocoo()
            S.sum_duplicates()
            M.reshape(-1)[S.row.astype(np.int64) * self.K + S.col] += S.data
        else:
            M += S

    def normalized(self):
        V = self.V / self.n_samples if self.n_samples else self.V * 0.0
        C = self.C / self.n_pairs if self.n_pairs else self.C * 0.0
        return V, C

    def to_bytes(self, config_hash=None):
        buf = blobs.open_bytes(b"")
        blobs.write_header(buf, STATS_MAGIC, VERSION, config_hash)
        blobs.write_struct(
            buf, "IBBQQ", self.K, MODES.index(self.mode), int(self.pair_second_moment),
            self.n_samples, self.n_pairs,
        )
        for M in (self.V, self.C):
            blobs.write_array(buf, M.toarray() if sp.issparse(M) else M)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data, expect_hash=None):
        fh = blobs.open_bytes(data)
        blobs.read_header(fh, STATS_MAGIC, VERSION, expect_hash)
        K, mode, psm, n_samples, n_pairs = blobs.read_struct(fh, "IBBQQ")
        V = blobs.read_array(fh, (K, K))
        C = blobs.read_array(fh, (K, K))
        return cls(K, MODES[mode], bool(psm), True, V, C, n_samples, n_pairs)


def accumulate_second_moment(stats: CooccurrenceStats, code):
    """V += alpha alpha^T for one code (or every row of a code matrix)."""
    A = _as_rows(code, stats.K)
    stats._add("V", A.T @ A)
    stats.n_samples += A.shape[0]


accumulate_second_moments = accumulate_second_moment


def accumulate_pair(stats: CooccurrenceStats, a, b):
    """C += (a - b)(a - b)^T. Row-aligned code matrices add one pair per row."""
    if stats.mode != "pairwise":
        raise ModeError(f"accumulate_pair needs pairwise mode, stats are {stats.mode}")
    A = _as_rows(a, stats.K)
    B = _as_rows(b, stats.K)
    if A.shape[0] != B.shape[0]:
        raise ValueError("pair batches differ in length")
    delta = A - B
    stats._add("C", delta.T @ delta)
    stats.n_pairs += A.shape[0]
    if stats.pair_second_moment:
        stats._add("V", 0.5 * (A.T @ A + B.T @ B))
        stats.n_samples += A.shape[0]


accumulate_pairs = accumulate_pair


def accumulate_neighborhood(stats: CooccurrenceStats, center, neighbors, weights=None):
    """Add one column of the differential operator applied to the codes.

    aggregated: delta = |n| alpha_c - sum_j alpha_j
    second_order: delta = alpha_c - sum_j w_j alpha_j, with sum_j w_j = 1
    """
    if stats.mode == "pairwise":
        raise ModeError("accumulate_neighborhood needs aggregated or second_order mode")
    c = _as_rows(center, stats.K)
    nb = sp.vstack([_as_rows(n, stats.K) for n in neighbors], format="csr") if len(neighbors) else sp.csr_matrix((0, stats.K))
    n = nb.shape[0]
    if stats.mode == "second_order":
        if weights is None:
            raise ValueError("second_order mode needs neighbour weights")
        w = np.asarray(weights, dtype=np.float64)
        if len(w) != n:
            raise ValueError("one weight per neighbour required")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"neighbour weights sum to {w.sum()}, not 1")
        delta = c - sp.csr_matrix(w[None, :]) @ nb
    else:
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        delta = n * c - sp.csr_matrix(w[None, :]) @ nb
    delta = sp.csr_matrix(delta)
    delta.eliminate_zeros()
    stats._add("C", delta.T @ delta)
    stats.n_pairs += 1
    if stats.pair_second_moment:
        stats._add("V", c.T @ c)
        stats.n_samples += 1


def accumulate_differences(stats: CooccurrenceStats, deltas, centers=None):
    """Batched form of :func:`accumulate_neighborhood`.

    Row i of ``deltas`` is one already-formed difference vector (for example
    ``|n| alpha_c - sum_j alpha_j``); ``centers`` holds the matching centre
    codes that feed V.
    """
    if stats.mode == "pairwise":
        raise ModeError("accumulate_differences needs aggregated or second_order mode")
    Dl = _as_rows(deltas, stats.K)
    stats._add("C", Dl.T @ Dl)
    stats.n_pairs += Dl.shape[0]
    if stats.pair_second_moment and centers is not None:
        c = _as_rows(centers, stats.K)
        stats._add("V", c.T @ c)
        stats.n_samples += c.shape[0]


def merge_stats(a: CooccurrenceStats, b: CooccurrenceStats) -> CooccurrenceStats:
    if a.K != b.K or a.mode != b.mode or a.pair_second_moment != b.pair_second_moment:
        raise ValueError("cannot merge statistics with different K, mode or V accounting")
    dense = a.dense and b.dense

    def add(x, y):
        if dense:
            return x + y
        x = sp.csr_matrix(x) if not sp.issparse(x) else x
        y = sp.csr_matrix(y) if not sp.issparse(y) else y
        return (x + y).tocsr()

    return CooccurrenceStats(
        a.K, a.mode, a.pair_second_moment, dense,
        add(a.V, b.V), add(a.C, b.C), a.n_samples + b.n_samples, a.n_pairs + b.n_pairs,
    )


@dataclass
class SpectralEmbedding:
    P: np.ndarray  # (d_emb, K), rows ascending in eigenvalue
    eigenvalues: np.ndarray  # the drop_first + d_emb smallest eigenvalues of Q
    drop_first: int = 0
    v_floor: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def d_emb(self):
        return self.P.shape[0]

    @property
    def K(self):
        return self.P.shape[1]

    @property
    def retained_eigenvalues(self):
        return self.eigenvalues[self.drop_first:]

    def to_bytes(self, config_hash=None):
        buf = blobs.open_bytes(b"")
        blobs.write_header(buf, EMBED_MAGIC, VERSION, config_hash)
        blobs.write_struct(buf, "IIId", self.d_emb, self.K, self.drop_first, self.v_floor)
        blobs.write_array(buf, self.eigenvalues)
        blobs.write_array(buf, self.P)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data, expect_hash=None):
        fh = blobs.open_bytes(data)
        blobs.read_header(fh, EMBED_MAGIC, VERSION, expect_hash)
        d_emb, K, drop_first, v_floor = blobs.read_struct(fh, "IIId")
        eig = blobs.read_array(fh, (d_emb + drop_first,))
        P = blobs.read_array(fh, (d_emb, K))
        return cls(P, eig, drop_first, v_floor)


def _is_diagonal(M):
    if sp.issparse(M):
        coo = M.tocoo()
        return bool(np.all((coo.row == coo.col) | (coo.data == 0)))
    return not np.any(M - np.diag(np.diag(M)))


def _fix_signs(P):
    """Flip rows so each row's largest-magnitude entry is positive."""
    if P.size == 0:
        return P
    pivots = np.argmax(np.abs(P), axis=1)
    signs = np.sign(P[np.arange(len(P)), pivots])
    signs[signs == 0] = 1.0
    return P * signs[:, None]


def _smallest_eigs_lanczos(Q, m, seed=0):
    """m smallest eigenpairs of symmetric Q via Lanczos on (sigma I - Q)."""
    n = Q.shape[0]
    if sp.issparse(Q):
        sigma = float(abs(Q).sum(axis=1).max())
    else:
        sigma = float(np.abs(Q).sum(axis=1).max())
    sigma = max(sigma, 1.0)
    op = spla.LinearOperator((n, n), matvec=lambda x: sigma * x - Q @ x, dtype=np.float64)
    v0 = np.random.default_rng(seed).standard_normal(n)
    theta, U = spla.eigsh(op, k=m, which="LA", v0=v0, tol=1e-12, maxiter=max(2000, 20 * n))
    mu = sigma - theta
    order = np.argsort(mu, kind="stable")
    return mu[order], U[:, order]


def solve_embedding(stats: CooccurrenceStats, d_emb, drop_first=0, v_floor_rel=1e-7, method="auto"):
    """Trailing eigenvectors of Q mapped back through V^(-1/2).

    Eigen-directions of V below ``v_floor_rel * max_eig(V)`` are excluded
    from the solution space. ``method`` is "dense", "lanczos" or "auto"
    (dense up to 8192 retained dimensions).
    """
    if d_emb < 1 or drop_first < 0:
        raise ValueError("d_emb must be >= 1 and drop_first >= 0")
    V, C = stats.normalized()
    for M in (V, C):
        data = M.data if sp.issparse(M) else M
        if not np.all(np.isfinite(data)):
            raise NumericError("statistics contain non-finite entries")
    m = drop_first + d_emb

    if _is_diagonal(V):
        w_all = np.asarray(V.diagonal(), dtype=np.float64)
        vmax = w_all.max() if w_all.size else 0.0
        if vmax <= 0:
            raise RankError("V is zero")
        floor = v_floor_rel * vmax
        keep = np.flatnonzero(w_all > floor)
        r = len(keep)
        if m > r:
            raise RankError(f"V has rank {r} above the floor; {m} dimensions requested")
        scale = 1.0 / np.sqrt(w_all[keep])
        # W = V^(-1/2) restricted to the retained coordinates, shape (K, r)
        if sp.issparse(C):
            Cs = sp.csr_matrix(C)[keep][:, keep]
            Q = sp.diags(scale) @ Cs @ sp.diags(scale)
            Q = (0.5 * (Q + Q.T)).tocsr()
        else:
            Q = C[np.ix_(keep, keep)] * scale[:, None] * scale[None, :]
            Q = 0.5 * (Q + Q.T)

        def back(U):
            P = np.zeros((U.shape[1], stats.K))
            P[:, keep] = (U * scale[:, None]).T
            return P
    else:
        Vd = V.toarray() if sp.issparse(V) else V
        Cd = C.toarray() if sp.issparse(C) else C
        w, E = scipy.linalg.eigh(0.5 * (Vd + Vd.T))
        vmax = w.max()
        if vmax <= 0:
            raise RankError("V is zero")
        floor = v_floor_rel * vmax
        keep = w > floor
        r = int(keep.sum())
        if m > r:
            raise RankError(f"V has rank {r} above the floor; {m} dimensions requested")
        W = E[:, keep] / np.sqrt(w[keep])
        Q = W.T @ Cd @ W
        Q = 0.5 * (Q + Q.T)

        def back(U):
            return U.T @ W.T

    use_dense = method == "dense" or (method == "auto" and r <= DENSE_EIGH_MAX)
    if method not in ("auto", "dense", "lanczos"):
        raise ValueError(f"unknown method {method!r}")
    if use_dense:
        Qd = Q.toarray() if sp.issparse(Q) else Q
        mu, U = scipy.linalg.eigh(Qd, subset_by_index=[0, m - 1])
    else:
        mu, U = _smallest_eigs_lanczos(Q, m)
    P = _fix_signs(back(U[:, drop_first:]))
    return SpectralEmbedding(P, mu, drop_first, float(floor), {"rank": r})


def objective_value(P, stats: CooccurrenceStats):
    """tr(P C P^T) with C normalised by the pair count."""
    P = np.asarray(P)
    if P.ndim != 2 or P.shape[1] != stats.K:
        raise ValueError(f"P has shape {P.shape}, expected (d, {stats.K})")
    _, C = stats.normalized()
    return float(np.sum(P * (C @ P.T).T))


def constraint_residual(P, stats: CooccurrenceStats):
    """max |P V P^T - I|."""
    V, _ = stats.normalized()
    G = P @ (V @ P.T)
    return float(np.abs(G - np.eye(len(P))).max())


def whitening_projection(stats: CooccurrenceStats, v_floor_rel=1e-7):
    """Code-space whitening ``diag(w^-1/2) E^T`` on the retained eigenspace of V, shape (r, K).

    Equivalent (up to an orthogonal rotation) to the full-dimension
    embedding with no dropped dimensions.
    """
    V, _ = stats.normalized()
    Vd = V.toarray() if sp.issparse(V) else V
    if _is_diagonal(Vd):
        w = np.diag(Vd).astype(np.float64)
        keep = np.flatnonzero(w > v_floor_rel * w.max())
        W = np.zeros((len(keep), stats.K))
        W[np.arange(len(keep)), keep] = 1.0 / np.sqrt(w[keep])
        return W
    w, E = scipy.linalg.eigh(0.5 * (Vd + Vd.T))
    keep = w > v_floor_rel * w.max()
    return (E[:, keep] / np.sqrt(w[keep])).T


def column_cosines(P, index):
    """Cosine similarity between column ``index`` of P and every column."""
    cols = np.asarray(P)
    norms = np.linalg.norm(cols, axis=0)
    q = cols[:, index]
    denom = norms * norms[index]
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0, (q @ cols) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(cos, -1.0, 1.0)
