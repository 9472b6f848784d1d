"""Soft-KNN evaluation, PCA reduction and the sparse-feature baselines."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core import CooccurrenceStats, whitening_projection
from .errors import RankError
from .preprocess import l2_normalize

BLOCK = 1024


@dataclass
class KnnConfig:
    k: int = 30
    temperature: float = 0.07
    metric: str = "cosine"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.metric != "cosine":
            raise ValueError("only the cosine metric is supported")


def _normalize_rows(X):
    if sp.issparse(X):
        X = sp.csr_matrix(X, dtype=np.float64)
        norms = np.sqrt(np.asarray(X.multiply(X).sum(axis=1)).ravel())
        inv = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 0.0)
        return sp.diags(inv) @ X
    return l2_normalize(np.asarray(X, dtype=np.float32))


def soft_knn_predict(train, train_labels, queries, cfg: KnnConfig = KnnConfig()):
    """Predicted labels for each query row.

    The k most cosine-similar training vectors vote for their class with
    weight exp(cos / temperature); the highest total wins, ties to the
    smallest label.
    """
    train_labels = np.asarray(train_labels)
    if train.shape[0] == 0:
        raise ValueError("empty training set")
    if train.shape[1] != queries.shape[1]:
        raise ValueError(f"dimension mismatch: train {train.shape[1]}, query {queries.shape[1]}")
    classes, y = np.unique(train_labels, return_inverse=True)
    T = _normalize_rows(train)
    Qn = _normalize_rows(queries)
    k = min(cfg.k, T.shape[0])
    out = np.empty(queries.shape[0], dtype=train_labels.dtype)
    for start in range(0, queries.shape[0], BLOCK):
        q = Qn[start:start + BLOCK]
        sims = q @ T.T
        sims = np.asarray(sims.toarray() if sp.issparse(sims) else sims, dtype=np.float64)
        if k < sims.shape[1]:
            nn = np.argpartition(-sims, k - 1, axis=1)[:, :k]
        else:
            nn = np.broadcast_to(np.arange(sims.shape[1]), sims.shape).copy()
        s = np.take_along_axis(sims, nn, axis=1)
        # shifting by the row max leaves the argmax unchanged and avoids overflow
        w = np.exp((s - s.max(axis=1, keepdims=True)) / cfg.temperature)
        scores = np.zeros((len(s), len(classes)))
        np.add.at(scores, (np.arange(len(s))[:, None], y[nn]), w)
        out[start:start + BLOCK] = classes[np.argmax(scores, axis=1)]
    return out


def soft_knn_classify(train, train_labels, query, cfg: KnnConfig = KnnConfig()):
    query = np.asarray(query)
    return soft_knn_predict(train, train_labels, query.reshape(1, -1), cfg)[0]


def knn_accuracy(train, train_labels, test, test_labels, cfg: KnnConfig = KnnConfig()):
    pred = soft_knn_predict(train, train_labels, test, cfg)
    return float(np.mean(pred == np.asarray(test_labels)))


def knn_sweep(train, train_labels, test, test_labels, ks=(10, 30, 50), temperature=0.07):
    """Accuracy for each k; returns {k: accuracy}."""
    return {
        k: knn_accuracy(train, train_labels, test, test_labels, KnnConfig(k, temperature))
        for k in ks
    }


@dataclass
class PCA:
    mean: np.ndarray
    components: np.ndarray  # (n_components, dim), orthonormal rows
    explained_variance: np.ndarray


def pca_fit(data, n_components, tol=1e-10):
    """Top-variance directions after mean removal.

    Dense input goes through an SVD; sparse input (many rows of sparse codes)
    through the eigendecomposition of its covariance, which never densifies
    the rows.
    """
    n = data.shape[0]
    if sp.issparse(data):
        X = sp.csr_matrix(data, dtype=np.float64)
        mean = np.asarray(X.mean(axis=0)).ravel()
        G = (X.T @ X).toarray()
        cov = (G - n * np.outer(mean, mean)) / max(n - 1, 1)
        w, U = np.linalg.eigh(cov)
        w, U = w[::-1], U[:, ::-1]
        rank = int(np.sum(w > tol * max(w[0] if len(w) else 0.0, 1.0)))
        comps, var = U[:, :n_components].T, w[:n_components]
    else:
        X = np.asarray(data, dtype=np.float64)
        mean = X.mean(axis=0)
        _, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
        rank = int(np.sum(s > tol * max(s.max(initial=0.0), 1.0)))
        comps, var = Vt[:n_components], s[:n_components] ** 2 / max(n - 1, 1)
    if n_components < 1 or n_components > rank:
        raise RankError(f"{n_components} components requested, data rank is {rank}")
    return PCA(mean, comps, var)


def pca_reduce(x, pca: PCA):
    x = np.asarray(x.toarray() if sp.issparse(x) else x, dtype=np.float64)
    return (x - pca.mean) @ pca.components.T


def pooling_matrix(rows, cols, ks, stride):
    """Sparse (n_windows, rows*cols) averaging operator for ks x ks windows."""
    pr = (rows - ks) // stride + 1
    pc = (cols - ks) // stride + 1
    r0 = np.arange(pr) * stride
    c0 = np.arange(pc) * stride
    win, cell = [], []
    for a, i in enumerate(r0):
        for b, j in enumerate(c0):
            rr, cc = np.meshgrid(np.arange(i, i + ks), np.arange(j, j + ks), indexing="ij")
            cell.append((rr * cols + cc).ravel())
            win.append(np.full(ks * ks, a * pc + b))
    win = np.concatenate(win)
    cell = np.concatenate(cell)
    M = sp.csr_matrix((np.full(len(win), 1.0 / (ks * ks)), (win, cell)), shape=(pr * pc, rows * cols))
    return M, (pr, pc)


def feature_baseline(images, model, variant, stats: CooccurrenceStats | None = None, batch=None):
    """Embeddings that bypass the spectral projection.

    ``sparse_only`` pools the normalised codes themselves (a sparse CSR
    result); ``sparse_whitened`` first maps codes through V^(-1/2), which
    needs ``stats``. Pooling and pointwise normalisation match
    :meth:`SMTModel.embed_images`. Returns (z, layout).
    """
    cfg = model.config
    images = model.prepare_images(images)
    cfg.check_geometry(images.shape[1:])
    R = cfg.grid_side(images.shape[1])
    Cc = cfg.grid_side(images.shape[2])
    M, (pr, pc) = pooling_matrix(R, Cc, cfg.ks, cfg.stride)
    if variant == "sparse_whitened":
        if stats is None:
            raise ValueError("sparse_whitened needs co-occurrence statistics")
        W = whitening_projection(stats, cfg.v_floor_rel)
    elif variant != "sparse_only":
        raise ValueError(f"unknown baseline {variant!r}")
    batch = batch or cfg.batch_images
    blocks = []
    for start in range(0, len(images), batch):
        codes = model.codes(images[start:start + batch])
        n = codes.shape[0] // (R * Cc)
        pool = sp.block_diag([M] * n, format="csr")
        if variant == "sparse_only":
            beta = _normalize_rows(codes)
            pooled = _normalize_rows(pool @ beta)
            dim = codes.shape[1]
            # (n*windows, K) -> (n, windows*K)
            coo = sp.csr_matrix(pooled).tocoo()
            img, w = np.divmod(coo.row, pr * pc)
            blocks.append(sp.csr_matrix(
                (coo.data.astype(np.float32), (img, w * dim + coo.col)), shape=(n, pr * pc * dim)
            ))
        else:
            beta = model.embed_codes(codes, W)
            pooled = l2_normalize(np.asarray(pool @ beta, dtype=np.float32))
            blocks.append(pooled.reshape(n, -1))
    if variant == "sparse_only":
        z = sp.vstack(blocks, format="csr")
        return z, (pr, pc, codes.shape[1])
    return np.concatenate(blocks), (pr, pc, W.shape[0])
