"""Image representation: patch embedding, average pooling and pointwise normalisation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .core import (
    MODES,
    CooccurrenceStats,
    SpectralEmbedding,
    accumulate_differences,
    accumulate_pairs,
    accumulate_second_moments,
    solve_embedding,
)
from .dataset_io import extract_patches_batch, to_grayscale
from .dictionary import Dictionary, kmeans_fit, sample_dictionary
from .errors import StateError
from .preprocess import (
    WhiteningOperator,
    fit_whitening,
    l2_normalize,
    preprocess_patches,
    remove_contextual_mean,
    whiten,
)
from .sparse_features import Encoder

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    patch_size: int = 6
    cooc_range: int = 3
    context_radius: int | None = None  # defaults to cooc_range
    grayscale: bool = False
    encoder: str = "vq"
    threshold: float = 0.45
    K: int = 8192
    d_emb: int = 32
    drop_first: int = 0
    ks: int = 23
    stride: int = 23
    hflip: bool = False
    grayscale_concat: bool = False
    lambda_rel: float = 1e-2
    whiten_samples: int = 2_000_000
    dict_method: str = "kmeans"  # or "sample"
    dict_samples: int = 1_000_000
    spherical: bool = True
    kmeans_epochs: int = 30
    kmeans_eta: float = 0.5
    mode: str = "pairwise"
    pair_second_moment: bool = True
    pair_budget: int | None = None
    v_floor_rel: float = 1e-7
    batch_images: int = 128

    def __post_init__(self):
        if self.stride < 1 or self.ks < 1:
            raise ValueError("ks and stride must be positive")
        if self.d_emb < 1:
            raise ValueError("d_emb must be positive")
        if self.encoder not in ("vq", "gq"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def radius(self):
        return self.cooc_range if self.context_radius is None else self.context_radius

    def grid_side(self, image_side):
        return image_side - self.patch_size + 1

    def check_geometry(self, image_shape):
        side = self.grid_side(min(image_shape[:2]))
        if side < 1:
            raise ValueError(f"patch size {self.patch_size} exceeds image {image_shape}")
        if self.ks > side:
            raise ValueError(f"pooling kernel {self.ks} exceeds grid side {side}")

    def as_dict(self):
        return asdict(self)


@dataclass
class ImageEmbedding:
    z: np.ndarray
    layout: tuple  # (pool_rows, pool_cols, channels)

    def grid(self):
        return self.z.reshape(self.layout)


def avg_pool(B, ks, stride):
    """Average pooling over the two grid axes of (..., rows, cols, d), no padding."""
    B = np.asarray(B)
    rows, cols = B.shape[-3], B.shape[-2]
    if ks > rows or ks > cols:
        raise ValueError(f"kernel {ks} larger than grid {rows}x{cols}")
    if ks == rows and ks == cols:
        return B.mean(axis=(-3, -2), keepdims=True)
    win = sliding_window_view(B, (ks, ks), axis=(-3, -2))
    win = win[..., ::stride, ::stride, :, :, :]
    return win.mean(axis=(-2, -1))


def pool_and_normalize(B, ks, stride):
    """z = L2_normalize_pw(avg_pool(B)), flattened per image. Returns (z, layout)."""
    pooled = l2_normalize(avg_pool(B, ks, stride))
    layout = pooled.shape[-3:]
    return pooled.reshape(pooled.shape[:-3] + (-1,)), layout


def grid_neighbor_pairs(rows, cols, d):
    """Unordered pairs of distinct grid cells with |di| <= d and |dj| <= d.

    Returns two arrays of C-order flat indices.
    """
    d = int(d)
    ps, qs = [], []
    idx = np.arange(rows * cols).reshape(rows, cols)
    for di in range(0, min(d, rows - 1) + 1):
        for dj in range(-min(d, cols - 1), min(d, cols - 1) + 1):
            if di == 0 and dj <= 0:
                continue
            a = idx[: rows - di, max(0, -dj): cols - max(0, dj)]
            b = idx[di:, max(0, dj): cols + min(0, dj)]
            ps.append(a.ravel())
            qs.append(b.ravel())
    if not ps:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(ps), np.concatenate(qs)


@dataclass
class SMTModel:
    """Fitted pipeline state: whitening, dictionary and spectral embedding."""

    config: PipelineConfig = field(default_factory=PipelineConfig)
    whitening: WhiteningOperator | None = None
    dictionary: Dictionary | None = None
    embedding: SpectralEmbedding | None = None

    def _require(self, *names):
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise StateError(f"model is missing fitted {', '.join(missing)}")

    @property
    def encoder(self):
        return Encoder(self.config.encoder, self.config.threshold)

    def prepare_images(self, images):
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[..., None]
        if self.config.grayscale and images.shape[-1] == 3:
            images = to_grayscale(images)
        return images

    def patches(self, images):
        """Raw patch grids (N, rows, cols, dim) in [0, 1]."""
        return extract_patches_batch(self.prepare_images(images), self.config.patch_size)

    def preprocess(self, images):
        self._require("whitening")
        return preprocess_patches(self.patches(images), self.whitening, self.config.radius)

    def codes(self, images):
        """Sparse codes for every patch, one CSR row per patch (image-major, C order)."""
        self._require("whitening", "dictionary")
        x = self.preprocess(images)
        return self.encoder(x.reshape(-1, x.shape[-1]), self.dictionary)

    def embed_codes(self, codes, projection=None, offset=None):
        """beta = normalize(P alpha - offset) per code row; ``projection`` overrides P."""
        if projection is None:
            self._require("embedding")
            projection = self.embedding.P
        out = codes @ projection.T
        out = np.asarray(out.toarray() if sp.issparse(out) else out, dtype=np.float64)
        if offset is not None:
            out -= offset
        return l2_normalize(out).astype(np.float32)

    def embed_patch(self, patch, mean=None):
        """Embedding of one flattened patch; ``mean`` is its contextual mean."""
        self._require("whitening", "dictionary", "embedding")
        x = l2_normalize(whiten(np.asarray(patch, dtype=np.float64), self.whitening, mean))
        return self.embed_codes(self.encoder(x[None], self.dictionary))[0]

    def patch_embeddings(self, images, projection=None, offset=None):
        """B tensor (N, rows, cols, d) of normalised patch embeddings."""
        images = self.prepare_images(images)
        n = len(images)
        side_r = images.shape[1] - self.config.patch_size + 1
        side_c = images.shape[2] - self.config.patch_size + 1
        beta = self.embed_codes(self.codes(images), projection, offset)
        return beta.reshape(n, side_r, side_c, -1)

    def embed_images(self, images, projection=None, batch=None, offset=None):
        """Pooled, pointwise-normalised image vectors, shape (N, z_len) float32."""
        images = self.prepare_images(images)
        self.config.check_geometry(images.shape[1:])
        batch = batch or self.config.batch_images
        out, layout = [], None
        for start in range(0, len(images), batch):
            B = self.patch_embeddings(images[start:start + batch], projection, offset)
            z, layout = pool_and_normalize(B, self.config.ks, self.config.stride)
            out.append(z.astype(np.float32))
        if not out:
            return np.zeros((0, 0), np.float32), layout
        return np.concatenate(out), tuple(layout)

    def embed_image(self, image) -> ImageEmbedding:
        z, layout = self.embed_images(np.asarray(image)[None])
        return ImageEmbedding(z[0], layout)

    # fitting ---------------------------------------------------------------

    def fit_whitening(self, images, seed=0):
        cfg = self.config
        images = self.prepare_images(images)
        rng = np.random.default_rng(seed)
        per_image = cfg.grid_side(images.shape[1]) * cfg.grid_side(images.shape[2])
        n_img = min(len(images), max(1, math.ceil(cfg.whiten_samples / per_image)))
        chosen = np.sort(rng.choice(len(images), size=n_img, replace=False))

        def chunks():
            for start in range(0, n_img, cfg.batch_images):
                sel = images[chosen[start:start + cfg.batch_images]]
                p = remove_contextual_mean(extract_patches_batch(sel, cfg.patch_size), cfg.radius)
                yield p.reshape(-1, p.shape[-1])

        self.whitening = fit_whitening(chunks(), cfg.lambda_rel)
        return self.whitening

    def sample_patches(self, images, n, seed=0):
        """n preprocessed patches drawn uniformly over (image, position), zero patches excluded."""
        cfg = self.config
        images = self.prepare_images(images)
        rng = np.random.default_rng(seed)
        R = cfg.grid_side(images.shape[1])
        Cc = cfg.grid_side(images.shape[2])
        total = len(images) * R * Cc
        n = min(n, total)
        flat = np.sort(rng.choice(total, size=n, replace=False))
        img_idx = flat // (R * Cc)
        out = []
        uniq, starts = np.unique(img_idx, return_index=True)
        bounds = list(starts) + [len(flat)]
        for b0 in range(0, len(uniq), cfg.batch_images):
            ids = uniq[b0:b0 + cfg.batch_images]
            x = self.preprocess(images[ids]).reshape(len(ids), R * Cc, -1)
            for k, i in enumerate(ids):
                j = b0 + k
                pos = flat[bounds[j]:bounds[j + 1]] - i * R * Cc
                out.append(x[k, pos])
        X = np.concatenate(out)
        return X[np.linalg.norm(X, axis=1) > 1e-12]

    def fit_dictionary(self, images, seed=0):
        cfg = self.config
        if cfg.dict_method == "kmeans":
            X = self.sample_patches(images, cfg.dict_samples, seed)
            self.dictionary = kmeans_fit(
                X, cfg.K, spherical=cfg.spherical, epochs=cfg.kmeans_epochs, eta=cfg.kmeans_eta,
                seed=seed,
            )
        elif cfg.dict_method == "sample":
            X = self.sample_patches(images, max(cfg.K * 4, cfg.K), seed)
            self.dictionary = sample_dictionary(X, cfg.K, seed=seed, normalize=cfg.spherical)
        else:
            raise ValueError(f"unknown dictionary method {cfg.dict_method!r}")
        return self.dictionary

    def accumulate_stats(self, images, seed=0, stats=None):
        cfg = self.config
        self._require("whitening", "dictionary")
        if stats is None:
            stats = CooccurrenceStats(
                self.dictionary.K, mode=cfg.mode, pair_second_moment=cfg.pair_second_moment
            )
        if cfg.mode != "pairwise":
            return self._accumulate_neighborhoods(images, stats)
        for A, B, codes in collect_training_pairs(
            images, self, pair_budget=cfg.pair_budget, seed=seed, with_codes=True
        ):
            accumulate_pairs(stats, A, B)
            if not cfg.pair_second_moment:
                accumulate_second_moments(stats, codes)
        return stats

    def _accumulate_neighborhoods(self, images, stats):
        """Every patch is a centre whose neighbourhood is its co-occurrence window."""
        cfg = self.config
        images = self.prepare_images(images)
        R = cfg.grid_side(images.shape[1])
        Cc = cfg.grid_side(images.shape[2])
        p, q = grid_neighbor_pairs(R, Cc, cfg.cooc_range)
        n = R * Cc
        S = sp.csr_matrix((np.ones(2 * len(p)), (np.r_[p, q], np.r_[q, p])), shape=(n, n))
        deg = np.asarray(S.sum(axis=1)).ravel()
        if cfg.mode == "aggregated":
            op = sp.diags(deg) - S
        else:
            inv = np.where(deg > 0, 1.0 / np.where(deg > 0, deg, 1.0), 0.0)
            op = sp.identity(n) - sp.diags(inv) @ S
        for start in range(0, len(images), cfg.batch_images):
            batch = images[start:start + cfg.batch_images]
            codes = self.codes(batch)
            big = sp.block_diag([op] * len(batch), format="csr")
            accumulate_differences(stats, big @ codes, codes)
        return stats

    def fit_embedding(self, images, seed=0):
        stats = self.accumulate_stats(images, seed)
        cfg = self.config
        self.embedding = solve_embedding(stats, cfg.d_emb, cfg.drop_first, cfg.v_floor_rel)
        return stats

    def fit(self, images, seed=0):
        self.fit_whitening(images, seed)
        self.fit_dictionary(images, seed)
        self.fit_embedding(images, seed)
        return self


def collect_training_pairs(
    images, model: SMTModel, pair_budget=None, seed=0, with_codes=False
) -> Iterator:
    """Yield row-aligned CSR batches (A, B) of neighbouring patch codes.

    Neighbours are distinct patches of one image within ``cooc_range`` grid
    steps in both directions. ``pair_budget`` caps the total number of pairs
    by uniform subsampling within each image.
    """
    cfg = model.config
    images = model.prepare_images(images)
    if len(images) == 0:
        raise ValueError("empty dataset")
    R = cfg.grid_side(images.shape[1])
    Cc = cfg.grid_side(images.shape[2])
    p, q = grid_neighbor_pairs(R, Cc, cfg.cooc_range)
    if len(p) == 0:
        return
    rng = np.random.default_rng(seed)
    per_image = None
    if pair_budget is not None:
        per_image = max(1, pair_budget // len(images))
    for start in range(0, len(images), cfg.batch_images):
        batch = images[start:start + cfg.batch_images]
        codes = model.codes(batch)
        ps, qs = [], []
        for k in range(len(batch)):
            off = k * R * Cc
            if per_image is not None and per_image < len(p):
                sel = np.sort(rng.choice(len(p), size=per_image, replace=False))
                ps.append(p[sel] + off)
                qs.append(q[sel] + off)
            else:
                ps.append(p + off)
                qs.append(q + off)
        pa = np.concatenate(ps)
        qa = np.concatenate(qs)
        if with_codes:
            yield codes[pa], codes[qa], codes
        else:
            yield codes[pa], codes[qa]


def embed_image_concat(image, color: SMTModel, gray: SMTModel) -> ImageEmbedding:
    """Per-position concatenation (color, gray) of two pipelines' embeddings."""
    z, layout = embed_images_concat(np.asarray(image)[None], color, gray)
    return ImageEmbedding(z[0], layout)


def embed_images_concat(images, color: SMTModel, gray: SMTModel):
    zc, lc = color.embed_images(images)
    zg, lg = gray.embed_images(images)
    if lc[:2] != lg[:2]:
        raise ValueError(f"pooling geometry differs: {lc} vs {lg}")
    n = len(zc)
    joined = np.concatenate([zc.reshape((n,) + lc), zg.reshape((n,) + lg)], axis=-1)
    layout = (lc[0], lc[1], lc[2] + lg[2])
    return joined.reshape(n, -1), layout
