"""Two entangled spirals in 2D, disentangled by a 1-sparse lifting plus spectral embedding."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CooccurrenceStats, accumulate_pairs, solve_embedding
from .dictionary import kmeans_fit, sample_dictionary
from .preprocess import l2_normalize
from .sparse_features import encode_vq_batch
from .visualize import svg_scatter


@dataclass
class SpiralDataset:
    points: np.ndarray  # (n, 2)
    manifold_id: np.ndarray  # (n,) in {0, 1}
    arc_param: np.ndarray  # (n,) in [0, 1]


def spiral_arm(s, turns=1.5, r0=0.5):
    """Archimedean arm r = r0 + theta / pi, theta = 2 pi turns s."""
    theta = 2 * np.pi * turns * np.asarray(s, dtype=float)
    r = r0 + theta / np.pi
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


def generate_spirals(n_per_arm=2000, turns=1.5, noise_sd=0.0, seed=0, r0=0.5):
    """Two arms offset by pi; the radial gap between them is 1 everywhere.

    Arc parameters are uniform on [0, 1] and sorted; ``noise_sd`` adds radial
    Gaussian jitter.
    """
    if n_per_arm < 2:
        raise ValueError("need at least two points per arm")
    rng = np.random.default_rng(seed)
    s = np.sort(rng.uniform(0.0, 1.0, n_per_arm))
    arm0 = spiral_arm(s, turns, r0)
    pts = np.concatenate([arm0, -arm0])
    if noise_sd > 0:
        radial = l2_normalize(pts)
        pts = pts + radial * rng.normal(0.0, noise_sd, size=(len(pts), 1))
    return SpiralDataset(
        pts,
        np.repeat([0, 1], n_per_arm),
        np.concatenate([s, s]),
    )


def noisy_pair(x, sigma, seed=None):
    """Two independent isotropic Gaussian perturbations of the same point(s)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    return x + sigma * rng.standard_normal(x.shape), x + sigma * rng.standard_normal(x.shape)


def median_spacing(landmarks):
    """Median distance from each landmark (rows) to its nearest other landmark."""
    L = np.asarray(landmarks)
    d2 = np.sum((L[:, None, :] - L[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    return float(np.median(np.sqrt(d2.min(axis=1))))


@dataclass
class SpiralReport:
    landmarks: np.ndarray  # (K, 2)
    P: np.ndarray  # (d_emb, K)
    eigenvalues: np.ndarray
    codes: np.ndarray  # landmark index per data point
    beta: np.ndarray  # (n, d_emb), P f(x) per data point
    sigma: float
    probe: int
    euclidean_neighbors: np.ndarray
    cosine_neighbors: np.ndarray
    metrics: dict = field(default_factory=dict)

    def transform(self, points):
        idx = encode_vq_batch(points, self.landmarks.T, metric="euclidean").indices
        return self.P[:, idx].T


def arm_cosine_means(beta, arm):
    """Mean pairwise cosine within arms and across arms (self-pairs excluded)."""
    B = l2_normalize(np.asarray(beta, dtype=float))
    G = B @ B.T
    same = arm[:, None] == arm[None, :]
    np.fill_diagonal(same, False)
    cross = arm[:, None] != arm[None, :]
    return float(G[same].mean()), float(G[cross].mean())


def nn_arm_accuracy(train_beta, train_arm, test_beta, test_arm):
    """1-NN (cosine) arm classification accuracy."""
    T = l2_normalize(np.asarray(train_beta, dtype=float))
    Q = l2_normalize(np.asarray(test_beta, dtype=float))
    pred = train_arm[np.argmax(Q @ T.T, axis=1)]
    return float(np.mean(pred == test_arm))


def piecewise_constant_score(beta, arm, dim):
    """(max within-arm std, between-arm mean gap) for one embedding dimension."""
    v = np.asarray(beta)[:, dim]
    stds = [v[arm == a].std() for a in (0, 1)]
    gap = abs(v[arm == 0].mean() - v[arm == 1].mean())
    return float(max(stds)), float(gap)


def run_spiral_smt(dataset: SpiralDataset, K=400, sigma=None, d_emb=4, seed=0,
                   dict_method="kmeans", draws=10, probe=None, n_neighbors=50):
    """Fit landmarks, accumulate noisy pairs, solve for P and summarise the result."""
    X = dataset.points
    if K > len(X):
        raise ValueError("more landmarks than data points")
    if dict_method == "kmeans":
        D = kmeans_fit(X, K, spherical=False, epochs=50, eta=1.0, seed=seed)
    else:
        D = sample_dictionary(X, K, seed=seed, normalize=False)
    landmarks = D.elements.T
    if sigma is None:
        sigma = 0.5 * median_spacing(landmarks)
    rng = np.random.default_rng(seed + 1)
    stats = CooccurrenceStats(K)
    base = np.repeat(X, draws, axis=0)
    x1, x2 = noisy_pair(base, sigma, rng)
    accumulate_pairs(
        stats,
        encode_vq_batch(x1, D, metric="euclidean"),
        encode_vq_batch(x2, D, metric="euclidean"),
    )
    emb = solve_embedding(stats, d_emb)
    codes = encode_vq_batch(X, D, metric="euclidean").indices
    beta = emb.P[:, codes].T
    if probe is None:
        arm0 = np.flatnonzero(dataset.manifold_id == 0)
        probe = int(arm0[len(arm0) // 2])
    euc = np.argsort(np.sum((X - X[probe]) ** 2, axis=1), kind="stable")
    euc = euc[euc != probe][:n_neighbors]
    Bn = l2_normalize(beta)
    cos = np.argsort(-(Bn @ Bn[probe]), kind="stable")
    cos = cos[cos != probe][:n_neighbors]
    within, cross = arm_cosine_means(beta, dataset.manifold_id)
    arm = dataset.manifold_id
    metrics = {
        "within_arm_cosine": within,
        "cross_arm_cosine": cross,
        "euclidean_neighbors_same_arm": float(np.mean(arm[euc] == arm[probe])),
        "cosine_neighbors_same_arm": float(np.mean(arm[cos] == arm[probe])),
        "sigma": float(sigma),
    }
    return SpiralReport(landmarks, emb.P, emb.eigenvalues, codes, beta, float(sigma), probe,
                        euc, cos, metrics)


def write_outputs(dataset: SpiralDataset, report: SpiralReport, out_dir, svg=True):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = report.beta.shape[1]
    with open(out / "embeddings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "arm"] + [f"beta{i + 1}" for i in range(d)])
        for (x, y), a, b in zip(dataset.points, dataset.manifold_id, report.beta):
            w.writerow([repr(float(x)), repr(float(y)), int(a)] + [repr(float(v)) for v in b])
    with open(out / "landmarks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"] + [f"P{i + 1}" for i in range(d)])
        for (x, y), col in zip(report.landmarks, report.P.T):
            w.writerow([repr(float(x)), repr(float(y))] + [repr(float(v)) for v in col])
    with open(out / "neighbors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "rank", "index", "x", "y", "arm"])
        for kind, idx in (("euclidean", report.euclidean_neighbors),
                          ("cosine", report.cosine_neighbors)):
            for r, i in enumerate(idx):
                x, y = dataset.points[i]
                w.writerow([kind, r + 1, int(i), repr(float(x)), repr(float(y)),
                            int(dataset.manifold_id[i])])
    if svg:
        svg_scatter(dataset.points, dataset.manifold_id, out / "data.svg", "data (arm)")
        for i in range(d):
            svg_scatter(report.landmarks, report.P[i], out / f"landmarks_P{i + 1}.svg",
                        f"landmark values of P row {i + 1}")
            svg_scatter(dataset.points, report.beta[:, i], out / f"transform_beta{i + 1}.svg",
                        f"embedding dimension {i + 1}")
