import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from core_oracles import oracle_objective, random_codes, random_instance, row_space_projector
from smt.core import (
    CooccurrenceStats,
    SpectralEmbedding,
    accumulate_differences,
    accumulate_neighborhood,
    accumulate_pair,
    accumulate_second_moment,
    constraint_residual,
    merge_stats,
    objective_value,
    solve_embedding,
    whitening_projection,
)
from smt.errors import ModeError, NumericError, RankError
from smt.sparse_features import SparseCode


def onehot(K, i):
    return SparseCode(K, (i,))


def test_second_moment_examples():
    s = CooccurrenceStats(5, pair_second_moment=False)
    accumulate_second_moment(s, onehot(5, 2))
    expected = np.zeros((5, 5))
    expected[2, 2] = 1
    np.testing.assert_array_equal(s.V, expected)
    accumulate_second_moment(s, SparseCode(5, (0, 3)))
    for i, j in [(0, 0), (3, 3), (0, 3), (3, 0)]:
        expected[i, j] += 1
    np.testing.assert_array_equal(s.V, expected)
    assert s.n_samples == 2


def test_second_moment_dense_oracle(rng):
    A = random_codes(rng, 1000, 40, "gq")
    s = CooccurrenceStats(40, pair_second_moment=False)
    for i in range(0, 1000, 97):
        accumulate_second_moment(s, A[i:i + 97])
    V, _ = s.normalized()
    Ad = A.toarray().T
    np.testing.assert_allclose(V, Ad @ Ad.T / 1000, atol=1e-12)


def test_pair_examples():
    s = CooccurrenceStats(4)
    accumulate_pair(s, onehot(4, 1), onehot(4, 1))
    assert not s.C.any() and s.n_pairs == 1
    accumulate_pair(s, onehot(4, 0), onehot(4, 3))
    expected = np.zeros((4, 4))
    expected[0, 0] = expected[3, 3] = 1
    expected[0, 3] = expected[3, 0] = -1
    np.testing.assert_array_equal(s.C, expected)
    # V gets half of each endpoint
    assert s.V[0, 0] == 0.5 and s.V[3, 3] == 0.5 and s.V[1, 1] == 1.0
    assert s.n_samples == 2


def test_pair_dense_oracle(rng):
    K = 32
    A = random_codes(rng, 300, K, "gq").toarray()
    B = random_codes(rng, 300, K, "gq").toarray()
    s = CooccurrenceStats(K)
    accumulate_pair(s, sp.csr_matrix(A), sp.csr_matrix(B))
    C = sum(np.outer(a - b, a - b) for a, b in zip(A, B))
    V = sum(0.5 * (np.outer(a, a) + np.outer(b, b)) for a, b in zip(A, B))
    np.testing.assert_allclose(s.C, C)
    np.testing.assert_allclose(s.V, V)
    with pytest.raises(ModeError):
        accumulate_pair(CooccurrenceStats(K, mode="aggregated"), A[:1], B[:1])


def test_neighborhood_modes(rng):
    K = 8
    s = CooccurrenceStats(K, mode="aggregated")
    c = SparseCode(K, (1, 4))
    accumulate_neighborhood(s, c, [c, c, c])
    assert not s.C.any()

    a = CooccurrenceStats(K, mode="aggregated")
    p = CooccurrenceStats(K)
    accumulate_neighborhood(a, onehot(K, 2), [onehot(K, 5)])
    accumulate_pair(p, onehot(K, 2), onehot(K, 5))
    np.testing.assert_array_equal(a.C, p.C)

    # three neighbours: dense column of A D
    center = rng.integers(0, 2, K).astype(float)
    center[0] = 1
    nbrs = [rng.integers(0, 2, K).astype(float) + np.eye(K)[j] for j in (1, 2, 3)]
    nbrs = [np.minimum(v, 1) for v in nbrs]
    s = CooccurrenceStats(K, mode="aggregated")
    accumulate_neighborhood(s, center, nbrs)
    delta = 3 * center - sum(nbrs)
    np.testing.assert_allclose(s.C, np.outer(delta, delta))
    np.testing.assert_allclose(s.V, np.outer(center, center))

    w = np.array([0.5, 0.3, 0.2])
    s = CooccurrenceStats(K, mode="second_order")
    accumulate_neighborhood(s, center, nbrs, w)
    delta = center - sum(wi * v for wi, v in zip(w, nbrs))
    np.testing.assert_allclose(s.C, np.outer(delta, delta), atol=1e-14)
    with pytest.raises(ValueError):
        accumulate_neighborhood(s, center, nbrs)
    with pytest.raises(ValueError):
        accumulate_neighborhood(s, center, nbrs, [0.5, 0.3, 0.3])
    with pytest.raises(ModeError):
        accumulate_neighborhood(CooccurrenceStats(K), center, nbrs)


def test_batched_differences_match_loop(rng):
    K, n = 10, 12
    A = random_codes(rng, n, K).toarray()
    nb = [[j for j in range(n) if j != i and abs(j - i) <= 2] for i in range(n)]
    one = CooccurrenceStats(K, mode="aggregated")
    for i in range(n):
        accumulate_neighborhood(one, A[i], [A[j] for j in nb[i]])
    S = np.zeros((n, n))
    for i in range(n):
        S[i, nb[i]] = 1
    batched = CooccurrenceStats(K, mode="aggregated")
    accumulate_differences(batched, (np.diag(S.sum(1)) - S) @ A, A)
    np.testing.assert_allclose(batched.C, one.C)
    np.testing.assert_allclose(batched.V, one.V)
    assert (batched.n_pairs, batched.n_samples) == (one.n_pairs, one.n_samples)


def test_merge(rng):
    K = 12
    A = random_codes(rng, 200, K)
    B = random_codes(rng, 200, K)
    full = CooccurrenceStats(K)
    accumulate_pair(full, A, B)
    h1, h2 = CooccurrenceStats(K), CooccurrenceStats(K)
    accumulate_pair(h1, A[:100], B[:100])
    accumulate_pair(h2, A[100:], B[100:])
    m = merge_stats(h1, h2)
    assert m.V.tobytes() == full.V.tobytes() and m.C.tobytes() == full.C.tobytes()
    assert (m.n_pairs, m.n_samples) == (full.n_pairs, full.n_samples)
    m2 = merge_stats(h2, h1)
    np.testing.assert_array_equal(m.C, m2.C)
    e = merge_stats(full, CooccurrenceStats(K))
    np.testing.assert_array_equal(e.C, full.C)
    with pytest.raises(ValueError):
        merge_stats(full, CooccurrenceStats(K + 1))
    with pytest.raises(ValueError):
        merge_stats(full, CooccurrenceStats(K, mode="aggregated"))


def test_stats_invariants(rng):
    s = random_instance(rng, K=30)
    V, C = s.normalized()
    assert np.abs(V - V.T).max() < 1e-10 and np.abs(C - C.T).max() < 1e-10
    for _ in range(20):
        x = rng.normal(size=30)
        assert x @ V @ x >= -1e-12 and x @ C @ x >= -1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_solution_matches_generalized_oracle(seed):
    rng = np.random.default_rng(seed)
    s = random_instance(rng)
    d = int(rng.integers(1, min(s.K, 8) + 1))
    emb = solve_embedding(s, d)
    assert constraint_residual(emb.P, s) < 1e-6
    obj = objective_value(emb.P, s)
    assert abs(obj - emb.retained_eigenvalues.sum()) < 1e-8
    assert abs(obj - oracle_objective(s, d)) < 1e-8
    assert np.all(np.diff(emb.eigenvalues) >= -1e-12)
    assert emb.eigenvalues.min() > -1e-8


def test_drop_first(rng):
    s = random_instance(rng, K=20)
    full = solve_embedding(s, 6)
    dropped = solve_embedding(s, 4, drop_first=2)
    np.testing.assert_allclose(dropped.retained_eigenvalues, full.eigenvalues[2:], atol=1e-10)
    assert dropped.d_emb == 4 and len(dropped.eigenvalues) == 6
    assert constraint_residual(dropped.P, s) < 1e-6


def test_path_graph_k16():
    K = 16
    s = CooccurrenceStats(K)
    for _ in range(3):
        for i in range(K - 1):
            accumulate_pair(s, onehot(K, i), onehot(K, i + 1))
    for m in (1, 3, 8):
        emb = solve_embedding(s, m)
        assert abs(objective_value(emb.P, s) - oracle_objective(s, m)) < 1e-8
    emb = solve_embedding(s, 2)
    # the smoothest non-constant function on a path is monotone
    diffs = np.diff(emb.P[1])
    assert np.all(diffs > 0) or np.all(diffs < 0)
    assert abs(emb.eigenvalues[0]) < 1e-10


def test_zero_c(rng):
    K = 10
    s = CooccurrenceStats(K, pair_second_moment=False)
    accumulate_second_moment(s, random_codes(rng, 50, K))
    emb = solve_embedding(s, 5)
    np.testing.assert_allclose(emb.eigenvalues, 0, atol=1e-12)
    assert constraint_residual(emb.P, s) < 1e-6
    assert objective_value(emb.P, s) == 0


def test_full_rank_reduces_to_whitening(rng):
    for _ in range(5):
        s = random_instance(rng)
        emb = solve_embedding(s, s.K)
        W = whitening_projection(s)
        assert np.abs(row_space_projector(emb.P) - row_space_projector(W)).max() < 1e-6
        # P = U W for orthogonal U, so the Gram matrices agree
        np.testing.assert_allclose(emb.P.T @ emb.P, W.T @ W, atol=1e-8 * np.abs(W.T @ W).max())


def test_optimal_against_random_feasible(rng):
    s = random_instance(rng, K=24)
    d = 3
    emb = solve_embedding(s, d)
    best = objective_value(emb.P, s)
    W = whitening_projection(s)
    for _ in range(1000):
        R, _ = np.linalg.qr(rng.normal(size=(W.shape[0], d)))
        P = R.T @ W
        assert objective_value(P, s) >= best - 1e-10


def test_permutation_equivariance(rng):
    K = 14
    A = random_codes(rng, 200, K, "vq")
    perm = rng.permutation(200)
    s1 = CooccurrenceStats(K)
    accumulate_pair(s1, A[perm[:-1]], A[perm[1:]])
    pk = rng.permutation(K)
    Ap = A[:, pk]
    s2 = CooccurrenceStats(K)
    accumulate_pair(s2, Ap[perm[:-1]], Ap[perm[1:]])
    P1 = solve_embedding(s1, 4).P
    P2 = solve_embedding(s2, 4).P
    for r in range(4):
        a, b = P1[r, pk], P2[r]
        assert min(np.abs(a - b).max(), np.abs(a + b).max()) < 1e-8


def test_objective_sign_invariance(rng):
    s = random_instance(rng, K=12)
    emb = solve_embedding(s, 3)
    flipped = emb.P * np.array([1, -1, 1])[:, None]
    assert objective_value(flipped, s) == pytest.approx(objective_value(emb.P, s), abs=1e-14)
    one = solve_embedding(s, 1)
    assert objective_value(one.P, s) == pytest.approx(oracle_objective(s, 1), abs=1e-10)
    assert objective_value(np.zeros((2, 12)), CooccurrenceStats(12)) == 0


def test_errors(rng):
    K = 6
    s = CooccurrenceStats(K)
    accumulate_pair(s, onehot(K, 0), onehot(K, 1))
    with pytest.raises(RankError):
        solve_embedding(s, 3)  # only two codes ever used
    with pytest.raises(RankError):
        solve_embedding(s, 1, drop_first=2)
    s.C[0, 0] = np.nan
    with pytest.raises(NumericError):
        solve_embedding(s, 1)
    with pytest.raises(RankError):
        solve_embedding(CooccurrenceStats(K), 1)
    with pytest.raises(ValueError):
        objective_value(np.zeros((1, K + 1)), CooccurrenceStats(K))


def test_floor_excludes_unused_codes(rng):
    K = 10
    A = random_codes(rng, 100, 6, "vq")
    A = sp.hstack([A, sp.csr_matrix((100, 4))], format="csr")
    s = CooccurrenceStats(K)
    accumulate_pair(s, A[:-1], A[1:])
    emb = solve_embedding(s, 6)
    assert np.all(emb.P[:, 6:] == 0)
    assert emb.meta["rank"] == 6


@pytest.mark.parametrize("kind", ["vq", "gq"])
def test_lanczos_agrees_with_dense(rng, kind):
    s = random_instance(rng, K=60, kind=kind)
    a = solve_embedding(s, 5, method="dense")
    b = solve_embedding(s, 5, method="lanczos")
    np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, atol=1e-8)
    assert constraint_residual(b.P, s) < 1e-6


def test_sparse_diagonal_path(rng):
    K = 30
    A = random_codes(rng, 400, K, "vq")
    dense = CooccurrenceStats(K)
    accumulate_pair(dense, A[:-1], A[1:])
    sparse = CooccurrenceStats(K, dense=False)
    accumulate_pair(sparse, A[:-1], A[1:])
    a = solve_embedding(dense, 5)
    b = solve_embedding(sparse, 5)
    np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, atol=1e-10)
    np.testing.assert_allclose(np.abs(a.P), np.abs(b.P), atol=1e-8)


def test_blobs(rng):
    s = random_instance(rng, K=9)
    back = CooccurrenceStats.from_bytes(s.to_bytes())
    np.testing.assert_array_equal(back.V, s.V)
    np.testing.assert_array_equal(back.C, s.C)
    assert (back.n_pairs, back.n_samples, back.mode) == (s.n_pairs, s.n_samples, s.mode)
    emb = solve_embedding(s, 3, drop_first=1)
    e2 = SpectralEmbedding.from_bytes(emb.to_bytes())
    np.testing.assert_array_equal(e2.P, emb.P)
    np.testing.assert_array_equal(e2.eigenvalues, emb.eigenvalues)
    assert e2.drop_first == 1
