import numpy as np
import pytest
import scipy.sparse as sp

from smt.core import CooccurrenceStats, SpectralEmbedding
from smt.errors import StateError
from smt.preprocess import l2_normalize
from smt.representation import (
    PipelineConfig,
    SMTModel,
    avg_pool,
    collect_training_pairs,
    embed_images_concat,
    grid_neighbor_pairs,
    pool_and_normalize,
)


def brute_pairs(rows, cols, d):
    cells = [(i, j) for i in range(rows) for j in range(cols)]
    out = set()
    for a, (i, j) in enumerate(cells):
        for b, (l, m) in enumerate(cells):
            if a < b and abs(i - l) <= d and abs(j - m) <= d:
                out.add((a, b))
    return out


@pytest.mark.parametrize("rows,cols,d", [(3, 3, 1), (4, 5, 2), (5, 3, 0), (6, 6, 10), (1, 7, 3)])
def test_neighbor_pairs_brute_force(rows, cols, d):
    p, q = grid_neighbor_pairs(rows, cols, d)
    got = {tuple(sorted(x)) for x in zip(p.tolist(), q.tolist())}
    assert len(got) == len(p)
    assert got == brute_pairs(rows, cols, d)


def test_neighbor_pair_counts():
    assert len(grid_neighbor_pairs(3, 3, 1)[0]) == 20
    assert len(grid_neighbor_pairs(3, 3, 0)[0]) == 0
    n = 23 * 23
    assert len(grid_neighbor_pairs(23, 23, 23)[0]) == n * (n - 1) // 2


def test_pooling_examples(rng):
    B = l2_normalize(rng.normal(size=(2, 5, 5, 4)))
    z, layout = pool_and_normalize(B, 5, 5)
    assert layout == (1, 1, 4) and z.shape == (2, 4)
    z, layout = pool_and_normalize(B, 1, 1)
    np.testing.assert_allclose(z.reshape(2, 5, 5, 4), B, atol=1e-12)
    beta = l2_normalize(rng.normal(size=3))
    const = np.tile(beta, (4, 4, 1)) * 0.5
    z, layout = pool_and_normalize(const, 2, 2)
    assert layout == (2, 2, 3)
    np.testing.assert_allclose(z.reshape(2, 2, 3), np.tile(beta, (2, 2, 1)))
    with pytest.raises(ValueError):
        avg_pool(B, 6, 1)


def test_pooling_matches_manual(rng):
    B = rng.normal(size=(7, 7, 3))
    pooled = avg_pool(B, 3, 2)
    assert pooled.shape == (3, 3, 3)
    for a in range(3):
        for b in range(3):
            np.testing.assert_allclose(
                pooled[a, b], B[2 * a:2 * a + 3, 2 * b:2 * b + 3].mean(axis=(0, 1))
            )


def test_geometry_checks():
    with pytest.raises(ValueError):
        PipelineConfig(stride=0)
    with pytest.raises(ValueError):
        PipelineConfig(d_emb=0)
    with pytest.raises(ValueError):
        PipelineConfig(ks=24).check_geometry((28, 28, 1))
    with pytest.raises(ValueError):
        PipelineConfig(encoder="sc")


def test_unfitted_state():
    m = SMTModel(PipelineConfig())
    with pytest.raises(StateError):
        m.embed_patch(np.zeros(36))
    with pytest.raises(StateError):
        m.codes(np.zeros((1, 28, 28, 1), np.uint8))


def test_embed_patch_paths(fitted_model, mnist_small):
    model, _ = fitted_model
    K = model.dictionary.K
    # one-hot code at k gives the normalised column k of P
    k = 5
    x = model.dictionary.elements[:, k]
    patch = model.whitening.inverse @ x
    beta = model.embed_patch(patch)
    np.testing.assert_allclose(beta, l2_normalize(model.embedding.P[:, k]), atol=1e-5)
    # multi-hot codes sum columns
    code = sp.csr_matrix(([1.0, 1.0], [2, 9], [0, 2]), shape=(1, K))
    got = model.embed_codes(code)[0]
    want = l2_normalize(model.embedding.P[:, 2] + model.embedding.P[:, 9])
    np.testing.assert_allclose(got, want, atol=1e-6)
    assert np.array_equal(model.embed_patch(patch), model.embed_patch(patch.copy()))


def test_image_embedding_invariants(fitted_model, mnist_small):
    model, _ = fitted_model
    _, test = mnist_small
    z, layout = model.embed_images(test.images[:10])
    assert layout == (1, 1, 8) and z.shape == (10, 8) and z.dtype == np.float32
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1, atol=1e-6)
    one = model.embed_image(test.images[3])
    np.testing.assert_array_equal(one.z, z[3])


def test_composite_pooling(fitted_model, mnist_small):
    model, _ = fitted_model
    _, test = mnist_small
    B = model.patch_embeddings(test.images[:4])
    assert B.shape == (4, 23, 23, 8)
    norms = np.linalg.norm(B, axis=-1)
    assert np.all((np.abs(norms - 1) < 1e-5) | (norms == 0))
    fine, _ = pool_and_normalize(B, 1, 1)
    manual = l2_normalize(avg_pool(fine.reshape(B.shape), 23, 23)).reshape(4, -1)
    z, _ = model.embed_images(test.images[:4])
    np.testing.assert_allclose(z, manual, atol=1e-6)


def test_spatial_pooling_layout(fitted_model, mnist_small):
    model, _ = fitted_model
    _, test = mnist_small
    m2 = SMTModel(PipelineConfig(**{**model.config.as_dict(), "ks": 9, "stride": 7}),
                  model.whitening, model.dictionary, model.embedding)
    z, layout = m2.embed_images(test.images[:3])
    assert layout == (3, 3, 8) and z.shape == (3, 72)
    slices = np.linalg.norm(z.reshape(3, 9, 8), axis=-1)
    assert np.all((np.abs(slices - 1) < 1e-5) | (slices == 0))


def test_concat(fitted_model, mnist_small):
    model, _ = fitted_model
    _, test = mnist_small
    z, layout = embed_images_concat(test.images[:6], model, model)
    assert layout == (1, 1, 16) and z.shape == (6, 16)
    single, _ = model.embed_images(test.images[:6])
    np.testing.assert_allclose(z[:, :8], single, atol=1e-6)
    np.testing.assert_allclose(z[:, 8:], single, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), np.sqrt(2), atol=1e-5)
    # zeroing the second pipeline: similarities equal color-only ones, the
    # concatenated norm drops from sqrt(2) to 1
    zero = SMTModel(model.config, model.whitening, model.dictionary,
                    SpectralEmbedding(np.zeros_like(model.embedding.P), model.embedding.eigenvalues))
    zc, _ = embed_images_concat(test.images[:6], model, zero)
    np.testing.assert_allclose(zc[:, :8], single, atol=1e-6)
    np.testing.assert_allclose(zc @ zc.T, single @ single.T, atol=1e-5)
    np.testing.assert_allclose(z @ z.T / 2, single @ single.T, atol=1e-5)
    other = SMTModel(PipelineConfig(**{**model.config.as_dict(), "ks": 9, "stride": 9}),
                     model.whitening, model.dictionary, model.embedding)
    with pytest.raises(ValueError):
        embed_images_concat(test.images[:2], model, other)


def test_training_pairs(fitted_model, mnist_small):
    model, _ = fitted_model
    train, _ = mnist_small
    imgs = train.images[:3]
    batches = list(collect_training_pairs(imgs, model, seed=0))
    n = sum(a.shape[0] for a, _ in batches)
    assert n == 3 * len(grid_neighbor_pairs(23, 23, 3)[0])
    budget = list(collect_training_pairs(imgs, model, pair_budget=300, seed=1))
    assert sum(a.shape[0] for a, _ in budget) == 300
    again = list(collect_training_pairs(imgs, model, pair_budget=300, seed=1))
    assert all((a1 != a2).nnz == 0 for (a1, _), (a2, _) in zip(budget, again))
    cfg0 = PipelineConfig(**{**model.config.as_dict(), "cooc_range": 0, "context_radius": 3})
    m0 = SMTModel(cfg0, model.whitening, model.dictionary, model.embedding)
    assert list(collect_training_pairs(imgs, m0)) == []
    with pytest.raises(ValueError):
        list(collect_training_pairs(imgs[:0], model))


def test_neighborhood_modes_fit(fitted_model, mnist_small):
    model, _ = fitted_model
    train, _ = mnist_small
    for mode in ("aggregated", "second_order"):
        cfg = PipelineConfig(**{**model.config.as_dict(), "mode": mode})
        m = SMTModel(cfg, model.whitening, model.dictionary)
        stats = m.accumulate_stats(train.images[:20])
        assert stats.mode == mode and stats.n_pairs == 20 * 529
        assert np.abs(stats.C - stats.C.T).max() < 1e-9


def test_separate_second_moment(fitted_model, mnist_small):
    model, _ = fitted_model
    train, _ = mnist_small
    cfg = PipelineConfig(**{**model.config.as_dict(), "pair_second_moment": False})
    m = SMTModel(cfg, model.whitening, model.dictionary)
    stats = m.accumulate_stats(train.images[:5])
    assert stats.n_samples == 5 * 529
    assert stats.n_pairs == 5 * len(grid_neighbor_pairs(23, 23, 3)[0])


def test_fit_deterministic(mnist_small):
    train, _ = mnist_small
    cfg = PipelineConfig(K=16, d_emb=4, whiten_samples=20_000, dict_samples=5_000,
                         kmeans_epochs=3)
    a = SMTModel(cfg).fit(train.images[:40], seed=3)
    b = SMTModel(cfg).fit(train.images[:40], seed=3)
    np.testing.assert_array_equal(a.embedding.P, b.embedding.P)
    c = SMTModel(cfg).fit(train.images[:40], seed=4)
    assert not np.array_equal(a.dictionary.elements, c.dictionary.elements)


def test_flip_smoke(fitted_model, mnist_small):
    model, _ = fitted_model
    _, test = mnist_small
    z, _ = model.embed_images(test.images[:20])
    zf, _ = model.embed_images(np.flip(test.images[:20], axis=2))
    assert np.all(np.sum(z * zf, axis=1) > 0)
