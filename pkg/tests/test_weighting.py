"""K-means prototypes and distance-weighted ensembling tests."""

import itertools

import numpy as np
import pytest

from alacarte import backbone as B
from alacarte import pool as PL
from alacarte import prompts as P
from alacarte import weighting as W
from alacarte.errors import CompositionError, ConfigError, DataError

TINY = B.BackboneConfig(image_size=16, patch_size=8, d_model=32, n_layers=2, n_heads=4)


@pytest.fixture(scope="module")
def params():
    return B.init_backbone(TINY, seed=0).freeze()


def images(n=4, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (n, 16, 16, 3), dtype=np.uint8)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def brute_force_best_2means(points):
    """Exact optimum over every assignment of the points into two
    non-empty groups, each scored at its own mean."""
    n = len(points)
    best = np.inf
    for bits in itertools.product([0, 1], repeat=n - 1):
        assign = np.array((0,) + bits)
        obj = 0.0
        for g in (0, 1):
            member = points[assign == g]
            if len(member) == 0:
                obj = np.inf
                break
            obj += ((member - member.mean(axis=0)) ** 2).sum()
        best = min(best, obj)
    return best


def test_kmeans_matches_exhaustive_partition_oracle():
    rng = np.random.default_rng(42)
    points = np.concatenate([
        rng.normal(0.0, 1.0, (6, 3)),
        rng.normal(3.0, 1.0, (6, 3)),
    ])
    centroids = W.kmeans(points, 2, seed=0)
    got = W._kmeans_objective(points, centroids)
    want = brute_force_best_2means(points)
    assert got == pytest.approx(want, rel=1e-9)


def test_kmeans_k1_is_the_mean():
    rng = np.random.default_rng(1)
    points = rng.normal(0, 1, (20, 4))
    c = W.kmeans(points, 1, seed=0)
    np.testing.assert_allclose(c[0], points.mean(axis=0), rtol=1e-12)


def test_kmeans_clips_k_with_warning():
    points = np.random.default_rng(2).normal(0, 1, (5, 3))
    with pytest.warns(UserWarning, match="clipping"):
        c = W.kmeans(points, 8, seed=0)
    assert c.shape == (5, 3)


def test_kmeans_deterministic_and_rejects():
    points = np.random.default_rng(3).normal(0, 1, (30, 4))
    a = W.kmeans(points, 3, seed=9)
    b = W.kmeans(points, 3, seed=9)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(DataError):
        W.kmeans(np.zeros((0, 4)), 2)
    with pytest.raises(ConfigError):
        W.kmeans(points, 0)


# ---------------------------------------------------------------------------
# distances and weights
# ---------------------------------------------------------------------------

def test_min_distance_hand_case():
    cents = np.array([[3.0, 4.0], [0.0, 1.0]])
    d = W.min_distance(np.array([[0.0, 0.0]]), cents)
    assert d.shape == (1,)
    assert d[0] == pytest.approx(1.0)
    scalar = W.min_distance(np.array([0.0, 0.0]), cents)
    assert np.isscalar(scalar) or scalar.ndim == 0
    assert float(scalar) == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        W.min_distance(np.zeros((2, 3)), cents)


def test_source_weights_closed_form():
    d = np.array([1.0, 3.0])
    beta = 2.0
    got = W.source_weights(d, beta)
    e = np.exp(-beta * d)
    np.testing.assert_allclose(got, e / e.sum(), rtol=1e-9)
    assert got.sum() == pytest.approx(1.0, abs=1e-12)


def test_source_weights_beta_zero_uniform():
    d = np.array([[0.3, 9.0, 4.4], [1.0, 1.0, 2.0]])
    w = W.source_weights(d, 0.0)
    np.testing.assert_array_equal(w, np.full((2, 3), 1.0 / 3.0))


def test_source_weights_rejects_negative_beta():
    with pytest.raises(ConfigError):
        W.source_weights(np.array([1.0, 2.0]), -0.5)


def test_weights_favor_nearest_cluster():
    """Two well-separated Gaussian blobs: samples weight their own blob's
    prototypes at least 90% of the time."""
    rng = np.random.default_rng(7)
    blob_a = rng.normal(-4.0, 1.0, (40, 8))
    blob_b = rng.normal(4.0, 1.0, (40, 8))
    protos = [W.kmeans(blob_a, 3, seed=0), W.kmeans(blob_b, 3, seed=0)]
    test_a = rng.normal(-4.0, 1.0, (40, 8))
    test_b = rng.normal(4.0, 1.0, (40, 8))
    emb = np.concatenate([test_a, test_b])
    dists = np.stack([W.min_distance(emb, c) for c in protos], axis=1)
    w = W.source_weights(dists, beta=1.0)
    own = np.concatenate([np.zeros(40, int), np.ones(40, int)])
    assert (w.argmax(axis=1) == own).mean() >= 0.9


# ---------------------------------------------------------------------------
# prototypes against the backbone
# ---------------------------------------------------------------------------

def test_build_prototypes_deterministic(params):
    imgs = images(12, seed=5)
    a = W.build_prototypes(TINY, params, imgs, "s", k=3, seed=1)
    b = W.build_prototypes(TINY, params, imgs, "s", k=3, seed=1)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    assert a.k == 3
    assert a.built_from == params.fingerprint()
    with pytest.raises(DataError):
        W.build_prototypes(TINY, params, np.zeros((0, 16, 16, 3), np.uint8), "s")


def test_attach_prototypes_checks_backbone(params):
    ps = P.init_prompt_set(TINY, "s", [0, 1], params.fingerprint())
    protos = W.build_prototypes(TINY, params, images(6), "s", k=2)
    W.attach_prototypes(ps, protos)
    np.testing.assert_array_equal(ps.prototypes, protos.centroids)
    other = W.PrototypeSet("s", protos.centroids, "deadbeef")
    with pytest.raises(ConfigError):
        W.attach_prototypes(ps, other)


# ---------------------------------------------------------------------------
# weighted prediction
# ---------------------------------------------------------------------------

def rigged_source(params, sid, label_map, head_b, centroids):
    ps = P.init_prompt_set(TINY, sid, label_map, params.fingerprint())
    ps.head_w.data[:] = 0.0
    ps.head_b.data[:] = np.asarray(head_b, dtype=ps.head_b.data.dtype)
    ps.prototypes = np.asarray(centroids, dtype=np.float64)
    return ps


def test_aptw_requires_prototypes_and_mode(params):
    pool = PL.PromptPool.in_memory(params, 4)
    pool.add(P.init_prompt_set(TINY, "bare", [0, 1], params.fingerprint()))
    with pytest.raises(ConfigError):
        W.aptw_predict(TINY, params, images(1), pool, ["bare"], mode="dil")
    c = np.zeros((1, TINY.d_model))
    pool.add(rigged_source(params, "ok", [2, 3], [0.0, 1.0], c))
    with pytest.raises(ConfigError):
        W.aptw_predict(TINY, params, images(1), pool, ["ok"], mode="open")


def test_aptw_cil_disjoint_required(params):
    pool = PL.PromptPool.in_memory(params, 4)
    c = np.zeros((1, TINY.d_model))
    pool.add(rigged_source(params, "a", [0, 1], [1.0, 2.0], c))
    pool.add(rigged_source(params, "b", [1, 2], [1.0, 2.0], c))
    with pytest.raises(CompositionError):
        W.aptw_predict(TINY, params, images(1), pool, ["a", "b"], mode="cil")


def test_aptw_dil_beta_zero_is_uniform_logit_pool(params):
    """beta=0 degenerates to the unweighted mean of per-source logits:
    with rigged heads the pooled matrix has closed form (b1+b2)/4 and the
    argmax agrees with the plain logit average."""
    pool = PL.PromptPool.in_memory(params, 4)
    b1 = np.array([1.0, 4.0, 2.0, 0.0])
    b2 = np.array([0.0, 1.0, 5.0, 2.0])
    c = np.zeros((1, TINY.d_model))
    pool.add(rigged_source(params, "u", [0, 1, 2, 3], b1, c))
    pool.add(rigged_source(params, "v", [0, 1, 2, 3], b2, c))
    imgs = images(3, seed=8)
    pooled = W.aptw_predict(TINY, params, imgs, pool, ["u", "v"], mode="dil", beta=0.0)
    want = np.tile((b1 + b2) / 4.0, (3, 1))
    np.testing.assert_allclose(pooled, want, rtol=1e-6, atol=1e-7)
    np.testing.assert_array_equal(pooled.argmax(1),
                                  np.argmax(b1 + b2) * np.ones(3, int))


def test_aptw_cil_weighting_can_flip_decision(params):
    """Prototypes sit exactly on / far from the true embeddings, so the
    in-domain episode gets nearly all the weight and overrides the louder
    out-of-domain logits."""
    imgs = images(2, seed=9)
    emb = B.forward_backbone(TINY, params, imgs).class_features().astype(np.float64)
    near = emb.copy()
    far = emb + 500.0
    pool = PL.PromptPool.in_memory(params, 4)
    pool.add(rigged_source(params, "ep0", [0, 1], [1.0, 5.0], near))
    pool.add(rigged_source(params, "ep1", [2, 3], [30.0, 20.0], far))
    flat = W.aptw_predict(TINY, params, imgs, pool, ["ep0", "ep1"],
                          mode="cil", beta=0.0)
    np.testing.assert_array_equal(flat.argmax(1), [2, 2])
    sharp, w = W.aptw_predict(TINY, params, imgs, pool, ["ep0", "ep1"],
                              mode="cil", beta=5.0, return_weights=True)
    assert (w[:, 0] > 0.99).all()
    np.testing.assert_array_equal(sharp.argmax(1), [1, 1])
