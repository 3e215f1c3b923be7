import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import exhaustive_kmeans, nearest_scan
from usmkit import (
    Codebook,
    FeatureSequence,
    InsufficientDataError,
    InvalidParameterError,
    ShapeError,
    assign,
    inertia,
    kmeans_train,
    soft_posteriors,
)
from usmkit.units import DEFAULT_K, calibrate_temperature, nearest, soft_posterior_sequence

TOY = FeatureSequence(np.array([[0.0], [1.0], [10.0], [11.0]]))


def test_default_k():
    assert DEFAULT_K == 4096


def test_toy_matches_exhaustive_partition(backend):
    oracle_inertia, oracle_cents = exhaustive_kmeans([[0.0], [1.0], [10.0], [11.0]], 2)
    assert oracle_inertia == 1.0 and oracle_cents == [[0.5], [10.5]]
    for seed in range(10):
        cb = kmeans_train([TOY], K=2, seed=seed, backend=backend)
        assert sorted(cb.centroids[:, 0].tolist()) == [0.5, 10.5]
        assert cb.training_inertia == 1.0
        assert inertia(cb, [TOY]) == 1.0


def test_distinct_points_fit_exactly(rng, backend):
    pts = rng.normal(size=(7, 3))
    cb = kmeans_train(FeatureSequence(pts), K=7, seed=3, backend=backend)
    assert cb.training_inertia == 0.0
    np.testing.assert_array_equal(np.sort(cb.centroids, axis=0), np.sort(pts, axis=0))


def test_insufficient_data():
    with pytest.raises(InsufficientDataError):
        kmeans_train([TOY], K=5)


def test_matches_exhaustive_on_random_small(rng):
    for _ in range(5):
        pts = rng.normal(size=(7, 2))
        best, _ = exhaustive_kmeans(pts.tolist(), 3)
        found = min(kmeans_train(FeatureSequence(pts), K=3, seed=s).training_inertia for s in range(8))
        assert found == pytest.approx(best, rel=1e-9)


def test_monotone_inertia_history(rng, backend):
    x = np.concatenate([rng.normal(loc=c, size=(40, 2)) for c in (-5, 0, 5)])
    hist = []
    cb = kmeans_train(FeatureSequence(x), K=6, seed=1, max_iters=50, tol=0, backend=backend,
                      history=hist)
    assert len(hist) >= 2
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
    assert cb.training_inertia == hist[-1]


def test_deterministic_and_thread_independent(rng):
    x = FeatureSequence(rng.normal(size=(40000, 3)))
    a = kmeans_train(x, K=8, seed=5, max_iters=5)
    b = kmeans_train(x, K=8, seed=5, max_iters=5)
    c = kmeans_train(x, K=8, seed=5, max_iters=5, threads=3)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    assert c.training_inertia == pytest.approx(a.training_inertia, rel=1e-6)


def test_empty_cluster_reseeded():
    # all-but-one duplicate points force empty clusters after seeding
    x = FeatureSequence(np.array([[0.0]] * 6 + [[1.0], [2.0]]))
    cb = kmeans_train(x, K=3, seed=0)
    assert cb.training_inertia == 0.0
    assert sorted(cb.centroids[:, 0].tolist()) == [0.0, 1.0, 2.0]


def test_assign_exact_and_ties():
    cb = Codebook(np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [2.0, 2.0], [-1.0, 0.0]]))
    assert assign(cb, [2.0, 2.0]) == (3, 0.0)
    unit, dist = assign(cb, [0.0, 0.0])
    assert unit == 0
    # equidistant to centroids 1 and 4 -> lower index
    tie = Codebook(np.array([[9.0, 9.0], [1.0, 0.0], [8.0, 8.0], [7.0, 7.0], [-1.0, 0.0]]))
    assert assign(tie, [0.0, 0.0]) == (1, 1.0)
    with pytest.raises(ShapeError):
        assign(cb, [1.0])


def test_nearest_matches_scan(rng, backend):
    c = rng.normal(size=(20, 4))
    x = rng.normal(size=(100, 4))
    labels, dist2 = nearest(x, c, backend=backend)
    for n in range(100):
        k, dd = nearest_scan(x[n].tolist(), c.tolist())
        assert labels[n] == k
        assert dist2[n] == pytest.approx(dd, rel=1e-12)


def test_nearest_ties_both_backends(backend):
    c = np.array([[1.0], [3.0], [1.0]])
    labels, _ = nearest(np.array([[2.0], [1.0]]), c, backend=backend)
    assert labels.tolist() == [0, 0]


def test_soft_posteriors_formula():
    cb = Codebook(np.array([[0.0], [1.0]]))
    p = soft_posteriors(cb, [0.25], 1.0)
    e0, e1 = np.exp(-0.0625), np.exp(-0.5625)
    np.testing.assert_allclose(p, [e0 / (e0 + e1), e1 / (e0 + e1)], rtol=1e-14)
    np.testing.assert_allclose(p, [0.6225, 0.3775], atol=1e-4)


def test_soft_posteriors_symmetry_and_limit():
    cb = Codebook(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]))
    np.testing.assert_allclose(soft_posteriors(cb, [0.0, 0.0], 0.7), [0.25] * 4, rtol=1e-14)
    p = soft_posteriors(cb, [0.3, 0.9], 1e-6)
    unit, _ = assign(cb, [0.3, 0.9])
    assert p[unit] == 1.0
    with pytest.raises(InvalidParameterError):
        soft_posteriors(cb, [0.0, 0.0], 0.0)


def test_soft_sequence_and_calibration(rng):
    cb = Codebook(rng.normal(size=(5, 2)))
    x = FeatureSequence(rng.normal(size=(30, 2)))
    tau = calibrate_temperature(cb, x)
    _, dist2 = nearest(x.frames, cb.centroids)
    assert tau == pytest.approx(dist2.mean(), rel=1e-12)
    post = soft_posterior_sequence(cb, x, tau)
    assert post.num_frames == 30 and post.num_classes == 5
    np.testing.assert_allclose(post.dense[3], soft_posteriors(cb, x.frames[3], tau), rtol=1e-12)
    assert calibrate_temperature(Codebook(np.array([[1.0]])), FeatureSequence(np.array([[1.0]]))) == 1.0


def test_inertia_definition():
    cb = Codebook(np.array([[1.0, 2.0]]))
    assert inertia(cb, FeatureSequence(np.array([[4.0, 6.0]]))) == 25.0
    assert inertia(Codebook(TOY.frames), [TOY]) == 0.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 6), tau=st.floats(1e-3, 1e3),
       shift=st.floats(0, 50))
def test_soft_posterior_properties(seed, K, tau, shift):
    rng = np.random.default_rng(seed)
    cb = Codebook(rng.normal(size=(K, 3)))
    f = rng.normal(size=3)
    p = soft_posteriors(cb, f, tau)
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9
    assert int(np.argmax(p)) == assign(cb, f)[0]
    from usmkit.units import _softmin
    d2 = np.sum((cb.centroids - f) ** 2, axis=1)
    np.testing.assert_allclose(_softmin(d2[None] + shift, tau)[0], p, rtol=1e-9, atol=1e-300)
