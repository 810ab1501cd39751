import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isolearn.datasets import PointCloud
from isolearn.evaluation import (
    EvalReport,
    distortion_score,
    evaluate,
    knn_preservation,
    pca_embed,
    pca_fit,
    rank_correlation,
    sample_triplets,
    spearman_corr,
    triplet_accuracy,
    triplet_agreement,
)


def _cloud(seed, n=80, s=3):
    return PointCloud(np.random.default_rng(seed).normal(size=(n, s)))


def _rotation(seed, m):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(m, m)))
    return q


def test_distortion_identity_is_zero():
    c = _cloud(0)
    assert distortion_score(c, c.points) <= 1e-12
    g = np.broadcast_to(np.eye(3), (80, 3, 3))
    assert distortion_score(c, c.points, g) <= 1e-12


def test_distortion_hand_value():
    # 1-D, latents twice the ambient coordinates, one pair at ambient distance 1
    assert distortion_score(np.array([[0.0], [1.0]]), np.array([0.0, 2.0]), None, k=1) == pytest.approx(1.0, abs=1e-9)


def test_distortion_metric_compensates_scaling():
    c = _cloud(1)
    z = 2.0 * c.points
    g = np.broadcast_to(0.25 * np.eye(3), (80, 3, 3))
    assert distortion_score(c, z) > 0.1
    assert distortion_score(c, z, g) <= 1e-12


def test_distortion_row_mismatch():
    with pytest.raises(ValueError):
        distortion_score(_cloud(0), np.zeros((79, 2)))


def test_triplet_identity():
    c = _cloud(2)
    assert triplet_accuracy(c, c.points, 2000, 0) == 1.0


def test_triplet_random_latents_near_half():
    c = _cloud(3, n=500)
    z = np.random.default_rng(99).normal(size=(500, 2))
    assert abs(triplet_accuracy(c, z, 10_000, 0) - 0.5) <= 0.05


def test_triplet_collinear_swap():
    amb = np.array([[0.0], [1.0], [2.0]])
    lat = np.array([[0.0], [2.0], [1.0]])
    assert triplet_agreement(amb, lat, [[0, 1, 2]]) == 0.0
    assert triplet_agreement(amb, amb, [[0, 1, 2]]) == 1.0


def test_triplets_are_distinct_and_seeded():
    t = sample_triplets(5, 3000, 7)
    assert np.all(t[:, 0] != t[:, 1]) and np.all(t[:, 0] != t[:, 2]) and np.all(t[:, 1] != t[:, 2])
    assert np.array_equal(t, sample_triplets(5, 3000, 7))


def test_spearman_scaling_and_reversal():
    c = _cloud(4)
    assert spearman_corr(c, 3.5 * c.points, 2000, 0) == pytest.approx(1.0, abs=1e-12)
    assert rank_correlation([1.0, 2.0, 3.0, 4.0], [8.0, 6.0, 4.0, 2.0]) == pytest.approx(-1.0, abs=1e-12)


def test_spearman_hand_swap():
    # ranks (1,2,3,4) vs (1,2,4,3): rho = 1 - 6*2/(4*15) = 0.8
    assert rank_correlation([0.1, 0.2, 0.3, 0.4], [1.0, 2.0, 4.0, 3.0]) == pytest.approx(0.8, abs=1e-12)


def test_spearman_ties_use_average_ranks():
    # x ranks (1.5, 1.5, 3, 4); y ranks (1, 2, 3, 4)
    rx = np.array([1.5, 1.5, 3.0, 4.0]) - 2.5
    ry = np.array([1.0, 2.0, 3.0, 4.0]) - 2.5
    ref = np.sum(rx * ry) / np.sqrt(np.sum(rx**2) * np.sum(ry**2))
    assert rank_correlation([1.0, 1.0, 2.0, 3.0], [1.0, 2.0, 3.0, 4.0]) == pytest.approx(ref, abs=1e-12)


def test_spearman_zero_variance_warns():
    with pytest.warns(RuntimeWarning):
        assert rank_correlation([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000))
def test_spearman_invariant_under_increasing_maps(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=50), rng.normal(size=50)
    base = rank_correlation(x, y)
    assert rank_correlation(np.exp(x), y**3) == pytest.approx(base, abs=1e-12)


def test_knn_preservation_identity_and_full():
    c = _cloud(5, n=30)
    assert knn_preservation(c, c.points, 5) == 1.0
    z = np.random.default_rng(0).normal(size=(30, 2))
    assert knn_preservation(c, z, 29) == 1.0


def test_knn_preservation_line_swap():
    # line points 0,1,2,3 embedded with the middle two swapped
    amb = np.array([[0.0], [1.0], [2.0], [3.0]])
    lat = np.array([[0.0], [2.0], [1.0], [3.0]])
    # k=1 neighbors, ties to the lower index:
    # ambient: 0->1, 1->0, 2->1, 3->2;  latent: 0->2, 1->2, 2->0, 3->1
    assert knn_preservation(amb, lat, 1) == 0.0
    # k=2 ambient: 0:{1,2} 1:{0,2} 2:{1,3} 3:{2,1}; latent: 0:{2,1} 1:{2,3} 2:{0,1} 3:{1,2}
    assert knn_preservation(amb, lat, 2) == pytest.approx((2 + 1 + 1 + 2) / 8)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_rigid_invariance(seed):
    c = _cloud(seed, n=60)
    z = np.random.default_rng(seed + 1).normal(size=(60, 2))
    moved = z @ _rotation(seed, 2).T + np.array([3.0, -1.0])
    assert triplet_accuracy(c, moved, 1000, 0) == triplet_accuracy(c, z, 1000, 0)
    assert knn_preservation(c, moved, 5) == knn_preservation(c, z, 5)


def test_pca_exact_subspace():
    rng = np.random.default_rng(6)
    basis = np.linalg.qr(rng.normal(size=(5, 2)))[0].T
    x = rng.normal(size=(100, 2)) @ basis + rng.normal(size=5)
    p = pca_fit(x, 2)
    assert np.max(np.abs(p.reconstruct(p.project(x)) - x)) <= 1e-9


def test_pca_isotropic_variance_share():
    x = np.random.default_rng(7).normal(size=(20_000, 4))
    p = pca_fit(x, 2)
    total = np.var(x, axis=0, ddof=1).sum()
    assert p.variances.sum() / total == pytest.approx(0.5, abs=0.02)


def test_pca_line_direction_and_sign():
    t = np.linspace(-1, 1, 21)
    x = np.column_stack([t, t])
    p = pca_fit(x, 1)
    np.testing.assert_allclose(p.components[0], [1 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-12)
    z = pca_embed(x, 1)
    assert z.shape == (21, 1)


def test_pca_rejects_m_above_s():
    with pytest.raises(ValueError):
        pca_embed(_cloud(0), 4)


def test_report_json(tmp_path):
    c = _cloud(8, n=40)
    rep = evaluate(c, c.points[:, :2], None, 4, 500, 500, 1)
    assert isinstance(rep, EvalReport)
    assert 0 <= rep.triplet <= 1 and -1 <= rep.spearman <= 1 and 0 <= rep.knn_preservation <= 1
    rep.write_json(tmp_path / "r.json", {"k": 4})
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["config"] == {"k": 4} and d["n_triplets"] == 500 and d["distortion"] == rep.distortion
