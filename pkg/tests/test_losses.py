import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from isolearn import autodiff as ad
from isolearn.geometry import all_pairs
from isolearn.losses import (
    LossReport,
    LossWeights,
    dedupe_pairs,
    loss_dual,
    loss_immersion,
    loss_is,
    loss_isometry,
    loss_re,
    loss_tm,
    metric_distance_node,
    read_training_log,
    write_training_log,
)
from isolearn.network import MlpParams, MlpSpec, jacobian_column_nodes, mlp_forward, param_leaves


def _val(node):
    return float(node.value)


# -- reconstruction ----------------------------------------------------------


def test_re_perfect():
    t = ad.Tape()
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert _val(loss_re(t, x, x.copy())) == 0.0


def test_re_hand_value():
    t = ad.Tape()
    assert _val(loss_re(t, [[1.0, 2.0]], [[0.0, 0.0]])) == 2.5


def test_re_mean_invariance():
    t = ad.Tape()
    one = loss_re(t, [[1.0, 2.0]], [[0.0, 0.0]])
    two = loss_re(t, [[1.0, 2.0], [1.0, 2.0]], [[0.0, 0.0], [0.0, 0.0]])
    assert _val(one) == _val(two)


def test_re_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        loss_re(ad.Tape(), np.zeros((2, 3)), np.zeros((3, 2)))


# -- tangent term ------------------------------------------------------------


def test_tm_collapsed():
    t = ad.Tape()
    assert _val(loss_tm(t, np.ones((4, 3)), all_pairs(4))) <= 1e-6


def test_tm_unit_pair():
    t = ad.Tape()
    assert _val(loss_tm(t, [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], [[0, 1]])) == pytest.approx(1.0, abs=1e-12)


def test_tm_mean_of_distances():
    t = ad.Tape()
    pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 3.0, 0.0]]
    assert _val(loss_tm(t, pts, [[0, 1], [0, 2]])) == pytest.approx(2.0, abs=1e-12)


def test_tm_empty_pairs():
    with pytest.raises(ValueError):
        loss_tm(ad.Tape(), np.zeros((2, 3)), np.zeros((0, 2), dtype=int))


def test_dedupe_counts_and_weighted_mean():
    pairs = np.array([[0, 1], [1, 0], [2, 3], [0, 1], [3, 2], [1, 2]])
    uniq, counts = dedupe_pairs(pairs)
    np.testing.assert_array_equal(uniq, [[0, 1], [1, 2], [2, 3]])
    np.testing.assert_array_equal(counts, [3.0, 1.0, 2.0])
    pts = np.random.default_rng(1).normal(size=(4, 3))
    t = ad.Tape()
    assert _val(loss_tm(t, pts, uniq, counts)) == pytest.approx(_val(loss_tm(t, pts, pairs)), rel=1e-14)


# -- isometry term -----------------------------------------------------------


def test_is_hand_value():
    t = ad.Tape()
    assert _val(loss_is(t, [1.0], [2.0])) == 1.0


def test_is_affine_dual_equal_decoder_is_zero():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=3)
    dec = MlpParams(MlpSpec((2, 3), "identity"), [a], [b])
    z = rng.normal(size=(5, 2))
    nb = rng.normal(size=(5, 4, 2)) * 0.1 + z[:, None, :]
    pts = np.concatenate([z[:, None, :], nb], axis=1)  # center first
    tpl = all_pairs(5)
    disp = (pts[:, tpl[:, 0]] - pts[:, tpl[:, 1]]).reshape(-1, 2)
    centers = np.repeat(np.arange(5), len(tpl))
    dec_pts = mlp_forward(dec, pts.reshape(-1, 2)).reshape(5, 5, 3)
    dec_dist = np.linalg.norm(dec_pts[:, tpl[:, 0]] - dec_pts[:, tpl[:, 1]], axis=2).ravel()

    t = ad.Tape()
    _, cols = jacobian_column_nodes(t, dec.spec, param_leaves(t, dec), z)
    metric = metric_distance_node(t, cols, centers, disp)
    assert _val(loss_is(t, metric, np.sqrt(dec_dist**2 + 1e-12))) <= 1e-9


def test_is_zero_displacements():
    t = ad.Tape()
    cols = [t.const(np.array([[1.0, 0.0, 0.0]])), t.const(np.array([[0.0, 2.0, 0.0]]))]
    metric = metric_distance_node(t, cols, np.zeros(3, dtype=int), np.zeros((3, 2)))
    assert _val(loss_is(t, metric, np.zeros(3))) <= 1e-11


def test_metric_distance_node_matches_quadratic_form():
    rng = np.random.default_rng(3)
    j = rng.normal(size=(4, 3, 2))
    centers = np.array([0, 1, 1, 3, 2, 0])
    d = rng.normal(size=(6, 2))
    t = ad.Tape()
    cols = [t.const(j[:, :, i]) for i in range(2)]
    got = metric_distance_node(t, cols, centers, d).value
    g = np.swapaxes(j, 1, 2) @ j
    ref = [np.sqrt(d[p] @ g[c] @ d[p] + 1e-12) for p, c in enumerate(centers)]
    np.testing.assert_allclose(got, ref, rtol=1e-13)


# -- dual term ---------------------------------------------------------------


def test_dual_equal():
    t = ad.Tape()
    x = np.random.default_rng(4).normal(size=(3, 3))
    assert _val(loss_dual(t, x, x.copy())) <= 1e-6


def test_dual_single_row():
    t = ad.Tape()
    assert _val(loss_dual(t, [[3.0, 4.0, 0.0]], [[0.0, 0.0, 0.0]])) == pytest.approx(5.0, abs=1e-12)


def test_dual_batch_mean():
    t = ad.Tape()
    assert _val(loss_dual(t, [[1.0, 0.0], [0.0, 3.0]], [[0.0, 0.0], [0.0, 0.0]])) == pytest.approx(2.0, abs=1e-12)


def test_dual_symmetric():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    t = ad.Tape()
    assert _val(loss_dual(t, a, b)) == _val(loss_dual(t, b, a))


# -- composites --------------------------------------------------------------


def test_immersion_weighted_sums():
    t = ad.Tape()
    assert _val(loss_immersion(t, 0.0, 0.0, 0.0, LossWeights())) == 0.0
    assert _val(loss_immersion(t, 1.0, 2.0, 3.0, LossWeights(1, 1, 1, 1))) == 6.0
    assert _val(loss_immersion(t, 1.0, 5.0, 3.0, LossWeights(2, 0, 1, 1))) == 5.0


def test_isometry_weighted_sums():
    t = ad.Tape()
    assert _val(loss_isometry(t, 0.0, 0.0, LossWeights())) == 0.0
    assert _val(loss_isometry(t, 2.0, 1.0, LossWeights(1, 1, 1, 1))) == 3.0
    assert _val(loss_isometry(t, 2.0, 1.0, LossWeights(1, 1, 0, 0.5))) == 1.0


def test_weights_validation():
    with pytest.raises(ValueError, match="gamma"):
        LossWeights(gamma=-1.0)


def test_report_composites():
    w = LossWeights(0.5, 0.2, 0.3, 2.0)
    r = LossReport.from_parts(0.1, 0.4, 0.05, 0.7, w)
    assert abs(r.l_immersion - (0.5 * 0.1 + 0.2 * 0.4 + 0.3 * 0.7)) <= 1e-12
    assert abs(r.l_isometry - (2.0 * 0.05 + 0.3 * 0.7)) <= 1e-12


finite = st.floats(-100, 100)


@settings(max_examples=100, deadline=None)
@given(a=arrays(np.float64, (3, 2), elements=finite), b=arrays(np.float64, (3, 2), elements=finite))
def test_losses_nonnegative(a, b):
    t = ad.Tape()
    assert _val(loss_re(t, a, b)) >= 0
    assert _val(loss_tm(t, a, all_pairs(3))) >= 0
    assert _val(loss_dual(t, a, b)) >= 0
    assert _val(loss_is(t, a[:, 0], b[:, 0])) >= 0


# -- log ---------------------------------------------------------------------


def test_training_log_round_trip(tmp_path):
    w = LossWeights()
    hist = [LossReport.from_parts(0.1 / (i + 1), 0.3, 1e-7 * i, 0.01, w) for i in range(5)]
    path = tmp_path / "log.csv"
    write_training_log(path, hist)
    assert path.read_text().splitlines()[0] == "iteration,l_re,l_tm,l_is,l_du,l_immersion,l_isometry"
    assert read_training_log(path) == hist
