import numpy as np
import pytest

from isolearn.datasets import (
    PointCloud,
    PointFileError,
    gen_sphere,
    gen_swiss_roll,
    load_xyz,
    normalize,
    save_xyz,
    split,
)


def test_swiss_roll_construction_identity():
    c = gen_swiss_roll(1000, 0)
    assert c.points.shape == (1000, 3)
    t = np.hypot(c.points[:, 0], c.points[:, 2])
    assert np.all(t >= 1.5 * np.pi - 1e-12) and np.all(t <= 4.5 * np.pi + 1e-12)
    assert np.all((c.points[:, 1] >= 0) & (c.points[:, 1] <= 21))
    # the angle of (x, z) equals t modulo 2 pi
    ang = np.arctan2(c.points[:, 2], c.points[:, 0])
    np.testing.assert_allclose(np.cos(ang - t), 1.0, atol=1e-9)


def test_swiss_roll_deterministic():
    assert np.array_equal(gen_swiss_roll(50, 3).points, gen_swiss_roll(50, 3).points)
    assert not np.array_equal(gen_swiss_roll(50, 3).points, gen_swiss_roll(50, 4).points)


def test_sphere_on_radius():
    c = gen_sphere(500, 2.5, 1)
    np.testing.assert_allclose(np.linalg.norm(c.points, axis=1), 2.5, rtol=0, atol=1e-12)


def test_sphere_mean_near_zero():
    c = gen_sphere(100_000, 1.0, 0)
    assert np.all(np.abs(c.points.mean(axis=0)) < 0.02)


def test_generators_reject_bad_args():
    with pytest.raises(ValueError):
        gen_swiss_roll(0, 0)
    with pytest.raises(ValueError):
        gen_sphere(10, 0.0, 0)


def test_cloud_rejects_nonfinite():
    with pytest.raises(ValueError):
        PointCloud(np.array([[1.0, np.inf]]))


def test_load_whitespace(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("1 2 3\n4 5 6")
    c = load_xyz(p)
    np.testing.assert_array_equal(c.points, [[1, 2, 3], [4, 5, 6]])
    assert c.provenance == str(p)


def test_load_commas(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("1,2,3\n")
    assert load_xyz(p).points.shape == (1, 3)


def test_load_inconsistent_columns(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("1 2\n1 2 3\n")
    with pytest.raises(PointFileError, match="line 2"):
        load_xyz(p)


def test_load_bad_token(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("1 2 3\n\n4 x 6\n")
    with pytest.raises(PointFileError, match="line 3, column 2"):
        load_xyz(p)


def test_save_load_round_trip(tmp_path):
    c = gen_swiss_roll(20, 1)
    save_xyz(c, tmp_path / "c.xyz")
    assert np.array_equal(load_xyz(tmp_path / "c.xyz").points, c.points)


def test_normalize_max_entry_and_inverse():
    c = gen_swiss_roll(300, 2)
    n, tr = normalize(c)
    assert np.max(np.abs(n.points)) == 1.0
    np.testing.assert_allclose(tr.inverse(n.points), c.points, rtol=0, atol=1e-12)


def test_normalize_preserves_distance_ratios():
    c = gen_swiss_roll(300, 2)
    n, _ = normalize(c)
    rng = np.random.default_rng(0)
    i, j, k, l = (rng.integers(0, 300, 200) for _ in range(4))
    keep = (i != j) & (k != l)
    d = lambda x, a, b: np.linalg.norm(x[a] - x[b], axis=1)
    r0 = d(c.points, i, j)[keep] / d(c.points, k, l)[keep]
    r1 = d(n.points, i, j)[keep] / d(n.points, k, l)[keep]
    np.testing.assert_allclose(r1, r0, rtol=1e-12)


def test_normalize_identical_points():
    with pytest.raises(ValueError):
        normalize(PointCloud(np.ones((4, 3))))


def test_split_properties():
    c = gen_swiss_roll(101, 0)
    tr, ho = split(c, 0.0, 1)
    assert len(ho) == 0 and len(tr) == 101
    tr, ho = split(c, 0.3, 1)
    assert len(tr) + len(ho) == 101
    rows = {tuple(r) for r in tr.points} | {tuple(r) for r in ho.points}
    assert len(rows) == 101
    tr2, ho2 = split(c, 0.3, 1)
    assert np.array_equal(tr.points, tr2.points) and np.array_equal(ho.points, ho2.points)
    with pytest.raises(ValueError):
        split(c, 1.0, 1)
