"""Synthetic surfaces, point-file ingestion, normalization and splitting."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._rng import DATA, make_rng


class PointFileError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise ValueError(f"points must be an (N, s) array, got shape {pts.shape}")
        # zero rows are allowed so an empty holdout split stays a PointCloud
        if pts.shape[1] < 1:
            raise ValueError("points need at least one coordinate")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite values")
        self.points = pts

    def __len__(self):
        return len(self.points)

    @property
    def dim(self):
        return self.points.shape[1]


@dataclass(frozen=True)
class Transform:
    """Affine map recorded by :func:`normalize`: ``normalized = (x - center) / scale``."""

    center: np.ndarray
    scale: float

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.center) / self.scale

    def inverse(self, y):
        return np.asarray(y, dtype=np.float64) * self.scale + self.center

    def to_dict(self):
        return {"center": self.center.tolist(), "scale": self.scale}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["center"], dtype=np.float64), float(d["scale"]))


def gen_swiss_roll(n: int, seed: int) -> PointCloud:
    """``(t cos t, y, t sin t)`` with ``t ~ U[1.5pi, 4.5pi]``, ``y ~ U[0, 21]``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed, DATA)
    t = rng.uniform(1.5 * np.pi, 4.5 * np.pi, size=n)
    y = rng.uniform(0.0, 21.0, size=n)
    pts = np.column_stack([t * np.cos(t), y, t * np.sin(t)])
    return PointCloud(pts, f"swiss_roll(n={n}, seed={seed})")


def gen_sphere(n: int, radius: float, seed: int) -> PointCloud:
    if n < 1:
        raise ValueError("n must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be positive")
    rng = make_rng(seed, DATA)
    g = rng.standard_normal((n, 3))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return PointCloud(radius * g, f"sphere(n={n}, radius={radius}, seed={seed})")


_SEP = re.compile(r"[,\s]+")


def load_xyz(path) -> PointCloud:
    """One point per nonempty line, values separated by whitespace or commas."""
    rows = []
    ncol = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            tokens = [t for t in _SEP.split(text) if t]
            row = []
            for col, tok in enumerate(tokens, start=1):
                try:
                    row.append(float(tok))
                except ValueError:
                    raise PointFileError(f"{path}: line {lineno}, column {col}: cannot parse {tok!r}") from None
            if ncol is None:
                ncol = len(row)
            elif len(row) != ncol:
                raise PointFileError(
                    f"{path}: line {lineno}: expected {ncol} columns, found {len(row)}"
                )
            rows.append(row)
    if not rows:
        raise PointFileError(f"{path}: no points")
    try:
        return PointCloud(np.array(rows), str(path))
    except ValueError as exc:
        raise PointFileError(f"{path}: {exc}") from None


def save_xyz(cloud: PointCloud, path) -> None:
    lines = (" ".join(repr(float(v)) for v in row) for row in cloud.points)
    Path(path).write_text("\n".join(lines) + "\n")


def normalize(cloud: PointCloud) -> tuple[PointCloud, Transform]:
    """Center on the mean and divide by the largest absolute centered coordinate.

    The scaling is isotropic so distance ratios are untouched.
    """
    center = cloud.points.mean(axis=0)
    centered = cloud.points - center
    scale = float(np.max(np.abs(centered)))
    if scale == 0.0:
        raise ValueError("cannot normalize a cloud whose points are all identical")
    return PointCloud(centered / scale, f"normalized({cloud.provenance})"), Transform(center, scale)


def split(cloud: PointCloud, holdout_fraction: float, seed: int) -> tuple[PointCloud, PointCloud]:
    """Seeded shuffle, then the last ``round(N * fraction)`` points become holdout.

    Both parts keep the original row order.  With ``fraction == 0`` the
    holdout has zero rows.
    """
    train_idx, hold_idx = split_indices(len(cloud), holdout_fraction, seed)
    train = PointCloud(cloud.points[train_idx], f"train({cloud.provenance})")
    hold = PointCloud(cloud.points[hold_idx], f"holdout({cloud.provenance})")
    return train, hold


def split_indices(n: int, holdout_fraction: float, seed: int):
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError(f"holdout_fraction must be in [0, 1), got {holdout_fraction}")
    perm = make_rng(seed, DATA, 1).permutation(n)
    n_hold = int(round(n * holdout_fraction))
    n_hold = min(n_hold, n - 1)
    return np.sort(perm[: n - n_hold]), np.sort(perm[n - n_hold :])
