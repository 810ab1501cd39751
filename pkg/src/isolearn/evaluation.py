"""Embedding scores: metric distortion, triplet order, rank correlation, kNN overlap.

All scores compare latent codes against the ambient points they came from,
row for row.  Sampled scores are deterministic in their seed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import _rng
from .datasets import PointCloud
from .geometry import all_pairs, knn_indices, metric_distances


def _arrays(ambient, latents):
    a = ambient.points if isinstance(ambient, PointCloud) else np.asarray(ambient, dtype=np.float64)
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if a.ndim == 1:
        a = a[:, None]
    if len(a) != len(z):
        raise ValueError(f"ambient has {len(a)} rows but latents have {len(z)}")
    return a, z


def distortion_score(ambient, latents, metrics=None, k: int = 8) -> float:
    """Mean squared gap between latent metric lengths and true ambient distances.

    Neighborhoods are the ``k`` nearest latent rows around every point; pairs
    run over the center and its members, and lengths use the metric at the
    center.  ``metrics`` is an ``(N, m, m)`` field or ``None`` for the
    Euclidean metric.
    """
    a, z = _arrays(ambient, latents)
    n, m = z.shape
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    nb = knn_indices(z, k)
    tpl = all_pairs(k + 1)
    pa, pb = nb[:, tpl[:, 0]].ravel(), nb[:, tpl[:, 1]].ravel()
    centers = np.repeat(np.arange(n), len(tpl))
    disp = z[pa] - z[pb]
    if metrics is None:
        lat = np.sqrt(np.sum(disp**2, axis=1) + 1e-12)
    else:
        g = np.asarray(metrics, dtype=np.float64)
        if g.shape != (n, m, m):
            raise ValueError(f"metric field must be ({n}, {m}, {m}), got {g.shape}")
        lat = metric_distances(g[centers], disp)
    amb = np.sqrt(np.sum((a[pa] - a[pb]) ** 2, axis=1))
    return float(np.mean((lat - amb) ** 2))


def sample_triplets(n: int, n_triplets: int, seed: int) -> np.ndarray:
    """``(n_triplets, 3)`` rows of distinct indices ``(anchor, j, k)``."""
    if n < 3:
        raise ValueError("triplets need at least 3 points")
    rng = _rng.make_rng(seed, _rng.EVAL, 1)
    i = rng.integers(0, n, n_triplets)
    a = rng.integers(1, n, n_triplets)
    b = rng.integers(1, n - 1, n_triplets)
    c = b + (b >= a)
    return np.column_stack([i, (i + a) % n, (i + c) % n])


def triplet_agreement(ambient, latents, triplets) -> float:
    """Fraction of triplets whose closer-neighbor ordering matches in both spaces."""
    a, z = _arrays(ambient, latents)
    t = np.asarray(triplets, dtype=np.intp).reshape(-1, 3)

    def order(x):
        d1 = np.linalg.norm(x[t[:, 0]] - x[t[:, 1]], axis=1)
        d2 = np.linalg.norm(x[t[:, 0]] - x[t[:, 2]], axis=1)
        return np.sign(d1 - d2)

    return float(np.mean(order(a) == order(z)))


def triplet_accuracy(ambient, latents, n_triplets: int = 10_000, seed: int = 0) -> float:
    a, z = _arrays(ambient, latents)
    return triplet_agreement(a, z, sample_triplets(len(a), n_triplets, seed))


def rank_correlation(x, y) -> float:
    """Spearman correlation with average ranks for ties."""
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if den == 0.0:
        warnings.warn("constant distances give undefined rank correlation; reporting 0", RuntimeWarning)
        return 0.0
    return float(np.clip(np.sum(rx * ry) / den, -1.0, 1.0))


def sample_pairs(n: int, n_pairs: int, seed: int) -> np.ndarray:
    if n < 2:
        raise ValueError("pairs need at least 2 points")
    rng = _rng.make_rng(seed, _rng.EVAL, 2)
    i = rng.integers(0, n, n_pairs)
    j = (i + rng.integers(1, n, n_pairs)) % n
    return np.column_stack([i, j])


def spearman_corr(ambient, latents, n_pairs: int = 10_000, seed: int = 0) -> float:
    a, z = _arrays(ambient, latents)
    p = sample_pairs(len(a), n_pairs, seed)
    da = np.linalg.norm(a[p[:, 0]] - a[p[:, 1]], axis=1)
    dz = np.linalg.norm(z[p[:, 0]] - z[p[:, 1]], axis=1)
    return rank_correlation(da, dz)


def knn_preservation(ambient, latents, k: int = 8) -> float:
    """Mean fraction of each point's ambient kNN that are also its latent kNN."""
    a, z = _arrays(ambient, latents)
    n = len(a)
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    na = knn_indices(a, k)[:, 1:]
    nz = knn_indices(z, k)[:, 1:]
    # row offsets make the sets disjoint across points so one intersect suffices
    off = (np.arange(n) * n)[:, None]
    hits = np.isin(na + off, nz + off)
    return float(hits.sum() / (n * k))


@dataclass(frozen=True)
class Pca:
    mean: np.ndarray
    components: np.ndarray  # (m, s), rows are principal directions
    variances: np.ndarray

    def project(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T

    def reconstruct(self, z):
        return np.asarray(z, dtype=np.float64) @ self.components + self.mean


def pca_fit(cloud, m: int) -> Pca:
    x = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    s = x.shape[1]
    if not 1 <= m <= s:
        raise ValueError(f"m must be in [1, {s}], got {m}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:m]
    comps = vecs[:, order].T.copy()
    # sign convention: each direction's largest-magnitude entry is positive
    lead = comps[np.arange(m), np.argmax(np.abs(comps), axis=1)]
    comps *= np.where(lead < 0, -1.0, 1.0)[:, None]
    return Pca(mean, comps, vals[order])


def pca_embed(cloud, m: int) -> np.ndarray:
    p = pca_fit(cloud, m)
    x = cloud.points if isinstance(cloud, PointCloud) else cloud
    return p.project(x)


@dataclass(frozen=True)
class EvalReport:
    distortion: float
    triplet: float
    spearman: float
    knn_preservation: float
    k: int
    n_triplets: int
    n_pairs: int
    seed: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path, config=None) -> None:
        d = self.to_dict()
        if config is not None:
            d["config"] = config
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def evaluate(ambient, latents, metrics=None, k=8, n_triplets=10_000, n_pairs=10_000, seed=0) -> EvalReport:
    return EvalReport(
        distortion=distortion_score(ambient, latents, metrics, k),
        triplet=triplet_accuracy(ambient, latents, n_triplets, seed),
        spearman=spearman_corr(ambient, latents, n_pairs, seed),
        knn_preservation=knn_preservation(ambient, latents, k),
        k=k,
        n_triplets=n_triplets,
        n_pairs=n_pairs,
        seed=seed,
    )
