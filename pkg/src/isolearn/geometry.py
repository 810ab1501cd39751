"""Latent neighborhoods, pullback metrics and local metric distances."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .autodiff import SMOOTH_EPS
from .network import MlpParams, mlp_forward, mlp_jacobian, mlp_jacobians

SYMMETRY_TOL = 1e-12


@dataclass
class NeighborhoodSample:
    """A center latent, its ``k`` sampled members, and the pairs to compare.

    ``points`` stacks the center (row 0) and the members.  ``indices`` holds
    the batch rows the points came from, or ``None`` for ball samples that
    are not data latents.  ``pairs`` index into ``points``.
    """

    points: np.ndarray
    pairs: np.ndarray
    indices: np.ndarray | None = None

    @property
    def center(self):
        return self.points[0]

    @property
    def members(self):
        return self.points[1:]

    @property
    def k(self):
        return len(self.points) - 1


def all_pairs(n):
    """All unordered index pairs over ``range(n)``, shape ``(n(n-1)/2, 2)``."""
    return np.array(list(combinations(range(n), 2)), dtype=np.intp).reshape(-1, 2)


def knn_indices(latents, k, chunk=1024) -> np.ndarray:
    """Rows ``[center, k nearest others]`` for every latent, shape ``(B, k+1)``.

    Brute-force Euclidean search; ties go to the lower row index.  Candidates
    come from the expanded ``|a|^2 + |b|^2 - 2ab`` form and are re-ranked on
    exact squared differences.
    """
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    n = len(z)
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < batch size ({n}), got {k}")
    c = min(k + 4, n - 1)
    sq = np.sum(z * z, axis=1)
    out = np.empty((n, k + 1), dtype=np.intp)
    out[:, 0] = np.arange(n)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        approx = sq[rows, None] + sq[None, :] - 2.0 * (z[rows] @ z.T)
        approx[np.arange(len(rows)), rows] = np.inf
        cand = np.argpartition(approx, c - 1, axis=1)[:, :c] if c < n - 1 else np.argsort(approx, axis=1)[:, :c]
        cand.sort(axis=1)
        exact = np.sum((z[cand] - z[rows, None, :]) ** 2, axis=2)
        order = np.argsort(exact, axis=1, kind="stable")
        cand = np.take_along_axis(cand, order, axis=1)
        exact = np.take_along_axis(exact, order, axis=1)
        out[rows, 1:] = cand[:, :k]
        # a row is only safe when some candidate beyond the k-th is strictly farther
        unsafe = np.flatnonzero(exact[:, -1] <= exact[:, k - 1] * (1 + 1e-9)) if c > k else np.arange(0)
        for r in unsafe:
            d2 = np.sum((z - z[rows[r]]) ** 2, axis=1)
            d2[rows[r]] = np.inf
            out[rows[r], 1:] = np.argsort(d2, kind="stable")[:k]
    return out


def knn_neighborhood(latents, center_index: int, k: int) -> NeighborhoodSample:
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    n = len(z)
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < batch size ({n}), got {k}")
    d2 = np.sum((z - z[center_index]) ** 2, axis=1)
    others = np.delete(np.arange(n), center_index)
    order = np.lexsort((others, d2[others]))
    idx = np.concatenate([[center_index], others[order[:k]]]).astype(np.intp)
    return NeighborhoodSample(z[idx], all_pairs(k + 1), idx)


def ball_neighborhood(latents, center_index: int, k: int, radius: float, rng) -> NeighborhoodSample:
    """``k`` points drawn uniformly from the latent ball of ``radius`` around a center."""
    z = np.asarray(latents, dtype=np.float64)
    c = z[center_index]
    pts = c + ball_offsets(rng, 1, k, z.shape[1], radius)[0]
    return NeighborhoodSample(np.vstack([c, pts]), all_pairs(k + 1), None)


def ball_offsets(rng, n_centers, k, m, radius) -> np.ndarray:
    """Uniform samples in an ``m``-ball, shape ``(n_centers, k, m)``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    g = rng.standard_normal((n_centers, k, m))
    g /= np.linalg.norm(g, axis=2, keepdims=True)
    r = radius * rng.uniform(size=(n_centers, k, 1)) ** (1.0 / m)
    return g * r


# ---------------------------------------------------------------------------


@dataclass
class MetricTensor:
    center: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.float64)
        self.g = 0.5 * (g + g.T)
        self.center = np.asarray(self.center, dtype=np.float64)


def metric_from_jacobian(jac, center) -> MetricTensor:
    """Pullback of the Euclidean metric through a map with Jacobian ``jac``."""
    jac = np.asarray(jac, dtype=np.float64)
    if not np.all(np.isfinite(jac)):
        raise FloatingPointError("non-finite Jacobian")
    return MetricTensor(np.asarray(center, dtype=np.float64).reshape(-1), jac.T @ jac)


def pullback_metric(phi: MlpParams, z) -> MetricTensor:
    """``J^T J`` of the soft-dual map at latent ``z``, symmetrized."""
    return metric_from_jacobian(mlp_jacobian(phi, z), z)


def pullback_metrics(phi: MlpParams, z) -> np.ndarray:
    """Batched metric field, shape ``(B, m, m)``."""
    jac = mlp_jacobians(phi, z)
    if not np.all(np.isfinite(jac)):
        raise FloatingPointError("non-finite Jacobian")
    g = np.matmul(np.swapaxes(jac, 1, 2), jac)
    return 0.5 * (g + np.swapaxes(g, 1, 2))


def metric_distance(g, p, q) -> float:
    """Smoothed local distance ``sqrt((p-q)^T G (p-q) + 1e-12)``."""
    g = g.g if isinstance(g, MetricTensor) else np.asarray(g, dtype=np.float64)
    d = np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    return float(np.sqrt(max(d @ g @ d, 0.0) + SMOOTH_EPS))


def metric_distances(g, d) -> np.ndarray:
    """Vectorized :func:`metric_distance` for ``g`` ``(P, m, m)`` and displacements ``(P, m)``."""
    q = np.sum(d * np.matmul(g, d[:, :, None])[:, :, 0], axis=1)
    return np.sqrt(np.maximum(q, 0.0) + SMOOTH_EPS)


# ---------------------------------------------------------------------------


def jacobi_eigvalsh(a, tol=1e-12, max_sweeps=100) -> np.ndarray:
    """Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.

    Sweeps stop once the off-diagonal Frobenius mass drops below
    ``tol * max(1, ||A||_F)``.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    a = 0.5 * (a + a.T)
    scale = max(1.0, np.linalg.norm(a))
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off < tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta  # theta^2 would overflow
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                a[p, q] = a[q, p] = 0.0
    return np.sort(np.diag(a))


@dataclass
class LegitimacyReport:
    symmetric: bool
    min_eig: float
    legal: bool


def check_metric_legitimacy(g, tol=1e-9) -> LegitimacyReport:
    """A metric is legal when symmetric and its smallest eigenvalue exceeds ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    g = g.g if isinstance(g, MetricTensor) else np.asarray(g, dtype=np.float64)
    symmetric = bool(np.max(np.abs(g - g.T)) <= SYMMETRY_TOL)
    min_eig = float(jacobi_eigvalsh(g)[0])
    return LegitimacyReport(symmetric, min_eig, symmetric and min_eig > tol)


def first_order_residual(f, jac, center, nb) -> float:
    """``|f(nb) - f(center) - J(center)(nb - center)|`` for a map ``f`` with Jacobian ``jac``."""
    center = np.asarray(center, dtype=np.float64).reshape(-1)
    nb = np.asarray(nb, dtype=np.float64).reshape(-1)
    linear = np.atleast_1d(f(center)) + np.atleast_2d(jac(center)) @ (nb - center)
    return float(np.linalg.norm(np.atleast_1d(f(nb)) - linear))


def taylor_remainder(dec: MlpParams, center, nb) -> float:
    """Norm of the first-order Taylor residual of the decoder at ``center``."""
    return first_order_residual(lambda z: mlp_forward(dec, z), lambda z: mlp_jacobian(dec, z), center, nb)


def taylor_remainders(dec: MlpParams, centers, nbs) -> np.ndarray:
    centers = np.asarray(centers, dtype=np.float64)
    nbs = np.asarray(nbs, dtype=np.float64)
    jac = mlp_jacobians(dec, centers)
    linear = mlp_forward(dec, centers) + np.einsum("bsm,bm->bs", jac, nbs - centers)
    return np.linalg.norm(mlp_forward(dec, nbs) - linear, axis=1)


# ---------------------------------------------------------------------------


def write_metric_field(path, latents, metrics) -> None:
    """CSV with one row per latent: index, coordinates, row-major ``g``, min eigenvalue."""
    latents = np.asarray(latents, dtype=np.float64)
    metrics = np.asarray(metrics, dtype=np.float64)
    n, m = latents.shape
    header = ["index"] + [f"z{i}" for i in range(m)]
    header += [f"g{i}{j}" for i in range(m) for j in range(m)] + ["min_eig"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(n):
            row = [i] + [repr(float(v)) for v in latents[i]]
            row += [repr(float(v)) for v in metrics[i].reshape(-1)]
            row.append(repr(float(jacobi_eigvalsh(metrics[i])[0])))
            w.writerow(row)


def read_metric_field(path):
    """Inverse of :func:`write_metric_field`: ``(latents, metrics, min_eigs)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    m = sum(1 for h in header if h.startswith("z"))
    data = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), -1)
    return data[:, :m], data[:, m : m + m * m].reshape(-1, m, m), data[:, -1]
