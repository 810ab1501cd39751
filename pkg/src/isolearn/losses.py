"""Geometric losses and the two composite objectives, as tape nodes."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.1
    epsilon: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be a finite value >= 0, got {v}")


@dataclass(frozen=True)
class LossReport:
    l_re: float
    l_tm: float
    l_is: float
    l_du: float
    l_immersion: float
    l_isometry: float

    @classmethod
    def from_parts(cls, l_re, l_tm, l_is, l_du, w: LossWeights) -> "LossReport":
        return cls(
            float(l_re),
            float(l_tm),
            float(l_is),
            float(l_du),
            w.alpha * float(l_re) + w.beta * float(l_tm) + w.gamma * float(l_du),
            w.epsilon * float(l_is) + w.gamma * float(l_du),
        )


def _same_shape(a: ad.Node, b: ad.Node, what):
    if a.shape != b.shape:
        raise ad.ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def loss_re(tape: ad.Tape, x, x_rec) -> ad.Node:
    """Mean squared reconstruction error over batch and coordinates."""
    x, x_rec = tape._as_node(x), tape._as_node(x_rec)
    _same_shape(x, x_rec, "loss_re")
    return tape.mean(tape.square(x - x_rec), name="l_re")


def dedupe_pairs(pairs):
    """Unique unordered pairs and their multiplicities."""
    pairs = np.sort(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=1)
    if len(pairs) == 0:
        return pairs.astype(np.intp), np.zeros(0)
    base = int(pairs.max()) + 1
    keys, counts = np.unique(pairs[:, 0] * base + pairs[:, 1], return_counts=True)
    uniq = np.column_stack([keys // base, keys % base]).astype(np.intp)
    return uniq, counts.astype(np.float64)


def loss_tm(tape: ad.Tape, decoded, pairs, counts=None) -> ad.Node:
    """Mean smoothed distance between decoded neighborhood pairs.

    ``decoded`` is an ``(n, s)`` node of decoded neighborhood points and
    ``pairs`` an ``(P, 2)`` integer array of row indices into it.  Optional
    ``counts`` weight each pair (see :func:`dedupe_pairs`); the mean is then
    taken over the total weight.
    """
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    if len(pairs) == 0:
        raise ValueError("loss_tm needs at least one pair")
    decoded = tape._as_node(decoded)
    diff = tape.take(decoded, pairs[:, 0]) - tape.take(decoded, pairs[:, 1])
    dist = tape.norm(diff, axis=1)
    if counts is None:
        return tape.mean(dist, name="l_tm")
    counts = np.asarray(counts, dtype=np.float64)
    return tape.scale(tape.sum(dist * counts), 1.0 / counts.sum(), name="l_tm")


def metric_distance_node(tape: ad.Tape, jac_cols, pair_center, disp) -> ad.Node:
    """Smoothed pullback-metric lengths ``sqrt(d^T G d + 1e-12)`` per pair.

    ``jac_cols`` are the ``m`` Jacobian-column nodes of the soft-dual map at
    the ``C`` centers (each ``(C, s)``, from :func:`jacobian_column_nodes`);
    ``G = J^T J`` is assembled from them entrywise.  ``pair_center`` maps each
    of the ``P`` pairs to its center row and ``disp`` holds the ``(P, m)``
    latent displacements.
    """
    disp = np.asarray(disp, dtype=np.float64)
    pair_center = np.asarray(pair_center, dtype=np.intp)
    m = len(jac_cols)
    if disp.shape != (len(pair_center), m):
        raise ad.ShapeError(f"displacements must be ({len(pair_center)}, {m}), got {disp.shape}")
    q = None
    for i in range(m):
        for j in range(i, m):
            g_ij = tape.sum(jac_cols[i] * jac_cols[j], axis=1)
            coef = disp[:, i] * disp[:, j] * (1.0 if i == j else 2.0)
            term = tape.take(g_ij, pair_center) * coef
            q = term if q is None else q + term
    return tape.sqrt(q, eps=ad.SMOOTH_EPS, name="metric_dist")


def loss_is(tape: ad.Tape, metric_dist, decoded_dist) -> ad.Node:
    """Mean squared gap between metric lengths and decoded distances."""
    metric_dist, decoded_dist = tape._as_node(metric_dist), tape._as_node(decoded_dist)
    _same_shape(metric_dist, decoded_dist, "loss_is")
    return tape.mean(tape.square(metric_dist - decoded_dist), name="l_is")


def loss_dual(tape: ad.Tape, out_d, out_phi) -> ad.Node:
    """Mean smoothed row norm of ``out_d - out_phi``."""
    out_d, out_phi = tape._as_node(out_d), tape._as_node(out_phi)
    _same_shape(out_d, out_phi, "loss_dual")
    return tape.mean(tape.norm(out_d - out_phi, axis=1), name="l_du")


def loss_immersion(tape: ad.Tape, l_re, l_tm, l_du, w: LossWeights) -> ad.Node:
    return tape.add(
        tape.add(tape.scale(l_re, w.alpha), tape.scale(l_tm, w.beta)),
        tape.scale(l_du, w.gamma),
        name="l_immersion",
    )


def loss_isometry(tape: ad.Tape, l_is, l_du, w: LossWeights) -> ad.Node:
    return tape.add(tape.scale(l_is, w.epsilon), tape.scale(l_du, w.gamma), name="l_isometry")


# ---------------------------------------------------------------------------

LOG_FIELDS = ("iteration", "l_re", "l_tm", "l_is", "l_du", "l_immersion", "l_isometry")


def write_training_log(path, history) -> None:
    """CSV of per-iteration loss reports; floats written with full precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for i, rep in enumerate(history):
            d = asdict(rep)
            w.writerow([i] + [repr(d[k]) for k in LOG_FIELDS[1:]])


def read_training_log(path) -> list[LossReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossReport(**{k: float(r[k]) for k in LOG_FIELDS[1:]}) for r in rows]
