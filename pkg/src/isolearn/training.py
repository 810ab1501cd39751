"""ADAM and the alternating immersion / isometry training loop.

Each outer iteration encodes a mini-batch, samples a neighborhood around every
latent code, then

* E-step: ADAM on the encoder and decoder (theta) against the immersion
  objective with the soft-dual map (omega) frozen;
* M-step: ADAM on omega against the isometry objective with theta frozen.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import _rng
from . import autodiff as ad
from .datasets import PointCloud
from .geometry import all_pairs, ball_offsets, knn_indices, metric_distances, pullback_metrics
from .losses import (
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
)
from .network import (
    MlpParams,
    MlpSpec,
    init_mlp,
    jacobian_column_nodes,
    mlp_forward,
    mlp_forward_node,
    param_leaves,
)

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    """Raised when a loss explodes; ``last_good`` holds the state before the bad iteration."""

    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


# ---------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected ADAM update.  Inputs are left untouched."""
    if set(params) != set(grads):
        raise ValueError("gradients do not match parameters")
    t = state.t + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"non-finite gradient for {k}")
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_p[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, replace(state, t=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# configuration and state


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.1
    epsilon: float = 1.0
    k: int = 8
    sampler: str = "knn"
    ball_radius: float = 0.05
    outer_iters: int = 2000
    inner_imm_iters: int = 5
    inner_iso_iters: int = 5
    batch_size: int | None = None
    lr_theta: float = 1e-3
    lr_omega: float = 1e-3
    seed: int = 0
    latent_dim: int = 2
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        self.weights  # validates the loss weights
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.sampler not in ("knn", "ball"):
            raise ValueError(f"sampler must be 'knn' or 'ball', got {self.sampler!r}")
        if self.ball_radius <= 0:
            raise ValueError("ball_radius must be positive")
        if self.outer_iters < 0:
            raise ValueError("outer_iters must be >= 0")
        for key in ("inner_imm_iters", "inner_iso_iters"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1")
        if self.batch_size is not None and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        for key in ("lr_theta", "lr_omega"):
            if not getattr(self, key) >= 0:
                raise ValueError(f"{key} must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ad.ACTIVATIONS)}, got {self.activation!r}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.epsilon)

    def resolved_batch_size(self, n: int) -> int:
        bs = self.batch_size if self.batch_size is not None else (n if n <= 2000 else 256)
        if bs > n:
            raise ValueError(f"batch_size {bs} exceeds dataset size {n}")
        if self.sampler == "knn" and self.k >= bs:
            raise ValueError(f"k={self.k} needs a batch larger than {bs}")
        return bs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    encoder: MlpParams
    decoder: MlpParams
    dual: MlpParams
    adam_theta: AdamState
    adam_omega: AdamState
    outer_iter: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        m = self.encoder.spec.out_dim
        s = self.decoder.spec.out_dim
        if self.decoder.spec.in_dim != m or self.dual.spec.in_dim != m:
            raise ValueError("encoder output, decoder input and dual input dims must agree")
        if self.dual.spec.out_dim != s or self.encoder.spec.in_dim != s:
            raise ValueError("decoder and dual outputs must match the ambient dimension")

    @property
    def theta(self) -> dict:
        return _pack(encoder=self.encoder, decoder=self.decoder)

    @property
    def omega(self) -> dict:
        return _pack(dual=self.dual)


def _pack(**nets) -> dict:
    return {f"{name}.{k}": v for name, p in nets.items() for k, v in p.named().items()}


def _unpack(p: MlpParams, name: str, arrays: dict) -> MlpParams:
    prefix = name + "."
    return p.with_arrays({k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)})


def init_state(ambient_dim: int, cfg: TrainConfig) -> TrainState:
    """Fresh networks; the soft-dual map starts as an exact copy of the decoder."""
    m, s, act = cfg.latent_dim, ambient_dim, cfg.activation
    if m > s:
        raise ValueError(f"latent_dim {m} exceeds ambient dimension {s}")
    enc = init_mlp(MlpSpec((s, *cfg.hidden, m), act), cfg.seed, role="encoder", stream=_rng.ENCODER)
    dec = init_mlp(MlpSpec((m, *cfg.hidden, s), act), cfg.seed, role="decoder", stream=_rng.DECODER)
    dual = dec.copy(role="dual")
    return TrainState(
        enc,
        dec,
        dual,
        AdamState(lr=cfg.lr_theta),
        AdamState(lr=cfg.lr_omega),
    )


# ---------------------------------------------------------------------------
# batches and neighborhoods


@dataclass
class Batch:
    """A mini-batch plus one sampled neighborhood per latent code.

    Neighborhood points are addressed as rows of ``[z ; extra]`` where ``z``
    are the batch latents and ``extra`` are ball samples ``z[center] +
    offset`` (empty for KNN).  ``pair_a``/``pair_b`` index those rows and
    ``pair_center`` gives each pair's center row in the batch.
    """

    indices: np.ndarray
    x: np.ndarray
    nb_index: np.ndarray | None
    extra_center: np.ndarray
    extra_offset: np.ndarray
    pair_a: np.ndarray
    pair_b: np.ndarray
    pair_center: np.ndarray
    tm_pairs: np.ndarray = None
    tm_counts: np.ndarray = None

    def __post_init__(self):
        if self.tm_pairs is None:
            self.tm_pairs, self.tm_counts = dedupe_pairs(np.column_stack([self.pair_a, self.pair_b]))

    @property
    def n_extra(self):
        return len(self.extra_center)


def sample_batch(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw without replacement; the full set comes back shuffled."""
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}], got {batch_size}")
    return rng.permutation(n)[:batch_size]


def make_batch(cloud: PointCloud, indices, encoder: MlpParams, cfg: TrainConfig, rng) -> Batch:
    x = cloud.points[indices]
    z = mlp_forward(encoder, x)
    b = len(indices)
    k = cfg.k
    tpl = all_pairs(k + 1)
    centers = np.repeat(np.arange(b), len(tpl))
    if cfg.sampler == "knn":
        nb = knn_indices(z, k)
        return Batch(
            indices, x, nb, np.empty(0, np.intp), np.empty((0, z.shape[1])),
            nb[:, tpl[:, 0]].ravel(), nb[:, tpl[:, 1]].ravel(), centers,
        )
    offsets = ball_offsets(rng, b, k, z.shape[1], cfg.ball_radius).reshape(b * k, -1)
    # row ids: position 0 is the center itself, positions 1..k are its extra samples
    rows = np.empty((b, k + 1), dtype=np.intp)
    rows[:, 0] = np.arange(b)
    rows[:, 1:] = b + np.arange(b * k).reshape(b, k)
    return Batch(
        indices, x, None, np.repeat(np.arange(b), k), offsets,
        rows[:, tpl[:, 0]].ravel(), rows[:, tpl[:, 1]].ravel(), centers,
    )


def _latent_points_node(tape, z_node, batch: Batch):
    if batch.n_extra == 0:
        return z_node
    extra = tape.take(z_node, batch.extra_center) + batch.extra_offset
    return tape.concat([z_node, extra])


def _latent_points(z, batch: Batch):
    if batch.n_extra == 0:
        return z
    return np.vstack([z, z[batch.extra_center] + batch.extra_offset])


# ---------------------------------------------------------------------------
# objectives


def immersion_objective(tape, state: TrainState, batch: Batch, w: LossWeights, theta_nodes=None):
    """Build the immersion objective on ``tape``; omega enters as constants."""
    if theta_nodes is None:
        theta_nodes = {
            "encoder": param_leaves(tape, state.encoder, requires_grad=False),
            "decoder": param_leaves(tape, state.decoder, requires_grad=False),
        }
    dual_nodes = param_leaves(tape, state.dual, requires_grad=False)
    x = tape.const(batch.x, name="x")
    z = mlp_forward_node(tape, state.encoder.spec, theta_nodes["encoder"], x)
    pts = _latent_points_node(tape, z, batch)
    decoded = mlp_forward_node(tape, state.decoder.spec, theta_nodes["decoder"], pts)
    b = len(batch.x)
    x_rec = decoded if batch.n_extra == 0 else tape.take(decoded, np.arange(b))
    l_re = loss_re(tape, x, x_rec)
    l_tm = loss_tm(tape, decoded, batch.tm_pairs, batch.tm_counts)
    out_phi = mlp_forward_node(tape, state.dual.spec, dual_nodes, z)
    l_du = loss_dual(tape, x_rec, out_phi)
    return loss_immersion(tape, l_re, l_tm, l_du, w), (l_re, l_tm, l_du)


def _frozen_theta_quantities(state: TrainState, batch: Batch):
    z = mlp_forward(state.encoder, batch.x)
    pts = _latent_points(z, batch)
    decoded = mlp_forward(state.decoder, pts)
    dec_dist = np.sqrt(np.sum((decoded[batch.pair_a] - decoded[batch.pair_b]) ** 2, axis=1) + ad.SMOOTH_EPS)
    disp = pts[batch.pair_a] - pts[batch.pair_b]
    return z, decoded[: len(z)], dec_dist, disp


def isometry_objective(tape, state: TrainState, batch: Batch, w: LossWeights, omega_nodes=None, frozen=None):
    """Build the isometry objective on ``tape``; theta enters as constants."""
    if omega_nodes is None:
        omega_nodes = param_leaves(tape, state.dual, requires_grad=False)
    z, x_rec, dec_dist, disp = frozen if frozen is not None else _frozen_theta_quantities(state, batch)
    out_phi, cols = jacobian_column_nodes(tape, state.dual.spec, omega_nodes, z)
    metric_dist = metric_distance_node(tape, cols, batch.pair_center, disp)
    l_is = loss_is(tape, metric_dist, dec_dist)
    l_du = loss_dual(tape, x_rec, out_phi)
    return loss_isometry(tape, l_is, l_du, w), (l_is, l_du)


def evaluate_losses(state: TrainState, batch: Batch, w: LossWeights) -> LossReport:
    """All losses at the current parameters on a fixed batch, in plain numpy."""
    z, x_rec, dec_dist, disp = _frozen_theta_quantities(state, batch)
    smooth = ad.SMOOTH_EPS
    l_re = np.mean((batch.x - x_rec) ** 2)
    l_tm = np.mean(dec_dist)
    g = pullback_metrics(state.dual, z)
    metric = metric_distances(g[batch.pair_center], disp)
    l_is = np.mean((metric - dec_dist) ** 2)
    l_du = np.mean(np.sqrt(np.sum((x_rec - mlp_forward(state.dual, z)) ** 2, axis=1) + smooth))
    return LossReport.from_parts(l_re, l_tm, l_is, l_du, w)


def _guard(value, what):
    if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise DivergenceError(f"{what} diverged: {value!r}")


# ---------------------------------------------------------------------------
# E / M steps


def e_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> TrainState:
    """ADAM steps on theta against the immersion objective; omega untouched."""
    w = cfg.weights
    theta, adam = state.theta, state.adam_theta
    cur = state
    for _ in range(cfg.inner_imm_iters):
        tape = ad.Tape()
        nodes = {k: tape.leaf(v, name=k) for k, v in theta.items()}
        split = {
            net: {k.split(".", 1)[1]: n for k, n in nodes.items() if k.startswith(net + ".")}
            for net in ("encoder", "decoder")
        }
        obj, _ = immersion_objective(tape, cur, batch, w, theta_nodes=split)
        _guard(float(obj.value), "immersion loss")
        grads = tape.backward(obj)
        theta, adam = adam_step(theta, {k: grads[n.id] for k, n in nodes.items()}, adam)
        cur = replace(
            cur,
            encoder=_unpack(cur.encoder, "encoder", theta),
            decoder=_unpack(cur.decoder, "decoder", theta),
            adam_theta=adam,
        )
    return cur


def m_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> TrainState:
    """ADAM steps on omega against the isometry objective; theta untouched."""
    w = cfg.weights
    omega, adam = state.omega, state.adam_omega
    frozen = _frozen_theta_quantities(state, batch)
    cur = state
    for _ in range(cfg.inner_iso_iters):
        tape = ad.Tape()
        nodes = {k: tape.leaf(v, name=k) for k, v in omega.items()}
        dual_nodes = {k.split(".", 1)[1]: n for k, n in nodes.items()}
        obj, _ = isometry_objective(tape, cur, batch, w, omega_nodes=dual_nodes, frozen=frozen)
        _guard(float(obj.value), "isometry loss")
        grads = tape.backward(obj)
        omega, adam = adam_step(omega, {k: grads[n.id] for k, n in nodes.items()}, adam)
        cur = replace(cur, dual=_unpack(cur.dual, "dual", omega), adam_omega=adam)
    return cur


# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    state: TrainState
    history: list
    latents: np.ndarray
    metrics: np.ndarray


def metric_field(state: TrainState, points) -> tuple[np.ndarray, np.ndarray]:
    """Latent codes of ``points`` and the learned metric at each of them."""
    z = mlp_forward(state.encoder, points)
    return z, pullback_metrics(state.dual, z)


def train_loop(
    cloud: PointCloud,
    cfg: TrainConfig,
    state: TrainState | None = None,
    callback: Callable[[TrainState, Batch], None] | None = None,
) -> TrainResult:
    """Alternate E- and M-steps for ``cfg.outer_iters`` outer iterations.

    ``callback(state, batch)`` runs after every outer iteration.  A diverging
    loss raises :class:`DivergenceError` carrying the last good state.
    """
    if len(cloud) < 2:
        raise ValueError("need at least two points to train")
    if state is None:
        state = init_state(cloud.dim, cfg)
    bs = cfg.resolved_batch_size(len(cloud))
    batch_rng = _rng.make_rng(cfg.seed, _rng.BATCH)
    sampler_rng = _rng.make_rng(cfg.seed, _rng.SAMPLER)
    w = cfg.weights
    for it in range(cfg.outer_iters):
        last_good = state
        idx = sample_batch(len(cloud), bs, batch_rng)
        batch = make_batch(cloud, idx, state.encoder, cfg, sampler_rng)
        try:
            state = e_step(state, batch, cfg)
            state = m_step(state, batch, cfg)
            report = evaluate_losses(state, batch, w)
            _guard(max(report.l_immersion, report.l_isometry), "loss")
        except (DivergenceError, ad.NonFiniteError) as exc:
            raise DivergenceError(f"outer iteration {it}: {exc}", last_good=last_good) from exc
        state = replace(state, outer_iter=state.outer_iter + 1, history=state.history + [report])
        if it % 100 == 0 or it == cfg.outer_iters - 1:
            log.info(
                "iter %d  imm %.3e  iso %.3e  re %.3e  is %.3e",
                it, report.l_immersion, report.l_isometry, report.l_re, report.l_is,
            )
        if callback is not None:
            callback(state, batch)
    z, g = metric_field(state, cloud.points)
    return TrainResult(state, list(state.history), z, g)
