"""Small builders shared by the unit and acceptance tests."""

import numpy as np

from isolearn import _rng
from isolearn import autodiff as ad
from isolearn.datasets import PointCloud
from isolearn.training import (
    TrainConfig,
    init_state,
    immersion_objective,
    isometry_objective,
    make_batch,
)


def small_problem(seed, n=12, s=3, m=2, hidden=(5,), k=3, sampler="knn", activation="tanh"):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.normal(size=(n, s)) * 0.7)
    cfg = TrainConfig(
        k=k, sampler=sampler, ball_radius=0.2, latent_dim=m, hidden=hidden, activation=activation,
        seed=seed, alpha=float(rng.uniform(0.5, 1.5)), beta=float(rng.uniform(0.05, 0.5)),
        gamma=float(rng.uniform(0.05, 0.5)), epsilon=float(rng.uniform(0.5, 1.5)),
    )
    state = init_state(s, cfg)
    # perturb the dual so it differs from the decoder and the dual terms are not at their kink
    dual = state.dual.with_arrays({k_: v + 0.05 * rng.normal(size=v.shape) for k_, v in state.dual.named().items()})
    state.dual = dual
    batch = make_batch(cloud, np.arange(n), state.encoder, cfg, _rng.make_rng(seed, _rng.SAMPLER))
    return cloud, cfg, state, batch


def _split(leaves, nets):
    return {net: {k.split(".", 1)[1]: v for k, v in leaves.items() if k.startswith(net + ".")} for net in nets}


def immersion_grad_error(state, batch, cfg):
    def f(tape, leaves):
        obj, _ = immersion_objective(tape, state, batch, cfg.weights, theta_nodes=_split(leaves, ("encoder", "decoder")))
        return obj

    return ad.gradient_check(f, state.theta)


def isometry_grad_error(state, batch, cfg):
    def f(tape, leaves):
        obj, _ = isometry_objective(tape, state, batch, cfg.weights, omega_nodes=_split(leaves, ("dual",))["dual"])
        return obj

    return ad.gradient_check(f, state.omega)
