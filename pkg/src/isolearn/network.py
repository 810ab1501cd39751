"""Multilayer perceptrons for the encoder, decoder and soft-dual map.

Weights follow the ``(d_out, d_in)`` convention and batches are row-major, so
one layer computes ``x @ W.T + b``.  Hidden layers share one activation; the
output layer is affine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._rng import make_rng

ROLES = ("encoder", "decoder", "dual")


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("an MLP needs at least an input and an output dimension")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer dimensions must be >= 1, got {dims}")
        ad.get_activation(self.activation)

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int | None = None
    role: str | None = None

    def __post_init__(self):
        dims = self.spec.layer_dims
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise ValueError("number of layers does not match spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ValueError(
                    f"layer {i}: expected W {(dims[i + 1], dims[i])} and b {(dims[i + 1],)}, "
                    f"got {w.shape} and {b.shape}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite entries")

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "MlpParams":
        n = self.spec.n_layers
        return MlpParams(
            self.spec,
            [np.array(arrays[f"w{i}"], dtype=np.float64) for i in range(n)],
            [np.array(arrays[f"b{i}"], dtype=np.float64) for i in range(n)],
            seed=self.seed,
            role=self.role,
        )

    def copy(self, role=None) -> "MlpParams":
        p = self.with_arrays(self.named())
        if role is not None:
            p.role = role
        return p

    def equals(self, other: "MlpParams") -> bool:
        """Bitwise equality of all weights and biases."""
        if self.spec != other.spec:
            return False
        a, b = self.named(), other.named()
        return all(np.array_equal(a[k], b[k]) for k in a)


def init_mlp(spec: MlpSpec, seed: int, role=None, stream: int = 0) -> MlpParams:
    """Glorot-uniform weights, zero biases; deterministic in ``(seed, stream)``."""
    rng = make_rng(seed, stream)
    weights, biases = [], []
    for d_in, d_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        bound = np.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-bound, bound, size=(d_out, d_in)))
        biases.append(np.zeros(d_out))
    return MlpParams(spec, weights, biases, seed=seed, role=role)


def _as_batch(p, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != p.spec.in_dim:
        raise ValueError(f"expected input with {p.spec.in_dim} columns, got shape {x.shape}")
    return x2, single


def mlp_forward(p: MlpParams, x) -> np.ndarray:
    x2, single = _as_batch(p, x)
    act = ad.get_activation(p.spec.activation)
    h = x2
    last = p.spec.n_layers - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = h @ w.T + b
        if i < last:
            h = act.f(h)
    return h[0] if single else h


def mlp_jacobians(p: MlpParams, z) -> np.ndarray:
    """Batched Jacobians, shape ``(B, d_out, d_in)``."""
    z2, _ = _as_batch(p, z)
    act = ad.get_activation(p.spec.activation)
    h = z2
    jac = np.broadcast_to(np.eye(p.spec.in_dim), (z2.shape[0], p.spec.in_dim, p.spec.in_dim))
    last = p.spec.n_layers - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        pre = h @ w.T + b
        jac = np.matmul(w, jac)
        if i < last:
            jac = act.d1(pre)[:, :, None] * jac
            h = act.f(pre)
    return jac


def mlp_jacobian(p: MlpParams, z) -> np.ndarray:
    """Exact Jacobian ``W_L diag(s'(a_{L-1})) ... W_1`` at a single point."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    return mlp_jacobians(p, z[None, :])[0]


# ---------------------------------------------------------------------------
# tape versions


def param_leaves(tape: ad.Tape, p: MlpParams, requires_grad=True, prefix="") -> dict[str, ad.Node]:
    return {
        k: tape.leaf(v, name=prefix + k, requires_grad=requires_grad) for k, v in p.named().items()
    }


def mlp_forward_node(tape: ad.Tape, spec: MlpSpec, nodes: dict[str, ad.Node], x) -> ad.Node:
    h = tape._as_node(x)
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        h = h @ nodes[f"w{i}"].T + nodes[f"b{i}"]
        if i < last:
            h = tape.activation(h, spec.activation)
    return h


def mlp_jvp_nodes(tape: ad.Tape, spec: MlpSpec, nodes: dict[str, ad.Node], z, directions):
    """Forward output and ``J(z) v`` for every ``v`` in ``directions``.

    Built from ``s'(a) * (W u)`` so gradients with respect to the weights
    flow through the second derivative of the activation.  All directions
    share the forward pre-activations.
    """
    h = tape._as_node(z)
    us = [tape._as_node(v) for v in directions]
    if h.shape[-1] != spec.in_dim or any(u.shape != h.shape for u in us):
        raise ad.ShapeError(f"jvp expects {spec.in_dim}-dim points and matching directions")
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        wt = nodes[f"w{i}"].T
        us = [u @ wt for u in us]
        pre = h @ wt + nodes[f"b{i}"]
        if i < last:
            slope = tape.activation(pre, spec.activation, order=1)
            us = [slope * u for u in us]
            h = tape.activation(pre, spec.activation)
        else:
            h = pre
    return h, us


def mlp_jvp_node(tape: ad.Tape, spec: MlpSpec, nodes: dict[str, ad.Node], z, v) -> ad.Node:
    """Tape node for ``J(z) v`` (batched over rows of ``z`` and ``v``)."""
    return mlp_jvp_nodes(tape, spec, nodes, z, [v])[1][0]


def jacobian_column_nodes(tape: ad.Tape, spec: MlpSpec, nodes: dict[str, ad.Node], z):
    """Forward output and the ``d_in`` Jacobian columns at each row of ``z``."""
    n = tape._as_node(z).shape[0]
    eye = np.eye(spec.in_dim)
    return mlp_jvp_nodes(tape, spec, nodes, z, [np.tile(eye[i], (n, 1)) for i in range(spec.in_dim)])


# ---------------------------------------------------------------------------
# checkpoints


def to_json_dict(p: MlpParams) -> dict:
    return {
        "spec": {"layer_dims": list(p.spec.layer_dims), "activation": p.spec.activation},
        "layers": [
            {"w": w.reshape(-1).tolist(), "b": b.tolist()} for w, b in zip(p.weights, p.biases)
        ],
        "seed": p.seed,
        "role": p.role,
    }


def from_json_dict(d: dict) -> MlpParams:
    spec = MlpSpec(tuple(d["spec"]["layer_dims"]), d["spec"]["activation"])
    dims = spec.layer_dims
    weights, biases = [], []
    for i, layer in enumerate(d["layers"]):
        weights.append(np.array(layer["w"], dtype=np.float64).reshape(dims[i + 1], dims[i]))
        biases.append(np.array(layer["b"], dtype=np.float64))
    role = d.get("role")
    if role is not None and role not in ROLES:
        raise ValueError(f"unknown checkpoint role {role!r}")
    return MlpParams(spec, weights, biases, seed=d.get("seed"), role=role)


def save_checkpoint(p: MlpParams, path) -> None:
    # repr-based float serialization in json round-trips float64 exactly
    Path(path).write_text(json.dumps(to_json_dict(p)))


def load_checkpoint(path) -> MlpParams:
    return from_json_dict(json.loads(Path(path).read_text()))
