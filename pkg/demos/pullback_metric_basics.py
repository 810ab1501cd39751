# Pullback metrics of small decoders, checked by hand.
import numpy as np

from isolearn import autodiff as ad
from isolearn.geometry import check_metric_legitimacy, metric_distance, pullback_metric, taylor_remainder
from isolearn.network import MlpParams, MlpSpec, init_mlp, mlp_forward

rng = np.random.default_rng(0)

# a linear decoder R^2 -> R^3: the metric is A^T A everywhere
a = rng.normal(size=(3, 2))
lin = MlpParams(MlpSpec((2, 3), "identity"), [a], [np.zeros(3)])
g = pullback_metric(lin, np.zeros(2))
print("A^T A\n", a.T @ a)
print("pullback metric\n", g.g)

# latent distance under g equals the decoded distance for a linear map
p, q = rng.normal(size=2), rng.normal(size=2)
print("metric distance ", metric_distance(g, p, q))
print("decoded distance", np.linalg.norm(mlp_forward(lin, p) - mlp_forward(lin, q)))

# a rank-deficient Jacobian gives an illegal metric
flat = MlpParams(MlpSpec((2, 3), "identity"), [np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])], [np.zeros(3)])
print("rank-deficient:", check_metric_legitimacy(pullback_metric(flat, np.zeros(2))))

# a tanh decoder: the first-order Taylor residual shrinks like r^2
dec = init_mlp(MlpSpec((2, 16, 16, 3), "tanh"), seed=1)
z = np.array([0.3, -0.2])
d = rng.normal(size=2)
for r in (0.2, 0.1, 0.05, 0.025):
    print(f"radius {r:<6} remainder {taylor_remainder(dec, z, z + r * d / np.linalg.norm(d)):.3e}")

# the tape differentiates through sigma'' as well: check d/dx of tanh'(x) * w
def f(tape, leaves):
    x = leaves["x"]
    return tape.sum(tape.mul(tape.activation(x, "tanh", 1), tape.const(np.array([1.0, 2.0, -1.0]))))

print("gradient check error", ad.gradient_check(f, {"x": np.array([0.1, -0.4, 0.7])}))
