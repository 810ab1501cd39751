# Learn a 2-D chart of the swiss roll with a metric attached, then score it.
# Usage: python3 swiss_roll_unrolling.py [outer_iters]   (default 2000, about 4.5 minutes)
import sys
import time

import numpy as np

from isolearn.datasets import gen_swiss_roll, normalize
from isolearn.evaluation import evaluate, pca_embed
from isolearn.geometry import check_metric_legitimacy
from isolearn.training import TrainConfig, train_loop

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 2000

cloud, _ = normalize(gen_swiss_roll(1000, seed=0))
cfg = TrainConfig(outer_iters=iters)



def progress(state, batch):
    if state.outer_iter % 200 == 0:
        last = state.history[-1]
        print(f"iter {state.outer_iter:5d}  l_re {last.l_re:.3e}  l_is {last.l_is:.3e}")


t0 = time.perf_counter()
res = train_loop(cloud, cfg, callback=progress)
print(f"trained {iters} outer iterations in {time.perf_counter() - t0:.0f}s")

# every point gets a symmetric positive definite 2x2 metric
legal = np.mean([check_metric_legitimacy(g).legal for g in res.metrics])
print(f"legal metrics: {100 * legal:.1f}%")

ours = evaluate(cloud, res.latents, res.metrics, k=cfg.k)
euclid = evaluate(cloud, res.latents, None, k=cfg.k)
pca = evaluate(cloud, pca_embed(cloud, 2), None, k=cfg.k)
print(f"{'':24}{'distortion':>12}{'triplet':>10}{'spearman':>10}{'knn':>8}")
for name, r in (("learned latents + metric", ours), ("learned latents, I_2", euclid), ("PCA, I_2", pca)):
    print(f"{name:24}{r.distortion:12.4g}{r.triplet:10.4f}{r.spearman:10.4f}{r.knn_preservation:8.3f}")
