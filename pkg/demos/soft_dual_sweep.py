# How the strength of the soft-dual bond changes the isometry loss.
# Usage: python3 soft_dual_sweep.py [outer_iters] [n]   (defaults 300 and 300)
import sys

from isolearn.cli import ablation_rows
from isolearn.datasets import gen_swiss_roll, normalize
from isolearn.training import TrainConfig, train_loop

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 300
n = int(sys.argv[2]) if len(sys.argv) > 2 else 300

cloud, _ = normalize(gen_swiss_roll(n, seed=0))
hist = {g: train_loop(cloud, TrainConfig(gamma=g, outer_iters=iters)).history for g in (0.0, 0.01, 0.1, 1.0)}

print(f"{'gamma':>8}{'final l_is':>14}{'tail l_is':>14}{'final l_re':>14}{'final l_du':>14}")
for r in ablation_rows(hist):
    print(f"{r['gamma']:8g}{r['final_l_is']:14.4e}{r['tail_mean_l_is']:14.4e}{r['final_l_re']:14.4e}{r['final_l_du']:14.4e}")
