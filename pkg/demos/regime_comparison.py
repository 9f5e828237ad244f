"""Early-Exit, Multi-Model and SWEET fine-tuning side by side.

Trains the three regimes on the synthetic majority-of-cues task with the toy
configuration, then reports standalone accuracy per exit and the
speed-accuracy curve of each. Takes about 40 seconds per seed on one core.
Single seeds are noisy at this scale (a one-layer exit swings by a couple of
points between seeds), so the default averages five.

    python3 demos/regime_comparison.py [n_seeds]
"""

import sys

import numpy as np

from sweetexit.data import SyntheticTaskSpec, generate_synthetic
from sweetexit.harness import CompareConfig, compare_regimes
from sweetexit.model import ModelConfig
from sweetexit.training import RegimeConfig

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 5
cfg = CompareConfig(model=ModelConfig(), training=RegimeConfig(), policies=["confidence"])

runs = []
for seed in range(n_seeds):
    train_set = generate_synthetic(SyntheticTaskSpec(size=2000, seed=seed))
    validation = generate_synthetic(SyntheticTaskSpec(size=500, seed=seed, split="validation"))
    runs += compare_regimes(cfg, train_set, validation, [seed]).runs

print("standalone accuracy per exit (mean over seeds)")
for regime in ("ee", "mm", "sweet"):
    scores = np.mean([r.exit_scores for r in runs if r.regime == regime], axis=0)
    print(f"  {regime:6s}", "  ".join(f"{s:.3f}" for s in scores))

# SWEET's first classifier trains as if it were a standalone one-layer model,
# while Early-Exit's first layer also serves the deeper classifiers.
print("\nspeed-accuracy curve of the first seed (threshold, speedup, accuracy)")
for r in runs:
    if r.seed != 0:
        continue
    curve = r.curves[0]
    print(f"  {r.regime} ({curve.mode} accounting)")
    for p in curve.points[::2]:
        print(f"    {p.threshold:.3f}  {p.speedup:.3f}  {p.score:.3f}")
