"""How exit decisions turn into speedup ratios.

An early-exit model stops at the first classifier whose confidence reaches
the threshold and pays only for the layers it ran. A cascade of separate
models pays for every model it tried, so a late exit can cost more than the
full model. This script walks through both on the [1, 4, 6, 12] topology.
"""

import numpy as np

from sweetexit.exits import traces_from_scores
from sweetexit.harness import speedup_ratio, threshold_grid

layers = (1, 4, 6, 12)

# one instance whose third classifier is the first confident one
scores = np.array([[0.55, 0.70, 0.93, 0.99]])
preds = np.zeros((1, 4), dtype=int)
(trace,) = traces_from_scores(scores, preds, layers, threshold=0.9)
print(f"exit {trace.exit}: early-exit runs {trace.layers_ee} layers, cascade runs {trace.layers_mm}")
print("speedup EE", speedup_ratio([trace], layers, "ee"), " MM", speedup_ratio([trace], layers, "mm"))

# a population of instances with random per-exit confidences
rng = np.random.default_rng(0)
conf = np.sort(rng.uniform(0.5, 1.0, size=(1000, 4)), axis=1)
preds = np.zeros_like(conf, dtype=int)
print("\nthreshold  EE speedup  MM speedup")
for t in threshold_grid(2):
    traces = traces_from_scores(conf, preds, layers, t)
    print(f"{t:9.3f}  {speedup_ratio(traces, layers, 'ee'):10.3f}  {speedup_ratio(traces, layers, 'mm'):10.3f}")
# raising the threshold only ever delays exits, so both columns grow
