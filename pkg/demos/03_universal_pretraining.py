"""
Pretraining a universal surrogate
=================================

Fits the set-invariant loss network to the misclassification rate of random
label/score batches, with no dataset and no prediction model in the loop.
The result is a smooth, differentiable stand-in for the metric.
"""

import numpy as np

from lossnets.metrics import MetricId
from lossnets.nets import SurrogateNet
from lossnets.training import mean_meta_gap, pretrain_universal

rng = np.random.default_rng(0)
surrogate = SurrogateNet(dtype=np.float64)
surrogate.init(rng)

# Held-out probe batches, fixed before training: y ~ Bernoulli(1/2),
# scores ~ N(0,1), the same sampling model the pretraining uses.
probe_rng = np.random.default_rng(123)
probes = []
for _ in range(100):
    y = (probe_rng.random(100) < 0.5).astype(np.int64)
    s = probe_rng.normal(size=100)
    probes.append((y, s))

before = mean_meta_gap(surrogate, probes, MetricId.MCR)
print(f"held-out |true - surrogate| before training: {before:.4f}")

# A few thousand Adam steps suffice for a visible fit; the full 20k-step
# budget tightens it further.
losses = pretrain_universal(surrogate, MetricId.MCR, rng, steps=4000)
after = mean_meta_gap(surrogate, probes, MetricId.MCR)
print(f"held-out |true - surrogate| after 4000 steps: {after:.4f}")
print(f"training meta-loss: first 100 steps {np.mean(losses[:100]):.4f}, "
      f"last 100 steps {np.mean(losses[-100:]):.4f}")

# The fitted surrogate responds smoothly to score perturbations, unlike the
# step-function metric it mimics.
y = (rng.random(100) < 0.5).astype(np.int64)
s = rng.normal(size=100)
base = surrogate.forward_eval(y, s)
bumped = surrogate.forward_eval(y, s + 1e-4)
print(f"surrogate moves by {abs(bumped - base):.2e} for a 1e-4 score bump")
