"""
Seven true losses and threshold calibration
===========================================

Evaluates every supported loss on one synthetic score batch, checks the AUC
rank statistic against brute-force pair counting, and shows how the decision
threshold gamma is picked per metric.
"""

import numpy as np

from lossnets.metrics import MetricId, calibrate_threshold, true_loss

rng = np.random.default_rng(7)
n = 200
y = (rng.random(n) < 0.3).astype(np.int64)
# Scores overlap enough that no threshold is perfect.
scores = rng.normal(0, 1, n) + 1.4 * y

# Thresholded losses read sign(score - gamma); ranking losses (AUC, AP, EER)
# ignore gamma entirely.
print("loss at gamma=0 for every metric:")
for metric in MetricId:
    value = true_loss(metric, y, scores, 0.0)
    print(f"  {metric.value:>4}: {value:.4f}")

# AUC by definition: count positive-negative pairs ranked correctly, ties
# worth one half.
pos = scores[y == 1]
neg = scores[y == 0]
wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
pair_auc = wins / (pos.size * neg.size)
rank_auc = 1.0 - true_loss(MetricId.AUC, y, scores, 0.0)
print(f"\nAUC via rank statistic {rank_auc:.6f} == pair counting {pair_auc:.6f}")
assert rank_auc == pair_auc

# For thresholded metrics the right gamma depends on the metric: F-score
# tolerates more positives than accuracy does.
print("\ncalibrated thresholds and the loss they achieve:")
for metric in (MetricId.MCR, MetricId.F1, MetricId.JAC, MetricId.MCC):
    gamma = calibrate_threshold(metric, y, scores)
    value = true_loss(metric, y, scores, gamma)
    print(f"  {metric.value:>4}: gamma {gamma:+.4f} -> loss {value:.4f}")
