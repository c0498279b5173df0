"""Walks through the matched set loss: interval IoU, segment loss, the
assignment problem, and the full differentiable training loss."""

import numpy as np

from setloc.matching import (
    GroundTruth,
    LossWeights,
    brute_force_match,
    cost_matrix,
    hungarian_loss,
    hungarian_match,
    iou_loss,
    segment_loss,
)
from setloc.tensor import Tensor, backward

w = LossWeights()  # lam_l1=5, lam_iou=3

# interval losses on a worked pair: intersection 0.2, union 0.6
print("iou_loss([0.2,0.6],[0.4,0.8]) =", iou_loss([0.2, 0.6], [0.4, 0.8]))  # 2/3
print("segment_loss same pair        =", segment_loss([0.2, 0.6], [0.4, 0.8], w))  # 4.0

# the solver agrees with exhaustive search, here on a 5x5 instance
rng = np.random.default_rng(2)
cost = rng.normal(size=(5, 5))
fast = hungarian_match(cost)
slow = brute_force_match(cost)
print(f"hungarian total {fast.total_cost:.6f} == brute force {slow.total_cost:.6f}")

# the full loss: two annotated instances, four prediction slots
gt = GroundTruth(np.array([0, 2]), np.array([[0.1, 0.3], [0.5, 0.9]]))


class Pred:
    def __init__(self):
        logits = rng.normal(size=(4, 4))
        probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        self.class_probs = Tensor(probs, requires_grad=True)
        self.segments = Tensor(rng.uniform(0.1, 0.9, (4, 2)), requires_grad=True)


pred = Pred()
print("cost matrix (rows: padded ground truth, cols: predictions):")
print(np.round(cost_matrix(gt, pred.class_probs.data, pred.segments.data, w), 2))

loss = hungarian_loss(gt, pred, w)
print(f"hungarian loss = {loss.item():.4f}")
backward(loss)
print("gradient w.r.t. predicted segments:")
print(np.round(pred.segments.grad, 3))
