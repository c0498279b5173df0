"""Bipartite matching between predicted and ground-truth instance sets, and
the matched losses used to train the detector.

The matcher pairs each (no-action-padded) ground-truth slot with exactly one
prediction by minimizing a cost that mixes class probability and segment
proximity. The training loss is then computed on the matched pairs: cross
entropy on the class plus a weighted L1 + interval-IoU segment loss. The
matching itself never carries gradients; gradients flow only through the loss
evaluated at the fixed assignment.

Class convention: real action classes are 0..C-1 and the no-action class is
index C, the last column of the probability matrix.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import (
    Tensor,
    absolute,
    as_tensor,
    div,
    log,
    maximum,
    minimum,
    mul,
    take_rows,
    tsum,
)

LOG_EPS = 1e-12  # probability floor before taking logs
_UNION_EPS = 1e-12  # guards the differentiable IoU against 0/0 on degenerate pairs


@dataclass(frozen=True)
class LossWeights:
    """Weights and ablation switches for the segment loss."""

    lam_l1: float = 5.0
    lam_iou: float = 3.0
    use_l1: bool = True
    use_iou: bool = True

    def __post_init__(self):
        if self.lam_l1 < 0 or self.lam_iou < 0:
            raise ContractError("segment loss weights must be nonnegative")


@dataclass(frozen=True)
class GroundTruth:
    """The annotated instances of one video, times normalized to [0, 1]."""

    labels: np.ndarray  # (m,) int
    segments: np.ndarray  # (m, 2) float, start <= end

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.intp)
        segments = np.asarray(self.segments, dtype=np.float64).reshape(-1, 2)
        if labels.shape[0] != segments.shape[0]:
            raise ContractError("labels and segments disagree in length")
        if segments.size and not np.isfinite(segments).all():
            raise ContractError("ground-truth segments must be finite")
        if segments.size and (
            (segments < 0).any() or (segments > 1).any() or (segments[:, 0] > segments[:, 1]).any()
        ):
            raise ContractError("ground-truth segments must satisfy 0 <= start <= end <= 1")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "segments", segments)

    def __len__(self):
        return int(self.labels.shape[0])

    def padded_labels(self, n_slots: int, no_action: int) -> np.ndarray:
        """Labels extended to ``n_slots`` entries with the no-action class."""
        if len(self) > n_slots:
            raise ContractError(f"{len(self)} instances exceed {n_slots} prediction slots")
        pad = np.full(n_slots - len(self), no_action, dtype=np.intp)
        return np.concatenate([self.labels, pad])


@dataclass(frozen=True)
class Assignment:
    """A bijection from padded ground-truth slots to prediction indices."""

    phi: np.ndarray  # phi[i] = prediction index matched to ground-truth slot i
    total_cost: float

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.intp)
        if sorted(phi.tolist()) != list(range(phi.shape[0])):
            raise ContractError("assignment is not a bijection")
        object.__setattr__(self, "phi", phi)


# ---------------------------------------------------------------------------
# interval losses (scalar and vectorized float paths)


def iou_loss(seg_a, seg_b) -> float:
    """1 - intersection/union of two intervals, after canonicalizing each
    endpoint pair by (min, max). Coincident zero-length intervals count as a
    perfect match (loss 0); any other zero-union pair gets the full loss 1.
    """
    a0, a1 = float(min(seg_a[0], seg_a[1])), float(max(seg_a[0], seg_a[1]))
    b0, b1 = float(min(seg_b[0], seg_b[1])), float(max(seg_b[0], seg_b[1]))
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    if union <= 0.0:
        return 0.0 if (a0 == b0 and a1 == b1) else 1.0
    return 1.0 - inter / union


def iou_loss_matrix(gt_segs: np.ndarray, pred_segs: np.ndarray) -> np.ndarray:
    """Pairwise ``iou_loss`` between (m, 2) ground-truth and (n, 2) predicted
    segments, vectorized; matches the scalar definition entrywise."""
    g = np.sort(np.asarray(gt_segs, dtype=np.float64), axis=1)
    p = np.sort(np.asarray(pred_segs, dtype=np.float64), axis=1)
    lo = np.maximum(g[:, None, 0], p[None, :, 0])
    hi = np.minimum(g[:, None, 1], p[None, :, 1])
    inter = np.maximum(0.0, hi - lo)
    union = (g[:, 1] - g[:, 0])[:, None] + (p[:, 1] - p[:, 0])[None, :] - inter
    coincident = (g[:, None, 0] == p[None, :, 0]) & (g[:, None, 1] == p[None, :, 1])
    with np.errstate(invalid="ignore", divide="ignore"):
        loss = 1.0 - inter / union
    return np.where(union > 0.0, loss, np.where(coincident, 0.0, 1.0))


def segment_loss(gt_seg, pred_seg, weights: LossWeights) -> float:
    """Weighted L1 + IoU distance between a ground-truth and a predicted
    segment. L1 uses the raw prediction coordinates; the IoU term sees the
    canonicalized interval."""
    total = 0.0
    if weights.use_iou:
        total += weights.lam_iou * iou_loss(gt_seg, pred_seg)
    if weights.use_l1:
        total += weights.lam_l1 * (
            abs(float(gt_seg[0]) - float(pred_seg[0])) + abs(float(gt_seg[1]) - float(pred_seg[1]))
        )
    return total


def segment_loss_tensor(pred_segs: Tensor, gt_segs: np.ndarray, weights: LossWeights) -> Tensor:
    """Differentiable per-pair segment loss for matched (m, 2) segments.

    Mirrors :func:`segment_loss`; the union in the IoU term is floored at a
    tiny epsilon so degenerate zero-length pairs cannot divide by zero.
    """
    gt = np.asarray(gt_segs, dtype=np.float64).reshape(-1, 2)
    terms = []
    if weights.use_iou:
        p_lo = minimum(pred_segs[:, 0], pred_segs[:, 1])
        p_hi = maximum(pred_segs[:, 0], pred_segs[:, 1])
        g_lo = as_tensor(gt[:, 0])
        g_hi = as_tensor(gt[:, 1])
        inter = maximum(
            as_tensor(np.zeros(gt.shape[0])),
            minimum(p_hi, g_hi) - maximum(p_lo, g_lo),
        )
        union = (g_hi - g_lo) + (p_hi - p_lo) - inter
        iou = div(inter, maximum(union, as_tensor(np.full(gt.shape[0], _UNION_EPS))))
        terms.append(mul(as_tensor(1.0) - iou, as_tensor(weights.lam_iou)))
    if weights.use_l1:
        l1 = tsum(absolute(pred_segs - as_tensor(gt)), axis=1)
        terms.append(mul(l1, as_tensor(weights.lam_l1)))
    if not terms:
        return as_tensor(np.zeros(gt.shape[0]))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# ---------------------------------------------------------------------------
# matching cost


def matching_cost(label: int, gt_seg, probs_row, pred_seg, weights: LossWeights, no_action: int) -> float:
    """Pairing cost between one (possibly padding) ground-truth entry and one
    prediction: -p(class) + segment loss for real classes, exactly 0 for the
    no-action padding (both indicator terms vanish)."""
    if label == no_action:
        return 0.0
    return -float(probs_row[label]) + segment_loss(gt_seg, pred_seg, weights)


def cost_matrix(
    gt: GroundTruth,
    class_probs: np.ndarray,
    segments: np.ndarray,
    weights: LossWeights,
) -> np.ndarray:
    """Full n_slots x n_slots matching-cost matrix; rows are padded
    ground-truth slots, columns are predictions. Padding rows are all zero."""
    probs = np.asarray(class_probs, dtype=np.float64)
    segs = np.asarray(segments, dtype=np.float64)
    n_slots = probs.shape[0]
    no_action = probs.shape[1] - 1
    m = len(gt)
    if m > n_slots:
        raise ContractError(f"{m} instances exceed {n_slots} prediction slots")
    if m and int(gt.labels.max()) >= no_action:
        raise ContractError("ground-truth label collides with the no-action class")
    cost = np.zeros((n_slots, n_slots), dtype=np.float64)
    if m:
        cls = -probs[:, gt.labels].T  # (m, n_slots)
        seg = np.zeros((m, n_slots))
        if weights.use_iou:
            seg += weights.lam_iou * iou_loss_matrix(gt.segments, segs)
        if weights.use_l1:
            seg += weights.lam_l1 * np.abs(gt.segments[:, None, :] - segs[None, :, :]).sum(-1)
        cost[:m] = cls + seg
    return cost


# ---------------------------------------------------------------------------
# assignment solvers


def hungarian_match(cost: np.ndarray) -> Assignment:
    """Minimum-cost perfect matching on a square cost matrix in O(n^3).

    Potential-based Kuhn-Munkres with shortest augmenting paths. All scans run
    in ascending index order with strict improvement, so ties break toward the
    lowest index and results are reproducible.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1] or cost.shape[0] == 0:
        raise ContractError(f"cost matrix must be square and nonempty, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise ContractError("cost matrix contains non-finite entries")
    n = cost.shape[0]

    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    col_to_row = np.zeros(n + 1, dtype=np.intp)  # 0 means unmatched
    way = np.zeros(n + 1, dtype=np.intp)

    for i in range(1, n + 1):
        col_to_row[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_to_row[j0]
            reduced = cost[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1  # first minimum: lowest index
            delta = candidates[j1 - 1]
            u[col_to_row[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if col_to_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_to_row[j0] = col_to_row[j1]
            j0 = j1

    phi = np.empty(n, dtype=np.intp)
    for j in range(1, n + 1):
        phi[col_to_row[j] - 1] = j - 1
    total = float(cost[np.arange(n), phi].sum())
    return Assignment(phi, total)


def brute_force_match(cost: np.ndarray) -> Assignment:
    """Exhaustive minimum over all n! assignments; the oracle for
    :func:`hungarian_match`. Only sensible up to n = 8."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1] or cost.shape[0] == 0:
        raise ContractError(f"cost matrix must be square and nonempty, got {cost.shape}")
    n = cost.shape[0]
    if n > 8:
        raise ContractError(f"brute force limited to n <= 8, got {n}")
    rows = np.arange(n)
    best_phi = None
    best_total = np.inf
    for perm in itertools.permutations(range(n)):
        total = cost[rows, perm].sum()
        if total < best_total:
            best_total = total
            best_phi = perm
    return Assignment(np.array(best_phi, dtype=np.intp), float(best_total))


def match_predictions(
    gt: GroundTruth,
    class_probs: np.ndarray,
    segments: np.ndarray,
    weights: LossWeights,
) -> Assignment:
    """Hungarian assignment of predictions to padded ground truth, computed on
    detached (gradient-free) values."""
    return hungarian_match(cost_matrix(gt, class_probs, segments, weights))


# ---------------------------------------------------------------------------
# training loss


def hungarian_loss(
    gt: GroundTruth,
    pred,
    weights: LossWeights,
    *,
    assignment: Assignment | None = None,
    no_action_weight: float = 1.0,
) -> Tensor:
    """Set-prediction training loss for one video.

    ``pred`` is anything with ``class_probs`` (n_slots, C+1) and ``segments``
    (n_slots, 2) Tensor attributes. The assignment is found on detached
    values (or taken from ``assignment`` when the caller wants the matching
    frozen, e.g. for finite-difference checks); the returned scalar is
    differentiable with respect to the prediction tensors: for every matched
    slot a -log p(class) term, plus the segment loss on real (non-padding)
    slots. Probabilities are floored at ``LOG_EPS`` before the log.
    """
    probs: Tensor = pred.class_probs
    segs: Tensor = pred.segments
    n_slots, n_cols = probs.shape
    no_action = n_cols - 1
    m = len(gt)
    if m > n_slots:
        raise ContractError(f"{m} instances exceed {n_slots} prediction slots")

    if assignment is None:
        assignment = match_predictions(gt, probs.data, segs.data, weights)
    phi = assignment.phi

    padded = gt.padded_labels(n_slots, no_action)
    onehot = np.zeros((n_slots, n_cols))
    onehot[np.arange(n_slots), padded] = 1.0

    matched_probs = take_rows(probs, phi)
    p = tsum(mul(matched_probs, as_tensor(onehot)), axis=1)
    nll = -log(maximum(p, as_tensor(np.full(n_slots, LOG_EPS))))
    class_weights = np.where(padded == no_action, no_action_weight, 1.0)
    loss = tsum(mul(nll, as_tensor(class_weights)))

    if m:
        matched_segs = take_rows(segs, phi[:m])
        loss = loss + tsum(segment_loss_tensor(matched_segs, gt.segments, weights))
    return loss
