"""Detection filtering, mAP at temporal-IoU thresholds, and the
segmentation-error-versus-duration analysis.

The protocol is the usual temporal-localization one: per class and threshold,
detections are ranked by score, greedily matched to the not-yet-matched
ground-truth instance with the highest temporal IoU at or above the
threshold within the same video, and the average precision is the area under
the all-point-interpolated precision envelope. Classes with no ground truth
have undefined AP and are excluded from the mean.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .matching import GroundTruth, LossWeights, match_predictions

DEFAULT_TIOU_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)

DETECTION_CSV_COLUMNS = ["video_id", "label", "score", "start", "end"]
REPORT_CSV_COLUMNS = ["metric", "threshold", "label", "value"]
ANALYSIS_CSV_COLUMNS = ["bin_low", "bin_high", "count", "mean_gt_duration", "mean_l1_error"]


@dataclass(frozen=True)
class Detection:
    video_id: str
    label: int
    score: float
    start: float
    end: float


def filter_predictions(pred, video_id: str, score_threshold: float = 0.0) -> list[Detection]:
    """One detection per query node whose argmax class is a real action and
    whose probability clears the threshold; argmax ties break toward the
    lowest class index, segments are canonicalized to start <= end."""
    probs = np.asarray(pred.probs if hasattr(pred, "probs") else pred.class_probs.data)
    segs = np.asarray(pred.segs if hasattr(pred, "segs") else pred.segments.data)
    no_action = probs.shape[1] - 1
    out = []
    labels = probs.argmax(axis=1)
    for q in range(probs.shape[0]):
        label = int(labels[q])
        if label == no_action:
            continue
        score = float(probs[q, label])
        if score < score_threshold:
            continue
        lo, hi = float(segs[q].min()), float(segs[q].max())
        out.append(Detection(video_id, label, score, lo, hi))
    return out


def temporal_iou(seg_a, seg_b) -> float:
    """Intersection over union of two canonical intervals; 0 when disjoint,
    1 when identical (including coincident zero-length instants)."""
    a0, a1 = float(seg_a[0]), float(seg_a[1])
    b0, b1 = float(seg_b[0]), float(seg_b[1])
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    if union <= 0.0:
        return 1.0 if (a0 == b0 and a1 == b1) else 0.0
    return inter / union


def average_precision(
    detections: list[Detection], gt_segments: dict[str, np.ndarray], tiou_threshold: float
) -> float:
    """AP for one class. ``gt_segments`` maps video id to an (m, 2) array.

    Returns nan when the class has no ground-truth instances.
    """
    n_gt = sum(len(v) for v in gt_segments.values())
    if n_gt == 0:
        return float("nan")
    if not detections:
        return 0.0

    order = sorted(
        range(len(detections)),
        key=lambda i: (-detections[i].score, detections[i].video_id, i),
    )
    matched = {vid: np.zeros(len(segs), dtype=bool) for vid, segs in gt_segments.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        det = detections[i]
        segs = gt_segments.get(det.video_id)
        if segs is None or len(segs) == 0:
            continue
        best_j, best_iou = -1, -1.0
        for j in range(len(segs)):
            if matched[det.video_id][j]:
                continue
            iou = temporal_iou((det.start, det.end), segs[j])
            if iou >= tiou_threshold and iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            matched[det.video_id][best_j] = True
            tp[rank] = 1.0

    tp_cum = np.cumsum(tp)
    precision = tp_cum / np.arange(1, len(order) + 1)
    recall = tp_cum / n_gt
    return _ap_all_point(precision, recall)


def _ap_all_point(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the precision envelope over recall (all-point
    interpolation), the standard detection-benchmark integral."""
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[changed] - mrec[changed - 1]) * mprec[changed]))


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    classes: list[int]
    per_class_ap: dict[float, dict[int, float]]  # threshold -> class -> AP
    map_per_threshold: dict[float, float]
    avg_map: float
    n_detections: int
    n_gt: int
    n_videos: int = 0
    extra: dict = field(default_factory=dict)

    def rows(self):
        """Flat (metric, threshold, label, value) rows, the CSV layout."""
        out = []
        for thr in self.thresholds:
            for cls in self.classes:
                out.append(("ap", thr, cls, self.per_class_ap[thr][cls]))
            out.append(("map", thr, "", self.map_per_threshold[thr]))
        out.append(("avg_map", "", "", self.avg_map))
        out.append(("n_detections", "", "", self.n_detections))
        out.append(("n_gt", "", "", self.n_gt))
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_CSV_COLUMNS)
            writer.writerows(self.rows())

    def table(self) -> str:
        lines = ["threshold  " + "  ".join(f"cls{c:>3}" for c in self.classes) + "    mAP"]
        for thr in self.thresholds:
            aps = "  ".join(f"{self.per_class_ap[thr][c]:6.3f}" for c in self.classes)
            lines.append(f"{thr:9.2f}  {aps}  {self.map_per_threshold[thr]:6.3f}")
        lines.append(f"average mAP over thresholds: {self.avg_map:.4f}")
        lines.append(f"detections: {self.n_detections}   ground-truth instances: {self.n_gt}")
        return "\n".join(lines)


def evaluate(
    detections: list[Detection],
    ground_truth: dict[str, GroundTruth],
    thresholds=DEFAULT_TIOU_THRESHOLDS,
) -> EvalReport:
    """Per-class AP and mAP at each threshold, plus the cross-threshold mean."""
    if not ground_truth:
        raise ContractError("evaluate needs a nonempty ground-truth corpus")
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds:
        raise ContractError("evaluate needs at least one tIoU threshold")

    classes = sorted({int(c) for gt in ground_truth.values() for c in gt.labels})
    by_class_gt = {
        cls: {
            vid: gt.segments[gt.labels == cls]
            for vid, gt in ground_truth.items()
            if (gt.labels == cls).any()
        }
        for cls in classes
    }
    by_class_det: dict[int, list[Detection]] = {cls: [] for cls in classes}
    for det in detections:
        if det.label in by_class_det:
            by_class_det[det.label].append(det)

    per_class_ap = {}
    map_per_threshold = {}
    for thr in thresholds:
        aps = {
            cls: average_precision(by_class_det[cls], by_class_gt[cls], thr) for cls in classes
        }
        per_class_ap[thr] = aps
        map_per_threshold[thr] = float(np.mean([aps[c] for c in classes])) if classes else 0.0

    avg_map = float(np.mean(list(map_per_threshold.values())))
    n_gt = sum(len(gt) for gt in ground_truth.values())
    return EvalReport(
        thresholds=thresholds,
        classes=classes,
        per_class_ap=per_class_ap,
        map_per_threshold=map_per_threshold,
        avg_map=avg_map,
        n_detections=len(detections),
        n_gt=n_gt,
        n_videos=len(ground_truth),
    )


def ground_truth_as_detections(ground_truth: dict[str, GroundTruth]) -> list[Detection]:
    """Replay the annotations as score-1.0 detections; mAP must be 1.0."""
    out = []
    for vid, gt in ground_truth.items():
        for label, seg in zip(gt.labels, gt.segments):
            out.append(Detection(vid, int(label), 1.0, float(seg[0]), float(seg[1])))
    return out


def write_detections_csv(detections: list[Detection], path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETECTION_CSV_COLUMNS)
        for d in detections:
            writer.writerow([d.video_id, d.label, repr(d.score), repr(d.start), repr(d.end)])


# ---------------------------------------------------------------------------
# segmentation error versus instance duration


def matched_segment_pairs(
    ground_truth: dict[str, GroundTruth],
    predictions: dict[str, object],
    weights: LossWeights | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Hungarian-match each video's predictions to its annotations and return
    (gt segment, predicted segment) pairs for the real (non-padding) slots."""
    weights = LossWeights() if weights is None else weights
    pairs = []
    for vid, gt in ground_truth.items():
        if len(gt) == 0 or vid not in predictions:
            continue
        pred = predictions[vid]
        probs = np.asarray(pred.probs if hasattr(pred, "probs") else pred.class_probs.data)
        segs = np.asarray(pred.segs if hasattr(pred, "segs") else pred.segments.data)
        assn = match_predictions(gt, probs, segs, weights)
        for i in range(len(gt)):
            pairs.append((gt.segments[i].copy(), segs[assn.phi[i]].copy()))
    return pairs


def segmentation_error_analysis(matched_pairs, n_bins: int = 10):
    """Per-pair (ground-truth duration fraction, L1 segment error) points and
    duration-binned mean errors for plotting.

    Returns (points, bins); bins are (low, high, count, mean duration,
    mean error) with nan means for empty bins.
    """
    points = []
    for gt_seg, pred_seg in matched_pairs:
        duration = float(gt_seg[1] - gt_seg[0])
        err = float(np.abs(np.asarray(gt_seg) - np.asarray(pred_seg)).sum())
        points.append((duration, err))

    edges = np.linspace(0.0, 1.0, n_bins + 1)
    bins = []
    for b in range(n_bins):
        lo, hi = float(edges[b]), float(edges[b + 1])
        members = [
            p for p in points if (lo <= p[0] < hi) or (b == n_bins - 1 and p[0] == hi)
        ]
        if members:
            durs, errs = zip(*members)
            bins.append((lo, hi, len(members), float(np.mean(durs)), float(np.mean(errs))))
        else:
            bins.append((lo, hi, 0, float("nan"), float("nan")))
    return points, bins


def write_analysis_csv(bins, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANALYSIS_CSV_COLUMNS)
        for row in bins:
            writer.writerow(row)
