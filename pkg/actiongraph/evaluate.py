"""
Scoring of predictions against manifest ground truth.

Temporal detections are matched greedily by confidence and scored with
all-point average precision per class; mean AP averages the classes that have
at least one ground-truth instance. Video classification mAP ranks videos per
class, per-frame mAP ranks sampled time points per class.
"""

import csv
import logging
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, InputError
from .schemas import DatasetManifest, Detection, EvalReport, VideoRecord, threshold_key

logger = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)
FRAME_POINTS = 25

Interval = Tuple[float, float]


class GroundTruthSpan(NamedTuple):
    video_id: str
    class_id: int
    start: float
    end: float


def tiou(a: Interval, b: Interval) -> float:
    (a_start, a_end), (b_start, b_end) = a, b
    if not a_start < a_end or not b_start < b_end:
        raise ContractError(f"tiou needs start < end, got {a} and {b}")
    inter = min(a_end, b_end) - max(a_start, b_start)
    if inter <= 0.0:
        return 0.0
    union = max(a_end, b_end) - min(a_start, b_start)
    return inter / union


def _confidence_order(det: Detection):
    return (-det.confidence, det.start, det.class_id, det.video_id)


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruthSpan], iou_thresh: float
) -> List[Tuple[Detection, bool]]:
    """
    Greedy matching in descending confidence; returns (detection, is_tp) in that order.

    Each detection takes the unmatched ground truth of its video and class with
    the highest tIoU at or above `iou_thresh`; each ground truth is used once.
    """
    by_video: Dict[Tuple[str, int], List[int]] = {}
    for index, gt in enumerate(gts):
        by_video.setdefault((gt.video_id, gt.class_id), []).append(index)
    used = [False] * len(gts)

    flagged = []
    for det in sorted(dets, key=_confidence_order):
        best, best_iou = None, iou_thresh
        for index in by_video.get((det.video_id, det.class_id), []):
            if used[index]:
                continue
            overlap = tiou((det.start, det.end), (gts[index].start, gts[index].end))
            if overlap >= best_iou and (best is None or overlap > best_iou):
                best, best_iou = index, overlap
        if best is not None:
            used[best] = True
        flagged.append((det, best is not None))
    return flagged


def average_precision(flags: Sequence[bool], num_gt: int) -> Optional[float]:
    """
    All-point AP: mean precision at each true positive, over `num_gt`.

    None signals a class without ground truth (excluded from means).
    """
    if num_gt <= 0:
        return None
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp_c = np.cumsum(flags)
    precision = tp_c / np.arange(1, flags.size + 1)
    return float(precision[flags].sum() / num_gt)


def _ranked_ap(scores: np.ndarray, positives: np.ndarray) -> Optional[float]:
    order = np.argsort(-scores, kind="stable")
    return average_precision(positives[order], int(positives.sum()))


# =====================================================================
# DETECTION mAP
# =====================================================================


def ground_truth_spans(manifest: DatasetManifest) -> List[GroundTruthSpan]:
    return [
        GroundTruthSpan(record.video_id, gt.label, gt.start, gt.end)
        for record in manifest.videos
        for gt in record.ground_truth
    ]


def _check_detections(detections: Sequence[Detection], manifest: DatasetManifest) -> None:
    known = {record.video_id for record in manifest.videos}
    for det in detections:
        if det.video_id not in known:
            raise InputError(f"detection cites unknown video {det.video_id!r}")
        if det.class_id >= manifest.num_classes:
            raise InputError(
                f"detection cites class {det.class_id}, manifest has {manifest.num_classes} classes"
            )


def map_at_iou(
    detections: Sequence[Detection],
    manifest: DatasetManifest,
    thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
) -> EvalReport:
    _check_detections(detections, manifest)
    spans = ground_truth_spans(manifest)
    if not spans:
        raise InputError(f"{manifest.split} manifest carries no ground-truth intervals")

    dets_by_class: Dict[int, List[Detection]] = {}
    for det in detections:
        dets_by_class.setdefault(det.class_id, []).append(det)
    spans_by_class: Dict[int, List[GroundTruthSpan]] = {}
    for span in spans:
        spans_by_class.setdefault(span.class_id, []).append(span)

    report = EvalReport(
        thresholds=list(thresholds), num_detections=len(detections), num_ground_truth=len(spans)
    )
    for threshold in thresholds:
        key = threshold_key(threshold)
        per_class, matched = {}, 0
        for cls in sorted(spans_by_class):
            flagged = match_detections(dets_by_class.get(cls, []), spans_by_class[cls], threshold)
            flags = [is_tp for _, is_tp in flagged]
            matched += sum(flags)
            per_class[cls] = average_precision(flags, len(spans_by_class[cls]))
        report.per_class_ap[key] = per_class
        report.mean_ap[key] = float(np.mean(list(per_class.values())))
        report.matched[key] = matched
        logger.debug("mAP@%s = %.4f (%d matched)", key, report.mean_ap[key], matched)
    return report


# =====================================================================
# VIDEO CLASSIFICATION
# =====================================================================


def _score_table(video_scores: Dict[str, np.ndarray], manifest: DatasetManifest) -> np.ndarray:
    rows = []
    for record in manifest.videos:
        if record.video_id not in video_scores:
            raise InputError(f"no video scores for {record.video_id!r}")
        scores = np.asarray(video_scores[record.video_id], dtype=float).reshape(-1)
        if scores.size != manifest.num_classes:
            raise InputError(
                f"video {record.video_id!r} has {scores.size} scores, expected {manifest.num_classes}"
            )
        rows.append(scores)
    return np.stack(rows) if rows else np.zeros((0, manifest.num_classes))


def _label_table(manifest: DatasetManifest) -> np.ndarray:
    table = np.zeros((len(manifest.videos), manifest.num_classes), dtype=bool)
    for row, record in enumerate(manifest.videos):
        table[row, list(record.labels)] = True
    return table


def classification_map(video_scores: Dict[str, np.ndarray], manifest: DatasetManifest) -> float:
    """
    Mean over classes of the AP of videos ranked by that class's score.
    """
    scores = _score_table(video_scores, manifest)
    labels = _label_table(manifest)
    aps = [_ranked_ap(scores[:, c], labels[:, c]) for c in range(manifest.num_classes)]
    aps = [ap for ap in aps if ap is not None]
    if not aps:
        raise InputError("no class has a positive video")
    return float(np.mean(aps))


def classification_accuracy(video_scores: Dict[str, np.ndarray], manifest: DatasetManifest) -> float:
    """
    Fraction of videos whose top-scoring class is one of their labels.
    """
    scores = _score_table(video_scores, manifest)
    if scores.shape[0] == 0:
        return 0.0
    labels = _label_table(manifest)
    top = np.argmax(scores, axis=1)
    return float(labels[np.arange(len(top)), top].mean())


# =====================================================================
# PER-FRAME mAP
# =====================================================================


def sample_points(record: VideoRecord, points: int = FRAME_POINTS) -> np.ndarray:
    return (np.arange(points) + 0.5) / points * record.duration


def per_frame_map(
    scores_fn: Callable[[VideoRecord], np.ndarray],
    manifest: DatasetManifest,
    points: int = FRAME_POINTS,
) -> float:
    """
    Classification mAP over `points` bin midpoints per video.

    A point takes the score row of the segment containing it and is positive
    for every class whose ground truth covers it.
    """
    if points < 1:
        raise ContractError("per_frame_map needs at least one point per video")
    pooled_scores, pooled_labels = [], []
    for record in manifest.videos:
        scores = np.asarray(scores_fn(record), dtype=float)
        times = sample_points(record, points)
        segments = np.minimum((times / record.segment_duration).astype(int), scores.shape[0] - 1)
        pooled_scores.append(scores[segments])
        positive = np.zeros((points, manifest.num_classes), dtype=bool)
        for gt in record.ground_truth:
            positive[:, gt.label] |= (times >= gt.start) & (times < gt.end)
        pooled_labels.append(positive)
    if not pooled_scores:
        raise InputError("per-frame mAP needs at least one video")

    scores = np.concatenate(pooled_scores)
    labels = np.concatenate(pooled_labels)
    aps = [_ranked_ap(scores[:, c], labels[:, c]) for c in range(manifest.num_classes)]
    aps = [ap for ap in aps if ap is not None]
    if not aps:
        raise InputError("no sampled point lies inside a ground-truth interval")
    return float(np.mean(aps))


# =====================================================================
# REPORTS
# =====================================================================


def format_report(report: EvalReport, class_names: Sequence[str]) -> str:
    keys = [threshold_key(t) for t in report.thresholds]
    width = max([len("class")] + [len(name) for name in class_names])

    def row(label: str, values: Sequence[float]) -> str:
        cells = [f"{value:.3f}".rjust(len(key) + 1) for value, key in zip(values, keys)]
        return "  ".join([label.ljust(width)] + cells)

    lines = ["  ".join(["class".ljust(width)] + [f"@{key}" for key in keys])]
    classes = sorted({cls for key in keys for cls in report.per_class_ap.get(key, {})})
    for cls in classes:
        lines.append(row(class_names[cls], [report.per_class_ap[key][cls] for key in keys]))
    lines.append(row("mAP", [report.mean_ap[key] for key in keys]))
    if report.classification_map is not None:
        lines.append(f"video classification mAP: {report.classification_map:.3f}")
    if report.per_frame_map is not None:
        lines.append(f"per-frame mAP: {report.per_frame_map:.3f}")
    lines.append(f"detections: {report.num_detections}  ground truth: {report.num_ground_truth}")
    return "\n".join(lines)


def write_report_csv(path: Union[str, Path], report: EvalReport, class_names: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iou", "class", "ap"])
        for threshold in report.thresholds:
            key = threshold_key(threshold)
            for cls, ap in sorted(report.per_class_ap[key].items()):
                writer.writerow([key, class_names[cls], f"{ap:.6f}"])
            writer.writerow([key, "mAP", f"{report.mean_ap[key]:.6f}"])
        if report.classification_map is not None:
            writer.writerow(["", "classification_mAP", f"{report.classification_map:.6f}"])
        if report.per_frame_map is not None:
            writer.writerow(["", "per_frame_mAP", f"{report.per_frame_map:.6f}"])
    return path


def evaluate_prediction(
    detections: Sequence[Detection],
    manifest: DatasetManifest,
    thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
    video_scores: Optional[Dict[str, np.ndarray]] = None,
    segment_scores: Optional[Dict[str, np.ndarray]] = None,
    points: int = FRAME_POINTS,
) -> EvalReport:
    """
    Detection mAP sweep plus whichever classification metrics the inputs allow.
    """
    report = map_at_iou(detections, manifest, thresholds)
    if video_scores is not None:
        report.classification_map = classification_map(video_scores, manifest)
    if segment_scores is not None:

        def scores_fn(record: VideoRecord) -> np.ndarray:
            if record.video_id not in segment_scores:
                raise InputError(f"no segment scores for {record.video_id!r}")
            return segment_scores[record.video_id]

        report.per_frame_map = per_frame_map(scores_fn, manifest, points)
    return report
