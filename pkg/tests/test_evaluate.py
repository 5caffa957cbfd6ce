# tests/test_evaluate.py
import csv
import random

import numpy as np
import pytest

from actiongraph.errors import ContractError, InputError
from actiongraph.evaluate import (
    DEFAULT_IOU_THRESHOLDS,
    GroundTruthSpan,
    average_precision,
    classification_accuracy,
    classification_map,
    evaluate_prediction,
    format_report,
    ground_truth_spans,
    map_at_iou,
    match_detections,
    per_frame_map,
    sample_points,
    tiou,
    write_report_csv,
)
from actiongraph.schemas import DatasetManifest, Detection


def make_manifest(videos, class_names=("jump", "throw")):
    return DatasetManifest.model_validate(
        {"split": "test", "class_names": list(class_names), "videos": videos}
    )


def video(video_id, labels, ground_truth=(), num_segments=10, segment_duration=1.0):
    return {
        "video_id": video_id,
        "feature_path": f"{video_id}.agf",
        "num_segments": num_segments,
        "segment_duration": segment_duration,
        "labels": list(labels),
        "ground_truth": [{"label": c, "start": s, "end": e} for c, s, e in ground_truth],
    }


@pytest.fixture(name="manifest")
def manifest_fixture():
    return make_manifest(
        [
            video("a", [0], [(0, 0.0, 2.0), (0, 4.0, 6.0)]),
            video("b", [1], [(1, 1.0, 4.0)]),
        ]
    )


def det(video_id, class_id, start, end, confidence):
    return Detection(video_id=video_id, class_id=class_id, start=start, end=end, confidence=confidence)


def perfect(manifest):
    return [det(s.video_id, s.class_id, s.start, s.end, 1.0) for s in ground_truth_spans(manifest)]


# =====================================================================
# TESTS FOR TEMPORAL IoU AND MATCHING
# =====================================================================


def test_tiou_examples():
    assert tiou((0.0, 2.0), (1.0, 3.0)) == pytest.approx(1.0 / 3.0)
    assert tiou((0.0, 2.0), (0.0, 2.0)) == 1.0
    assert tiou((0.0, 1.0), (1.0, 2.0)) == 0.0
    assert tiou((0.0, 1.0), (5.0, 6.0)) == 0.0
    assert tiou((1.0, 2.0), (0.0, 4.0)) == pytest.approx(0.25)


def test_tiou_rejects_empty_interval():
    with pytest.raises(ContractError):
        tiou((1.0, 1.0), (0.0, 2.0))


def test_match_uses_each_ground_truth_once():
    gts = [GroundTruthSpan("a", 0, 0.0, 2.0), GroundTruthSpan("a", 0, 4.0, 6.0)]
    dets = [det("a", 0, 0.1, 2.0, 0.8), det("a", 0, 4.0, 6.0, 0.7), det("a", 0, 0.0, 2.0, 0.9)]
    flagged = match_detections(dets, gts, 0.5)
    assert [(d.confidence, tp) for d, tp in flagged] == [(0.9, True), (0.8, False), (0.7, True)]


def test_match_takes_best_overlap():
    gts = [GroundTruthSpan("a", 0, 0.0, 4.0), GroundTruthSpan("a", 0, 1.0, 3.0)]
    flagged = match_detections([det("a", 0, 1.0, 3.0, 0.9), det("a", 0, 0.0, 4.0, 0.5)], gts, 0.5)
    assert [tp for _, tp in flagged] == [True, True]


def test_match_ignores_other_videos_and_classes():
    gts = [GroundTruthSpan("a", 0, 0.0, 2.0)]
    flagged = match_detections([det("b", 0, 0.0, 2.0, 0.9), det("a", 1, 0.0, 2.0, 0.8)], gts, 0.1)
    assert [tp for _, tp in flagged] == [False, False]


def test_match_is_independent_of_input_order():
    rng = random.Random(3)
    gts = [GroundTruthSpan("a", 0, float(s), float(s) + 2.0) for s in range(0, 20, 3)]
    dets = [det("a", 0, float(s) / 2.0, float(s) / 2.0 + 2.0, round(0.05 * s, 2)) for s in range(1, 18)]
    expected = match_detections(dets, gts, 0.3)
    for _ in range(10):
        shuffled = list(dets)
        rng.shuffle(shuffled)
        assert match_detections(shuffled, gts, 0.3) == expected


# =====================================================================
# TESTS FOR AVERAGE PRECISION
# =====================================================================


def test_average_precision_examples():
    assert average_precision([True, False, True], 2) == pytest.approx(0.8333333333)
    assert average_precision([True, True], 4) == pytest.approx(0.5)
    assert average_precision([], 3) == 0.0
    assert average_precision([True], 0) is None


def test_trailing_false_positive_does_not_raise_ap():
    rng = np.random.default_rng(5)
    for _ in range(50):
        flags = list(rng.integers(0, 2, size=int(rng.integers(1, 15))).astype(bool))
        num_gt = sum(flags) + int(rng.integers(0, 3)) or 1
        assert average_precision(flags + [False], num_gt) <= average_precision(flags, num_gt)


# =====================================================================
# TESTS FOR DETECTION mAP
# =====================================================================


def test_perfect_detector_scores_one(manifest):
    report = map_at_iou(perfect(manifest), manifest)
    assert report.thresholds == list(DEFAULT_IOU_THRESHOLDS)
    assert all(value == 1.0 for value in report.mean_ap.values())
    assert report.matched["0.50"] == 3
    assert report.num_ground_truth == 3


def test_no_detections_scores_zero(manifest):
    report = map_at_iou([], manifest)
    assert all(value == 0.0 for value in report.mean_ap.values())


def test_half_the_classes_detected(manifest):
    dets = [d for d in perfect(manifest) if d.class_id == 0]
    report = map_at_iou(dets, manifest, [0.5])
    assert report.per_class_ap["0.50"] == {0: 1.0, 1: 0.0}
    assert report.map_at(0.5) == 0.5


def test_map_decreases_with_threshold(manifest):
    dets = [det("a", 0, 0.0, 1.5, 0.9), det("a", 0, 4.0, 6.0, 0.8), det("b", 1, 1.0, 3.0, 0.7)]
    report = map_at_iou(dets, manifest, [0.1, 0.5, 0.7, 0.9])
    values = [report.mean_ap[k] for k in ("0.10", "0.50", "0.70", "0.90")]
    assert values == sorted(values, reverse=True)
    assert values[0] == 1.0 and values[-1] < 1.0


def test_map_rejects_unknown_video_and_class(manifest):
    with pytest.raises(InputError):
        map_at_iou([det("zzz", 0, 0.0, 1.0, 0.5)], manifest)
    with pytest.raises(InputError):
        map_at_iou([det("a", 5, 0.0, 1.0, 0.5)], manifest)


def test_map_needs_ground_truth():
    with pytest.raises(InputError):
        map_at_iou([], make_manifest([video("a", [0])]))


# =====================================================================
# TESTS FOR CLASSIFICATION METRICS
# =====================================================================


def test_classification_map_of_indicators(manifest):
    scores = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}
    assert classification_map(scores, manifest) == 1.0
    assert classification_accuracy(scores, manifest) == 1.0


def test_classification_map_inverted(manifest):
    scores = {"a": np.array([0.0, 1.0]), "b": np.array([1.0, 0.0])}
    assert classification_map(scores, manifest) == pytest.approx(0.5)
    assert classification_accuracy(scores, manifest) == 0.0


def test_classification_map_needs_every_video(manifest):
    with pytest.raises(InputError):
        classification_map({"a": np.array([1.0, 0.0])}, manifest)


def test_sample_points_are_bin_midpoints():
    record = make_manifest([video("a", [0], num_segments=4, segment_duration=0.5)]).videos[0]
    np.testing.assert_allclose(sample_points(record, 4), [0.25, 0.75, 1.25, 1.75])


def test_per_frame_map_perfect():
    manifest = make_manifest([video("a", [0], [(0, 0.0, 5.0)])], class_names=("jump",))
    scores = (np.arange(10) < 5).astype(float).reshape(-1, 1)
    assert per_frame_map(lambda record: scores, manifest) == 1.0


def test_per_frame_map_anti_correlated():
    manifest = make_manifest([video("a", [0], [(0, 0.0, 5.0)])], class_names=("jump",))
    scores = (np.arange(10) >= 5).astype(float).reshape(-1, 1)
    expected = sum(j / (13 + j) for j in range(1, 13)) / 12
    assert per_frame_map(lambda record: scores, manifest) == pytest.approx(expected)


# =====================================================================
# TESTS FOR REPORTS
# =====================================================================


def test_format_report(manifest):
    report = evaluate_prediction(
        perfect(manifest),
        manifest,
        [0.1, 0.5],
        video_scores={"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])},
    )
    text = format_report(report, manifest.class_names)
    lines = text.splitlines()
    assert lines[0].split() == ["class", "@0.10", "@0.50"]
    assert lines[1].split() == ["jump", "1.000", "1.000"]
    assert lines[3].split() == ["mAP", "1.000", "1.000"]
    assert "video classification mAP: 1.000" in text
    assert "per-frame mAP" not in text


def test_write_report_csv(manifest, tmp_path):
    report = map_at_iou(perfect(manifest), manifest, [0.5])
    path = write_report_csv(tmp_path / "report.csv", report, manifest.class_names)
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    assert rows == [
        ["iou", "class", "ap"],
        ["0.50", "jump", "1.000000"],
        ["0.50", "throw", "1.000000"],
        ["0.50", "mAP", "1.000000"],
    ]


def test_evaluate_prediction_needs_segment_scores_for_every_video(manifest):
    with pytest.raises(InputError):
        evaluate_prediction(perfect(manifest), manifest, segment_scores={"a": np.zeros((10, 2))})


def test_map_is_monotone_on_random_separated_instances():
    rng = np.random.default_rng(21)
    thresholds = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
    for _ in range(50):
        videos, dets = [], []
        for v in range(2):
            gts = [(int(rng.integers(2)), 10.0 * i, 10.0 * i + 2.0) for i in range(5)]
            videos.append(video(f"v{v}", sorted({c for c, _, _ in gts}), gts, num_segments=50))
            for _ in range(int(rng.integers(1, 12))):
                start = 10.0 * int(rng.integers(5)) + float(rng.uniform(-1.0, 2.0))
                end = start + float(rng.uniform(0.5, 3.0))
                dets.append(det(f"v{v}", int(rng.integers(2)), start, end, float(rng.uniform())))
        report = map_at_iou(dets, make_manifest(videos), thresholds)
        values = [report.map_at(t) for t in thresholds]
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))


def exhaustive_flags(dets, gts, threshold):
    """
    Enumerate every one-to-one assignment of ranked detections to ground truths
    and keep the one whose per-detection (matched, tIoU) sequence is largest.
    """
    ranked = sorted(dets, key=lambda d: (-d.confidence, d.start, d.class_id, d.video_id))
    best = None

    def extend(position, used, key):
        nonlocal best
        if position == len(ranked):
            if best is None or key > best:
                best = key
            return
        d = ranked[position]
        extend(position + 1, used, key + ((0, 0.0),))
        for index, gt in enumerate(gts):
            if index in used or (gt.video_id, gt.class_id) != (d.video_id, d.class_id):
                continue
            overlap = tiou((d.start, d.end), (gt.start, gt.end))
            if overlap >= threshold:
                extend(position + 1, used | {index}, key + ((1, overlap),))

    extend(0, frozenset(), ())
    return [bool(matched) for matched, _ in best]


def test_match_agrees_with_exhaustive_assignment():
    rng = np.random.default_rng(33)
    for _ in range(200):
        gts = []
        for _ in range(int(rng.integers(1, 5))):
            start = float(rng.uniform(0.0, 8.0))
            gts.append(GroundTruthSpan("a", int(rng.integers(2)), start, start + float(rng.uniform(0.5, 3.0))))
        dets = []
        for confidence in rng.permutation(6)[: int(rng.integers(1, 7))]:
            start = float(rng.uniform(0.0, 8.0))
            end = start + float(rng.uniform(0.5, 3.0))
            dets.append(det("a", int(rng.integers(2)), start, end, float(confidence) / 10.0))
        threshold = float(rng.choice([0.1, 0.3, 0.5]))
        flagged = match_detections(dets, gts, threshold)
        assert [tp for _, tp in flagged] == exhaustive_flags(dets, gts, threshold)
