# tests/test_localize.py
import numpy as np
import pytest

from actiongraph.errors import EmptyVideoError, FormatError, InputError
from actiongraph.localize import (
    DETECTION_FIELDS,
    classify_video,
    detect,
    detection_threshold,
    filter_by_classification,
    inference_d,
    predict_manifest,
    read_detections,
    read_segment_scores,
    read_video_scores_csv,
    write_detections_csv,
    write_detections_json,
    write_prediction,
)
from actiongraph.model import init_params
from actiongraph.schemas import Detection, DStrategy


@pytest.fixture(name="detections")
def detections_fixture():
    return [
        Detection(video_id="v1", class_id=0, start=0.64, end=1.92, confidence=0.7312),
        Detection(video_id="v2", class_id=2, start=0.0, end=0.64, confidence=-0.1 / 3),
    ]


def brute_force_detect(column, duration, threshold):
    found, start = [], None
    for t, value in enumerate(list(column) + [-np.inf]):
        if value > threshold and start is None:
            start = t
        elif value <= threshold and start is not None:
            found.append((start * duration, t * duration, max(column[start:t])))
            start = None
    return found


# =====================================================================
# TESTS FOR CLASSIFICATION
# =====================================================================


def test_classify_video_top_k_mean():
    scores = np.array([[0.1, 0.9], [0.5, -0.2], [0.3, 0.4], [0.7, 0.0]])
    np.testing.assert_allclose(classify_video(scores, 2), [0.6, 0.65])
    np.testing.assert_allclose(classify_video(scores, 8), [0.7, 0.9])
    np.testing.assert_allclose(classify_video(scores, 1), scores.mean(axis=0))


def test_classify_empty_video():
    with pytest.raises(EmptyVideoError):
        classify_video(np.zeros((0, 3)), 8)


def test_inference_d():
    assert inference_d(DStrategy(d=2)) == 2
    assert inference_d(DStrategy.model_validate("random")) == 8


# =====================================================================
# TESTS FOR DETECTION
# =====================================================================


def test_detection_threshold():
    assert detection_threshold() == pytest.approx(-0.9)
    assert detection_threshold((0.0, 1.0)) == pytest.approx(0.05)


def test_detect_merges_runs():
    scores = np.array([[-0.95], [-0.5], [0.2], [-0.95], [0.1]])
    found = detect(scores, "v", 0.5)
    assert [(d.start, d.end, d.confidence) for d in found] == [(0.5, 1.5, 0.2), (2.0, 2.5, 0.1)]
    assert all(d.class_id == 0 and d.video_id == "v" for d in found)


def test_detect_threshold_is_strict():
    scores = np.array([[-0.9], [-0.9]])
    assert detect(scores, "v", 1.0, threshold=-0.9) == []


def test_detect_all_below_threshold():
    assert detect(np.full((6, 3), -0.99), "v", 0.64) == []


def test_detect_empty_video():
    with pytest.raises(EmptyVideoError):
        detect(np.zeros((0, 2)), "v", 1.0)


def test_detect_matches_brute_force():
    rng = np.random.default_rng(17)
    for _ in range(500):
        l, c = int(rng.integers(1, 31)), int(rng.integers(1, 6))
        scores = rng.uniform(-1.0, 1.0, size=(l, c))
        threshold = float(rng.uniform(-1.0, 1.0))
        found = detect(scores, "v", 0.64, threshold)
        for cls in range(c):
            expected = brute_force_detect(scores[:, cls], 0.64, threshold)
            got = [(d.start, d.end, d.confidence) for d in found if d.class_id == cls]
            assert got == expected


def test_filter_by_classification(detections):
    video_scores = np.array([0.2, -0.5, 0.9])
    kept = filter_by_classification(detections, video_scores, 1)
    assert [d.class_id for d in kept] == [2]
    assert filter_by_classification(detections, video_scores, 2) == detections


# =====================================================================
# TESTS FOR FILES
# =====================================================================


def test_detections_csv_read_back(tmp_path, detections):
    path = write_detections_csv(tmp_path / "d.csv", detections)
    assert path.read_text().splitlines()[0] == ",".join(DETECTION_FIELDS)
    assert read_detections(path) == detections


def test_detections_json_read_back(tmp_path, detections):
    path = write_detections_json(tmp_path / "d.json", detections)
    assert read_detections(path) == detections


def test_detections_bad_header(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("video,cls,start,end,score\nv1,0,0.0,1.0,0.5\n")
    with pytest.raises(FormatError):
        read_detections(path)


def test_detections_malformed_row(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text(",".join(DETECTION_FIELDS) + "\nv1,zero,0.0,1.0,0.5\n")
    with pytest.raises(FormatError):
        read_detections(path)


def test_detections_missing_file(tmp_path):
    with pytest.raises(InputError):
        read_detections(tmp_path / "absent.csv")


# =====================================================================
# TESTS FOR WHOLE-MANIFEST PREDICTION
# =====================================================================


def test_predict_manifest(small_dataset, model_config, tmp_path):
    params = init_params(model_config)
    manifest = small_dataset.test
    prediction = predict_manifest(params, model_config, manifest, graph_dir=tmp_path / "graphs")
    assert set(prediction.segment_scores) == {r.video_id for r in manifest.videos}
    for record in manifest.videos:
        scores = prediction.segment_scores[record.video_id]
        assert scores.shape == (record.num_segments, 3)
        np.testing.assert_allclose(prediction.video_scores[record.video_id], classify_video(scores, 8))
        assert (tmp_path / "graphs" / f"{record.video_id}_normalized.csv").exists()
    for det in prediction.detections:
        record = manifest.record(det.video_id)
        assert 0.0 <= det.start < det.end <= record.duration + 1e-9
        assert det.confidence > -0.9


def test_predict_manifest_class_filter(small_dataset, model_config):
    params = init_params(model_config)
    prediction = predict_manifest(params, model_config, small_dataset.test, class_filter=1)
    for det in prediction.detections:
        assert det.class_id == int(np.argmax(prediction.video_scores[det.video_id]))


def test_write_prediction(small_dataset, model_config, tmp_path):
    params = init_params(model_config)
    manifest = small_dataset.test
    prediction = predict_manifest(params, model_config, manifest)
    paths = write_prediction(prediction, tmp_path / "out", manifest.class_names)
    assert read_detections(paths["detections"]) == read_detections(paths["detections_json"])
    assert len(read_detections(paths["detections"])) == len(prediction.detections)
    scores = read_video_scores_csv(paths["video_scores"])
    for video_id, values in prediction.video_scores.items():
        np.testing.assert_array_equal(scores[video_id], values)
    segments = read_segment_scores(paths["segment_scores"])
    for video_id, values in prediction.segment_scores.items():
        np.testing.assert_array_equal(segments[video_id], values)
