# Video classification and temporal detections from segment scores
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import numcore as nc
from .data import FeatureCache
from .errors import EmptyVideoError, FormatError, InputError
from .graph import dump_graph
from .losses import compute_k
from .model import ModelParams, forward
from .schemas import DatasetManifest, Detection, DStrategy, ModelConfig

logger = logging.getLogger(__name__)

TANH_CODOMAIN = (-1.0, 1.0)
IGNORED_RANGE = 0.05
DETECTION_FIELDS = ["video_id", "class", "start", "end", "confidence"]


def classify_video(scores: np.ndarray, d: int) -> np.ndarray:
    """
    Per-class mean of the top-k segment scores, k = max(1, l // d).
    """
    scores = np.asarray(scores, dtype=nc.DTYPE)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise EmptyVideoError("classify_video needs at least one segment")
    k = compute_k(scores.shape[0], d)
    return nc.topk_mean_columns(nc.constant(scores), k).value[0]


def detection_threshold(
    codomain: Tuple[float, float] = TANH_CODOMAIN, fraction: float = IGNORED_RANGE
) -> float:
    """
    Threshold that ignores the lowest `fraction` of the score range (-0.9 for tanh).
    """
    low, high = codomain
    return low + fraction * (high - low)


def _runs(marked: np.ndarray) -> List[Tuple[int, int]]:
    padded = np.concatenate([[0], marked.astype(np.int8), [0]])
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return list(zip(starts.tolist(), ends.tolist()))


def detect(
    scores: np.ndarray,
    video_id: str,
    segment_duration: float,
    threshold: Optional[float] = None,
) -> List[Detection]:
    """
    Merge consecutive above-threshold segments of each class into detections.
    """
    scores = np.asarray(scores, dtype=nc.DTYPE)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise EmptyVideoError("detect needs at least one segment")
    threshold = detection_threshold() if threshold is None else threshold
    detections = []
    for cls in range(scores.shape[1]):
        column = scores[:, cls]
        for start, end in _runs(column > threshold):
            detections.append(
                Detection(
                    video_id=video_id,
                    class_id=cls,
                    start=start * segment_duration,
                    end=end * segment_duration,
                    confidence=float(column[start:end].max()),
                )
            )
    return detections


def filter_by_classification(
    detections: Sequence[Detection], video_scores: np.ndarray, top: int
) -> List[Detection]:
    """
    Keep detections whose class is among the `top` highest video-level scores.
    """
    ranked = np.argsort(-np.asarray(video_scores), kind="stable")[:top]
    keep = set(int(c) for c in ranked)
    return [det for det in detections if det.class_id in keep]


# =====================================================================
# DETECTION FILES
# =====================================================================


def write_detections_csv(path: Union[str, Path], detections: Sequence[Detection]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(DETECTION_FIELDS)
        for det in detections:
            writer.writerow([det.video_id, det.class_id, repr(det.start), repr(det.end), repr(det.confidence)])
    return path


def write_detections_json(path: Union[str, Path], detections: Sequence[Detection]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"detections": [det.model_dump() for det in detections]}
    path.write_text(json.dumps(payload, indent=1))
    return path


def read_detections(path: Union[str, Path]) -> List[Detection]:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise InputError(f"detections file {path} does not exist") from exc
    try:
        if path.suffix == ".json":
            return [Detection.model_validate(item) for item in json.loads(text)["detections"]]
        rows = csv.DictReader(text.splitlines())
        if rows.fieldnames != DETECTION_FIELDS:
            raise FormatError(f"{path}: expected header {','.join(DETECTION_FIELDS)}")
        return [
            Detection(
                video_id=row["video_id"],
                class_id=int(row["class"]),
                start=float(row["start"]),
                end=float(row["end"]),
                confidence=float(row["confidence"]),
            )
            for row in rows
        ]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: malformed detections: {exc}") from exc


def write_video_scores_csv(
    path: Union[str, Path], video_scores: Dict[str, np.ndarray], class_names: Sequence[str]
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["video_id", *class_names])
        for video_id, scores in video_scores.items():
            writer.writerow([video_id, *(repr(float(s)) for s in scores)])
    return path


def read_video_scores_csv(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    try:
        with open(path, newline="") as handle:
            rows = list(csv.reader(handle))
    except FileNotFoundError as exc:
        raise InputError(f"video scores file {path} does not exist") from exc
    try:
        return {row[0]: np.array([float(v) for v in row[1:]]) for row in rows[1:]}
    except ValueError as exc:
        raise FormatError(f"{path}: malformed video scores: {exc}") from exc


def read_segment_scores(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    try:
        with np.load(path) as archive:
            return {name: archive[name] for name in archive.files}
    except FileNotFoundError as exc:
        raise InputError(f"segment scores file {path} does not exist") from exc


# =====================================================================
# WHOLE-MANIFEST PREDICTION
# =====================================================================


@dataclass
class Prediction:
    detections: List[Detection]
    video_scores: Dict[str, np.ndarray]
    segment_scores: Dict[str, np.ndarray]


def inference_d(strategy: DStrategy) -> int:
    """
    Pooling denominator at test time; a random-d model pools with the default d.
    """
    return strategy.d if strategy.kind == "fixed" else DStrategy().d


def predict_manifest(
    params: ModelParams,
    config: ModelConfig,
    manifest: DatasetManifest,
    d: Optional[int] = None,
    threshold: Optional[float] = None,
    class_filter: Optional[int] = None,
    features: Optional[Callable[[str], np.ndarray]] = None,
    graph_dir: Optional[Union[str, Path]] = None,
) -> Prediction:
    """
    Eval-mode scores, video classification and detections for every video of `manifest`.
    """
    features = features if features is not None else FeatureCache().get
    d = inference_d(config.d_strategy) if d is None else d
    prediction = Prediction(detections=[], video_scores={}, segment_scores={})
    for record in manifest.videos:
        outputs = forward(features(manifest.feature_file(record)), params, config, mode="eval")
        scores = outputs.scores.value
        video_scores = classify_video(scores, d)
        found = detect(scores, record.video_id, record.segment_duration, threshold)
        if class_filter is not None:
            found = filter_by_classification(found, video_scores, class_filter)
        if graph_dir is not None:
            dump_graph(outputs.affinity, graph_dir, record.video_id)
        prediction.segment_scores[record.video_id] = scores
        prediction.video_scores[record.video_id] = video_scores
        prediction.detections.extend(found)
    logger.info(
        "predicted %d detections over %d videos (d=%d)",
        len(prediction.detections),
        len(manifest.videos),
        d,
    )
    return prediction


def write_prediction(
    prediction: Prediction, out_dir: Union[str, Path], class_names: Sequence[str]
) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "detections": write_detections_csv(out_dir / "detections.csv", prediction.detections),
        "detections_json": write_detections_json(out_dir / "detections.json", prediction.detections),
        "video_scores": write_video_scores_csv(
            out_dir / "video_scores.csv", prediction.video_scores, class_names
        ),
        "segment_scores": out_dir / "segment_scores.npz",
    }
    np.savez(paths["segment_scores"], **prediction.segment_scores)
    return paths
