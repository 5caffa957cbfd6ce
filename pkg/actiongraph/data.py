# Dataset manifests, AGF1 feature files and the synthetic dataset generator
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import yaml

from .errors import DataError, FormatError, InputError, SchemaError, SpecError, TruncationError
from .schemas import DatasetManifest, SynthSpec, VideoRecord, validated

logger = logging.getLogger(__name__)

MAGIC = b"AGF1"
HEADER = struct.Struct("<4sQQ")
PathLike = Union[str, Path]


# =====================================================================
# AGF1 FEATURE FILES
# =====================================================================


def write_feature_file(path: PathLike, features: np.ndarray) -> None:
    """
    Magic "AGF1", u64 rows, u64 cols (little endian), then rows*cols <f4 values.
    """
    values = np.ascontiguousarray(features, dtype="<f4")
    if values.ndim != 2:
        raise FormatError(f"feature matrix must be 2-D, got shape {values.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(HEADER.pack(MAGIC, values.shape[0], values.shape[1]))
        handle.write(values.tobytes())


def read_feature_file(path: PathLike) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise InputError(f"feature file {path} does not exist") from exc
    if len(raw) < HEADER.size:
        raise TruncationError(f"{path}: {len(raw)} bytes is shorter than the AGF1 header")
    magic, rows, cols = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    payload = len(raw) - HEADER.size
    expected = rows * cols * 4
    if payload != expected:
        raise TruncationError(
            f"{path}: header says {rows}x{cols} ({expected} bytes), payload has {payload} bytes"
        )
    values = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=HEADER.size).reshape(rows, cols)
    if np.isnan(values).any():
        raise DataError(f"{path}: feature matrix contains NaN entries")
    return values.astype(np.float64)


class FeatureCache:
    """
    Read-once cache of feature matrices keyed by path.
    """

    def __init__(self):
        self._store: Dict[str, np.ndarray] = {}

    def get(self, path: PathLike) -> np.ndarray:
        key = str(path)
        if key not in self._store:
            self._store[key] = read_feature_file(key)
        return self._store[key]


# =====================================================================
# MANIFESTS
# =====================================================================


def load_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise InputError(f"manifest {path} does not exist") from exc
    except yaml.YAMLError as exc:
        raise SchemaError(f"manifest {path} is not valid YAML: {exc}") from exc
    manifest = validated(DatasetManifest, data, f"manifest {path}")
    return manifest.with_base_dir(path.parent)


def save_manifest(manifest: DatasetManifest, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(manifest.model_dump(mode="json"), sort_keys=False))
    return path


# =====================================================================
# SYNTHETIC DATASETS
# =====================================================================


@dataclass
class SynthResult:
    train: DatasetManifest
    test: DatasetManifest
    train_path: Path
    test_path: Path
    prototypes: np.ndarray
    background_prototypes: np.ndarray


def _sample_directions(rng, count: int, dim: int, max_cosine: float, attempts: int = 2000) -> np.ndarray:
    accepted: List[np.ndarray] = []
    for _ in range(count):
        for _ in range(attempts):
            candidate = rng.standard_normal(dim)
            candidate /= np.linalg.norm(candidate)
            if all(float(candidate @ other) < max_cosine for other in accepted):
                accepted.append(candidate)
                break
        else:
            raise SpecError(
                f"could not draw {count} directions in {dim} dims with pairwise cosine < {max_cosine}"
            )
    return np.stack(accepted)


def _check_feasible(spec: SynthSpec) -> None:
    min_segments = spec.segments_range[0]
    max_instances = spec.action_instances_range[1]
    max_length = spec.action_length_range[1]
    if max_length > min_segments:
        raise SpecError(f"action length up to {max_length} exceeds the minimum video length {min_segments}")
    # instances are separated by at least one background segment
    needed = max_instances * max_length + (max_instances - 1)
    if needed > min_segments:
        raise SpecError(
            f"{max_instances} instances of up to {max_length} segments need {needed} segments, "
            f"videos may have only {min_segments}"
        )


def _place_runs(rng, length: int, run_lengths: np.ndarray) -> List[Tuple[int, int]]:
    free = length - int(run_lengths.sum()) - (len(run_lengths) - 1)
    cuts = np.sort(rng.integers(0, free + 1, size=len(run_lengths)))
    gaps = np.diff(np.concatenate([[0], cuts, [free]]))
    runs = []
    cursor = int(gaps[0])
    for i, run in enumerate(run_lengths):
        runs.append((cursor, cursor + int(run)))
        cursor += int(run) + 1 + int(gaps[i + 1])
    return runs


def _synth_video(rng, spec: SynthSpec, primary: int, prototypes, backgrounds):
    low, high = spec.segments_range
    length = int(rng.integers(low, high + 1))
    n_instances = int(rng.integers(spec.action_instances_range[0], spec.action_instances_range[1] + 1))
    classes = [primary]
    if n_instances >= 2 and spec.num_classes > 1 and rng.random() < spec.multi_label_prob:
        others = [c for c in range(spec.num_classes) if c != primary]
        classes.append(int(rng.choice(others)))
    instance_classes = classes + [int(rng.choice(classes)) for _ in range(n_instances - len(classes))]
    run_lengths = rng.integers(spec.action_length_range[0], spec.action_length_range[1] + 1, size=n_instances)
    runs = _place_runs(rng, length, run_lengths)

    modes = rng.integers(0, spec.background_modes, size=length)
    features = backgrounds[modes].copy()
    for cls, (start, end) in zip(instance_classes, runs):
        features[start:end] = prototypes[cls]
    if spec.noise_sigma > 0:
        features = features + spec.noise_sigma * rng.standard_normal(features.shape)
    ground_truth = [
        {"label": cls, "start": start * spec.segment_duration, "end": end * spec.segment_duration}
        for cls, (start, end) in zip(instance_classes, runs)
    ]
    return features, sorted(set(instance_classes)), ground_truth


def synth_generate(spec: SynthSpec, out_dir: PathLike) -> SynthResult:
    """
    Write a train/test pair of manifests plus AGF1 files under `out_dir`.
    """
    _check_feasible(spec)
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    directions = _sample_directions(
        rng, spec.num_classes + spec.background_modes, spec.feature_dim, spec.max_prototype_cosine
    )
    # prototypes are float32-exact so noiseless segments survive the AGF1 round trip unchanged
    scaled = (spec.cluster_separation * directions).astype(np.float32).astype(np.float64)
    prototypes, backgrounds = scaled[: spec.num_classes], scaled[spec.num_classes :]
    class_names = [f"action_{i:02d}" for i in range(spec.num_classes)]

    manifests = {}
    for split in ("train", "test"):
        records = []
        for cls in spec.primary_classes(split):
            video_id = f"{split}_{len(records):04d}"
            features, labels, ground_truth = _synth_video(rng, spec, cls, prototypes, backgrounds)
            feature_path = f"features/{video_id}.agf"
            write_feature_file(out_dir / feature_path, features)
            records.append(
                VideoRecord(
                    video_id=video_id,
                    feature_path=feature_path,
                    num_segments=features.shape[0],
                    segment_duration=spec.segment_duration,
                    labels=labels,
                    ground_truth=ground_truth,
                )
            )
        manifests[split] = DatasetManifest(split=split, class_names=class_names, videos=records)
        manifests[split].with_base_dir(out_dir)

    train_path = save_manifest(manifests["train"], out_dir / "train.yaml")
    test_path = save_manifest(manifests["test"], out_dir / "test.yaml")
    logger.info(
        "synthesized %d train / %d test videos (%d classes) in %s",
        len(manifests["train"].videos),
        len(manifests["test"].videos),
        spec.num_classes,
        out_dir,
    )
    return SynthResult(
        train=manifests["train"],
        test=manifests["test"],
        train_path=train_path,
        test_path=test_path,
        prototypes=prototypes,
        background_prototypes=backgrounds,
    )
