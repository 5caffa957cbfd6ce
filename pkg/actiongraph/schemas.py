# Pydantic models
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PrivateAttr,
    ValidationError,
    field_validator,
    model_validator,
)
import yaml

from .errors import SchemaError

DEFAULT_SEGMENT_DURATION = 0.64
MANIFEST_VERSION = 1


# --- Model / Training Schemas ---
class DStrategy(BaseModel):
    """
    MIL pooling denominator: a fixed d, or a fresh uniform draw from `choices`
    at every training iteration.
    """

    kind: Literal["fixed", "random"] = "fixed"
    d: int = Field(default=8, ge=1)
    choices: List[int] = Field(default_factory=lambda: [1, 2, 4, 8])

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="before")
    @classmethod
    def _shorthand(cls, value):
        # "8" / 8 -> fixed(8); "random" -> random_choice({1,2,4,8})
        if isinstance(value, int):
            return {"kind": "fixed", "d": value}
        if isinstance(value, str):
            if value == "random":
                return {"kind": "random"}
            return {"kind": "fixed", "d": int(value)}
        return value

    @field_validator("choices")
    @classmethod
    def _choices_positive(cls, value):
        if not value or any(d < 1 for d in value):
            raise ValueError("random d choices must be a nonempty list of positive counts")
        return value

    def label(self) -> str:
        return "random" if self.kind == "random" else str(self.d)


class ModelConfig(BaseModel):
    num_classes: int = Field(ge=1)
    feature_dim: int = Field(default=2048, ge=1)
    hidden_dim: int = Field(default=1024, ge=1)
    graph_mode: Literal["learned", "identity"] = "learned"
    casl_target: Literal["phi_output", "graph_output", "off"] = "phi_output"
    attention_axis: Literal["time", "class"] = "time"
    use_l1: bool = True
    use_mil: bool = True
    dropout_p: float = Field(default=0.5, ge=0.0, lt=1.0)
    d_strategy: DStrategy = Field(default_factory=DStrategy)
    wide_hidden: bool = False
    signed_row_norm: bool = False
    signed_edge_drop: bool = False
    lambdas: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def _variant_consistency(self):
        if self.wide_hidden and self.graph_mode != "identity":
            raise ValueError("wide_hidden is the FC-CASL 2048 variant and needs graph_mode=identity")
        if self.graph_mode == "identity" and self.casl_target == "phi_output":
            raise ValueError("graph_mode=identity has no phi layer; use casl_target graph_output or off")
        return self

    @property
    def effective_hidden_dim(self) -> int:
        return self.hidden_dim * 2 if self.wide_hidden else self.hidden_dim

    @property
    def casl_enabled(self) -> bool:
        return self.casl_target != "off"


class TrainConfig(BaseModel):
    epochs: int = Field(default=250, ge=0)
    learning_rate: float = Field(default=0.001, gt=0.0)
    batch_size: int = Field(default=32, ge=1)
    pair_strategy: Literal["all_pairs", "half_fixed"] = "all_pairs"
    checkpoint_every: int = Field(default=50, ge=0)
    seed: int = 0
    model: ModelConfig

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def _pairs_possible(self):
        if self.model.casl_enabled and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when CASL is enabled")
        if self.pair_strategy == "half_fixed" and self.batch_size < 4:
            raise ValueError("half_fixed pairing needs batch_size >= 4")
        return self


# --- Dataset Schemas ---
class GroundTruthInstance(BaseModel):
    label: int
    start: float
    end: float

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def _ordered(self):
        if not self.start < self.end:
            raise ValueError(f"ground-truth interval [{self.start}, {self.end}] needs start < end")
        return self


class VideoRecord(BaseModel):
    video_id: str
    feature_path: str
    num_segments: int = Field(ge=1)
    segment_duration: float = Field(default=DEFAULT_SEGMENT_DURATION, gt=0.0)
    labels: List[int]
    ground_truth: List[GroundTruthInstance] = Field(default_factory=list)

    model_config = ConfigDict(extra="forbid")

    @property
    def duration(self) -> float:
        return self.num_segments * self.segment_duration


class LabeledVideo(BaseModel):
    """
    Label-only view of a video handed to the trainer; carries no intervals.
    """

    video_id: str
    feature_path: str
    num_segments: int
    labels: Tuple[int, ...]

    model_config = ConfigDict(frozen=True)


class DatasetManifest(BaseModel):
    version: int = MANIFEST_VERSION
    split: Literal["train", "test"]
    class_names: List[str]
    videos: List[VideoRecord]

    model_config = ConfigDict(extra="forbid")

    _base_dir: Path = PrivateAttr(default_factory=Path)

    @field_validator("version")
    @classmethod
    def _known_version(cls, value):
        if value != MANIFEST_VERSION:
            raise ValueError(f"manifest version {value} is not supported (expected {MANIFEST_VERSION})")
        return value

    @model_validator(mode="before")
    @classmethod
    def _resolve_class_names(cls, data):
        # Records may cite classes by name or by index; names become indices.
        if not isinstance(data, dict):
            return data
        names = list(data.get("class_names") or [])
        index = {name: i for i, name in enumerate(names)}

        def resolve(label):
            if label is None or isinstance(label, bool):
                raise ValueError(f"invalid class reference {label!r}")
            if isinstance(label, str) and not label.lstrip("-").isdigit():
                if label not in index:
                    raise ValueError(f"unknown class name {label!r}")
                return index[label]
            return int(label)

        videos = []
        for record in data.get("videos") or []:
            if isinstance(record, dict):
                record = dict(record)
                record["labels"] = [resolve(label) for label in record.get("labels", [])]
                record["ground_truth"] = [
                    {**gt, "label": resolve(gt.get("label"))} if isinstance(gt, dict) else gt
                    for gt in record.get("ground_truth", [])
                ]
            videos.append(record)
        return {**data, "videos": videos}

    @model_validator(mode="after")
    def _check_records(self):
        num_classes = len(self.class_names)
        if len(set(self.class_names)) != num_classes:
            raise ValueError("class_names must be unique")
        seen = set()
        for record in self.videos:
            if record.video_id in seen:
                raise ValueError(f"duplicate video_id {record.video_id!r}")
            seen.add(record.video_id)
            cited = list(record.labels) + [gt.label for gt in record.ground_truth]
            for label in cited:
                if not 0 <= label < num_classes:
                    raise ValueError(
                        f"video {record.video_id!r} cites class {label}, only {num_classes} classes"
                    )
            for gt in record.ground_truth:
                if gt.start < 0 or gt.end > record.duration + 1e-9:
                    raise ValueError(
                        f"video {record.video_id!r}: interval [{gt.start}, {gt.end}] "
                        f"outside [0, {record.duration}]"
                    )
        return self

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def base_dir(self) -> Path:
        return self._base_dir

    def with_base_dir(self, base_dir: Path) -> "DatasetManifest":
        self._base_dir = Path(base_dir)
        return self

    def feature_file(self, record: VideoRecord) -> Path:
        path = Path(record.feature_path)
        return path if path.is_absolute() else self._base_dir / path

    def record(self, video_id: str) -> VideoRecord:
        for record in self.videos:
            if record.video_id == video_id:
                return record
        raise KeyError(video_id)

    def training_view(self) -> List[LabeledVideo]:
        return [
            LabeledVideo(
                video_id=record.video_id,
                feature_path=str(self.feature_file(record)),
                num_segments=record.num_segments,
                labels=tuple(sorted(set(record.labels))),
            )
            for record in self.videos
        ]


class SynthSpec(BaseModel):
    num_classes: int = Field(default=4, ge=1)
    videos_per_class: int = Field(default=10, ge=1)
    test_videos_per_class: int = Field(default=5, ge=0)
    # totals spread round-robin over classes; they replace the per-class counts when set
    train_videos: Optional[int] = Field(default=None, ge=1)
    test_videos: Optional[int] = Field(default=None, ge=0)
    segments_range: Tuple[int, int] = (20, 60)
    action_instances_range: Tuple[int, int] = (1, 3)
    action_length_range: Tuple[int, int] = (2, 6)
    feature_dim: int = Field(default=2048, ge=2)
    cluster_separation: float = Field(default=4.0, gt=0.0)
    noise_sigma: float = Field(default=0.3, ge=0.0)
    background_modes: int = Field(default=3, ge=1)
    multi_label_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    max_prototype_cosine: float = Field(default=0.3, gt=-1.0, le=1.0)
    segment_duration: float = Field(default=DEFAULT_SEGMENT_DURATION, gt=0.0)
    seed: int = 0

    model_config = ConfigDict(extra="forbid")

    @field_validator("segments_range", "action_instances_range", "action_length_range")
    @classmethod
    def _ordered_range(cls, value):
        low, high = value
        if low < 1 or high < low:
            raise ValueError(f"range {value} must satisfy 1 <= min <= max")
        return value

    def primary_classes(self, split: Literal["train", "test"]) -> List[int]:
        """
        Primary class of every video of `split`, grouped by class.
        """
        total = self.train_videos if split == "train" else self.test_videos
        if total is None:
            per_class = self.videos_per_class if split == "train" else self.test_videos_per_class
            return [cls for cls in range(self.num_classes) for _ in range(per_class)]
        return sorted(i % self.num_classes for i in range(total))


# --- Output Schemas ---
class Detection(BaseModel):
    video_id: str
    class_id: int = Field(ge=0)
    start: float
    end: float
    confidence: float

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.start < self.end:
            raise ValueError(f"detection [{self.start}, {self.end}] needs start < end")
        return self


class EvalReport(BaseModel):
    thresholds: List[float]
    per_class_ap: Dict[str, Dict[int, float]] = Field(default_factory=dict)
    mean_ap: Dict[str, float] = Field(default_factory=dict)
    matched: Dict[str, int] = Field(default_factory=dict)
    classification_map: Optional[float] = None
    per_frame_map: Optional[float] = None
    num_detections: int = 0
    num_ground_truth: int = 0

    def map_at(self, threshold: float) -> float:
        return self.mean_ap[threshold_key(threshold)]


class RunConfig(BaseModel):
    subcommand: str
    manifest: Optional[Path] = None
    checkpoint: Optional[Path] = None
    out_dir: Optional[Path] = None
    overrides: Dict[str, str] = Field(default_factory=dict)
    verbosity: int = 0

    model_config = ConfigDict(extra="forbid")


def threshold_key(threshold: float) -> str:
    return f"{threshold:.2f}"


def validated(model_cls, data, what: str):
    """
    Build a pydantic model, turning ValidationError into SchemaError.
    """
    try:
        return model_cls.model_validate(data)
    except ValidationError as exc:
        raise SchemaError(f"invalid {what}: {exc}") from exc


def apply_overrides(config: BaseModel, overrides: Dict[str, str]) -> BaseModel:
    """
    Apply `key=value` overrides (dotted keys reach nested models) and revalidate.

    Unknown keys are rejected, values are parsed as YAML scalars.
    """
    data = config.model_dump()
    for key, raw in overrides.items():
        target = data
        model = type(config)
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in model.model_fields or not isinstance(target.get(part), dict):
                raise SchemaError(f"unknown config key {key!r}")
            model = model.model_fields[part].annotation
            target = target[part]
        leaf = parts[-1]
        if leaf not in model.model_fields:
            raise SchemaError(f"unknown config key {key!r}")
        target[leaf] = yaml.safe_load(raw) if isinstance(raw, str) else raw
    return validated(type(config), data, "configuration")
