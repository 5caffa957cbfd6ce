"""
Command-line entry point.

    python -m actiongraph synth     --out DIR [--seed N] [--set key=value ...]
    python -m actiongraph train     --manifest train.yaml [--config C.yaml] [--out DIR]
    python -m actiongraph predict   --manifest test.yaml --checkpoint final.ckpt [--out DIR]
    python -m actiongraph eval      --detections detections.csv --manifest test.yaml
    python -m actiongraph gradcheck [--checkpoint CKPT] [--segments 8]
    python -m actiongraph ablate    --manifest train.yaml --test-manifest test.yaml --variants baseline,L1
    python -m actiongraph plot      --manifest test.yaml --video-id ID --detections NAME=PATH
    python -m actiongraph dump-graph --manifest test.yaml --checkpoint final.ckpt

Errors are reported as one JSON line on stderr and a nonzero exit code.
"""

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import settings
from .checkpoint import load_checkpoint
from .data import FeatureCache, load_manifest, synth_generate
from .errors import ActionGraphError, GradcheckError, InputError, SchemaError
from .evaluate import (
    DEFAULT_IOU_THRESHOLDS,
    evaluate_prediction,
    format_report,
    write_report_csv,
)
from .graph import dump_graph
from .localize import (
    detection_threshold,
    predict_manifest,
    read_detections,
    read_segment_scores,
    read_video_scores_csv,
    write_prediction,
)
from .log import configure_logging
from .losses import total_loss
from .model import PARAM_NAMES, ModelParams, forward, init_params
from .numcore import gradcheck
from .plot import plot_timeline
from .schemas import (
    DatasetManifest,
    ModelConfig,
    RunConfig,
    SynthSpec,
    TrainConfig,
    apply_overrides,
    threshold_key,
    validated,
)
from .trainer import train

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4

# model overrides per ablation variant, applied over the base training config
FULL_GRAPH = {"model.graph_mode": "learned", "model.wide_hidden": False}
VARIANTS: Dict[str, Dict[str, object]] = {
    "baseline": {**FULL_GRAPH, "model.use_l1": False, "model.casl_target": "off"},
    "MCASL": {**FULL_GRAPH, "model.use_l1": False, "model.casl_target": "phi_output"},
    "L1": {**FULL_GRAPH, "model.use_l1": True, "model.casl_target": "off"},
    "L1+MCASL": {**FULL_GRAPH, "model.use_l1": True, "model.casl_target": "phi_output"},
    "FC-CASL-1024": {
        "model.graph_mode": "identity",
        "model.wide_hidden": False,
        "model.use_l1": False,
        "model.casl_target": "graph_output",
    },
    "FC-CASL-2048": {
        "model.graph_mode": "identity",
        "model.wide_hidden": True,
        "model.use_l1": False,
        "model.casl_target": "graph_output",
    },
    "CASL-Graph": {**FULL_GRAPH, "model.use_l1": True, "model.casl_target": "graph_output"},
}
for _d in ("1", "2", "4", "8", "random"):
    VARIANTS[f"d={_d}"] = {
        **VARIANTS["L1+MCASL"],
        "model.d_strategy": _d if _d == "random" else int(_d),
    }
DEFAULT_VARIANTS = ("baseline", "MCASL", "L1", "L1+MCASL")


# =====================================================================
# SHARED HELPERS
# =====================================================================


def parse_overrides(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise SchemaError(f"override {pair!r} is not of the form key=value")
        overrides[key.strip()] = value.strip()
    return overrides


def parse_thresholds(text: str) -> List[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise SchemaError(f"invalid IoU threshold list {text!r}") from exc
    if not values or any(not 0.0 < v <= 1.0 for v in values):
        raise SchemaError(f"IoU thresholds must lie in (0, 1], got {text!r}")
    return values


def read_yaml(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError as exc:
        raise InputError(f"config file {path} does not exist") from exc
    except yaml.YAMLError as exc:
        raise SchemaError(f"config file {path} is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise SchemaError(f"config file {path} must hold a mapping")
    return data


def flag_overrides(args: argparse.Namespace, mapping: Dict[str, str]) -> Dict[str, object]:
    """
    Config overrides from explicit flags; unset flags are left out.
    """
    return {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}


def _feature_dim(manifest: DatasetManifest, features) -> int:
    if not manifest.videos:
        raise InputError(f"{manifest.split} manifest has no videos")
    return int(features(manifest.feature_file(manifest.videos[0])).shape[1])


TRAIN_FLAGS = {
    "epochs": "epochs",
    "batch_size": "batch_size",
    "learning_rate": "learning_rate",
    "seed": "seed",
    "d": "model.d_strategy",
}


def build_train_config(
    args: argparse.Namespace, run: RunConfig, manifest: DatasetManifest, features
) -> TrainConfig:
    """
    Config file, then flags, then --set overrides; flags and overrides win.
    """
    data = read_yaml(args.config)
    model = dict(data.get("model") or {})
    model.setdefault("num_classes", manifest.num_classes)
    model.setdefault("feature_dim", _feature_dim(manifest, features))
    data["model"] = model
    config = validated(TrainConfig, data, "training configuration")
    config = apply_overrides(config, {**flag_overrides(args, TRAIN_FLAGS), **run.overrides})
    if config.model.num_classes != manifest.num_classes:
        raise SchemaError(
            f"model has {config.model.num_classes} classes, manifest has {manifest.num_classes}"
        )
    return config


def _slug(name: str) -> str:
    return name.replace("+", "_").replace("=", "_").replace("-", "_")


# =====================================================================
# SUBCOMMANDS
# =====================================================================


SYNTH_FLAGS = {
    "seed": "seed",
    "num_classes": "num_classes",
    "videos_per_class": "videos_per_class",
    "test_videos_per_class": "test_videos_per_class",
    "train_videos": "train_videos",
    "test_videos": "test_videos",
    "feature_dim": "feature_dim",
    "noise_sigma": "noise_sigma",
    "cluster_separation": "cluster_separation",
    "multi_label_prob": "multi_label_prob",
}


def cmd_synth(args: argparse.Namespace, run: RunConfig) -> int:
    spec = validated(SynthSpec, read_yaml(args.config), "synthetic dataset spec")
    spec = apply_overrides(spec, {**flag_overrides(args, SYNTH_FLAGS), **run.overrides})
    result = synth_generate(spec, run.out_dir)
    print(result.train_path)
    print(result.test_path)
    return 0


def cmd_train(args: argparse.Namespace, run: RunConfig) -> int:
    manifest = load_manifest(run.manifest)
    cache = FeatureCache()
    if args.resume is not None and args.config is None:
        _, config = load_checkpoint(args.resume)
        config = apply_overrides(config, {**flag_overrides(args, TRAIN_FLAGS), **run.overrides})
    else:
        config = build_train_config(args, run, manifest, cache.get)

    run.out_dir.mkdir(parents=True, exist_ok=True)
    (run.out_dir / "config.yaml").write_text(
        yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)
    )
    final = train(manifest.training_view(), config, run.out_dir, resume_from=args.resume, features=cache.get)

    if args.eval_manifest is not None:
        test = load_manifest(args.eval_manifest)
        state, _ = load_checkpoint(final)
        prediction = predict_manifest(state.params, config.model, test, features=FeatureCache().get)
        report = evaluate_prediction(
            prediction.detections, test, DEFAULT_IOU_THRESHOLDS, video_scores=prediction.video_scores
        )
        logger.info("evaluation on %s\n%s", args.eval_manifest, format_report(report, test.class_names))
    print(final)
    return 0


def cmd_predict(args: argparse.Namespace, run: RunConfig) -> int:
    manifest = load_manifest(run.manifest)
    state, config = load_checkpoint(run.checkpoint)
    threshold = args.threshold if args.threshold is not None else detection_threshold()
    prediction = predict_manifest(
        state.params,
        config.model,
        manifest,
        d=args.d,
        threshold=threshold,
        class_filter=args.class_filter,
        graph_dir=run.out_dir / "graphs" if args.dump_graphs else None,
    )
    paths = write_prediction(prediction, run.out_dir, manifest.class_names)
    print(paths["detections"])
    return 0


def cmd_eval(args: argparse.Namespace, run: RunConfig) -> int:
    manifest = load_manifest(run.manifest)
    detections = read_detections(args.detections)
    video_scores = read_video_scores_csv(args.video_scores) if args.video_scores else None
    segment_scores = None
    if args.per_frame:
        if not args.segment_scores:
            raise InputError("--per-frame needs --segment-scores")
        segment_scores = read_segment_scores(args.segment_scores)
    report = evaluate_prediction(
        detections,
        manifest,
        parse_thresholds(args.iou),
        video_scores=video_scores,
        segment_scores=segment_scores,
        points=args.points,
    )
    run.out_dir.mkdir(parents=True, exist_ok=True)
    write_report_csv(run.out_dir / "report.csv", report, manifest.class_names)
    (run.out_dir / "report.json").write_text(report.model_dump_json(indent=1))
    print(format_report(report, manifest.class_names))
    return 0


def gradcheck_setup(model: ModelConfig, segments: int, seed: int):
    """
    Two random videos sharing class 0, so every enabled loss is active.
    """
    rng = np.random.default_rng(seed)
    videos = [rng.standard_normal((segments, model.feature_dim)) for _ in range(2)]
    second = 1 % model.num_classes
    labels = [[0], sorted({0, second})]
    shared = sorted(set(labels[0]) & set(labels[1]))
    pairs = [(0, 1, cls) for cls in shared]
    return videos, labels, pairs


def run_gradcheck(
    model: ModelConfig,
    params: Dict[str, np.ndarray],
    segments: int = 8,
    seed: int = 0,
    samples: Optional[int] = None,
    corrupt: Optional[str] = None,
) -> Dict[str, float]:
    """
    Max relative error per parameter block with dropout off and edge masks frozen.
    """
    model = model.model_copy(update={"dropout_p": 0.0})
    videos, labels, pairs = gradcheck_setup(model, segments, seed)
    masks = [forward(x, ModelParams.from_dict(params), model).affinity.mask for x in videos]
    d = 2

    def loss_fn(p):
        outputs = [forward(x, p, model, mode="eval", edge_mask=mask) for x, mask in zip(videos, masks)]
        return total_loss(outputs, labels, pairs, model, [d] * len(videos)).node

    return gradcheck(loss_fn, params, samples=samples, rng=np.random.default_rng(seed), corrupt=corrupt)


def cmd_gradcheck(args: argparse.Namespace, run: RunConfig) -> int:
    if run.checkpoint is not None:
        state, config = load_checkpoint(run.checkpoint)
        model, params = config.model, state.params
    else:
        model = validated(
            ModelConfig,
            {
                "num_classes": args.num_classes,
                "feature_dim": args.feature_dim,
                "hidden_dim": args.hidden_dim,
                "graph_mode": args.graph_mode,
                "casl_target": "phi_output" if args.graph_mode == "learned" else "graph_output",
                "use_l1": args.graph_mode == "learned",
                "seed": args.seed,
            },
            "gradcheck model",
        )
        model = apply_overrides(model, run.overrides)
        params = init_params(model)

    report = run_gradcheck(
        model, params.as_dict(), args.segments, args.seed, samples=args.samples, corrupt=args.corrupt
    )
    width = max(len(name) for name in PARAM_NAMES)
    failed = []
    for name, error in report.items():
        status = "ok" if error <= args.tolerance else "FAIL"
        print(f"{name.ljust(width)}  {error:.3e}  {status}")
        if status == "FAIL":
            failed.append(name)
    if failed:
        raise GradcheckError(
            f"relative gradient error above {args.tolerance:g} in {', '.join(failed)}"
        )
    return 0


def run_variant(
    name: str,
    base: TrainConfig,
    train_manifest: Path,
    test_manifest: Path,
    out_dir: Path,
    thresholds: Sequence[float],
) -> Dict[str, object]:
    """
    Train and score one ablation variant; runs in a worker process with --jobs.
    """
    config = apply_overrides(base, VARIANTS[name])
    train_set = load_manifest(train_manifest)
    test_set = load_manifest(test_manifest)
    cache = FeatureCache()
    final = train(train_set.training_view(), config, out_dir / _slug(name), features=cache.get)
    state, _ = load_checkpoint(final)
    prediction = predict_manifest(state.params, config.model, test_set, features=cache.get)
    report = evaluate_prediction(
        prediction.detections, test_set, thresholds, video_scores=prediction.video_scores
    )
    row: Dict[str, object] = {"variant": name}
    for threshold in thresholds:
        key = threshold_key(threshold)
        row[f"mAP@{key}"] = report.mean_ap[key]
    row["cls_mAP"] = report.classification_map
    logger.info("variant %s: %s", name, row)
    return row


def cmd_ablate(args: argparse.Namespace, run: RunConfig) -> int:
    names = [name.strip() for name in args.variants.split(",") if name.strip()]
    unknown = [name for name in names if name not in VARIANTS]
    if unknown or not names:
        raise SchemaError(f"unknown ablation variants {unknown}; choose from {', '.join(VARIANTS)}")
    thresholds = parse_thresholds(args.iou)
    train_manifest = load_manifest(run.manifest)
    base = build_train_config(args, run, train_manifest, FeatureCache().get)
    run.out_dir.mkdir(parents=True, exist_ok=True)

    jobs = (run.manifest, Path(args.test_manifest), run.out_dir, thresholds)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as executor:
            futures = [executor.submit(run_variant, name, base, *jobs) for name in names]
            rows = [future.result() for future in futures]
    else:
        rows = [run_variant(name, base, *jobs) for name in names]

    fields = ["variant"] + [f"mAP@{threshold_key(t)}" for t in thresholds] + ["cls_mAP"]
    table = run.out_dir / "ablation.csv"
    with open(table, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: f"{value:.6f}" if isinstance(value, float) else value for key, value in row.items()})

    rank_key = f"mAP@{threshold_key(max(thresholds))}"
    ranked = sorted(rows, key=lambda row: (-row[rank_key], names.index(row["variant"])))
    print(f"ranking by {rank_key}")
    for place, row in enumerate(ranked, start=1):
        print(f"{place}. {row['variant']}  {row[rank_key]:.3f}")
    print(table)
    return 0


def cmd_plot(args: argparse.Namespace, run: RunConfig) -> int:
    manifest = load_manifest(run.manifest)
    try:
        record = manifest.record(args.video_id)
    except KeyError as exc:
        raise InputError(f"video {args.video_id!r} is not in {run.manifest}") from exc
    sources = {}
    for spec in args.detections or []:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        sources[name] = read_detections(path)
    svg, table = plot_timeline(
        record, manifest.class_names, sources, run.out_dir / f"timeline_{record.video_id}.svg"
    )
    print(svg)
    print(table)
    return 0


def cmd_dump_graph(args: argparse.Namespace, run: RunConfig) -> int:
    manifest = load_manifest(run.manifest)
    state, config = load_checkpoint(run.checkpoint)
    wanted = args.video_id or [record.video_id for record in manifest.videos]
    cache = FeatureCache()
    for video_id in wanted:
        try:
            record = manifest.record(video_id)
        except KeyError as exc:
            raise InputError(f"video {video_id!r} is not in {run.manifest}") from exc
        outputs = forward(cache.get(manifest.feature_file(record)), state.params, config.model)
        dump_graph(outputs.affinity, run.out_dir, video_id)
    print(run.out_dir)
    return 0


# =====================================================================
# PARSER
# =====================================================================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actiongraph", description="Weakly supervised temporal action localization"
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    parser.add_argument("-q", "--quiet", action="count", default=0, help="less logging")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        return p

    p = add("synth", cmd_synth, "generate a synthetic dataset")
    p.add_argument("--config", type=Path, default=None, help="YAML synthetic dataset spec")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--videos-per-class", type=int, default=None)
    p.add_argument("--test-videos-per-class", type=int, default=None)
    p.add_argument("--train-videos", type=int, default=None, help="total train videos, overrides --videos-per-class")
    p.add_argument("--test-videos", type=int, default=None, help="total test videos, overrides --test-videos-per-class")
    p.add_argument("--feature-dim", type=int, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--cluster-separation", type=float, default=None)
    p.add_argument("--multi-label-prob", type=float, default=None)

    def add_train_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--manifest", type=Path, required=True, help="training manifest")
        p.add_argument("--config", type=Path, default=None, help="YAML training config")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--learning-rate", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--d", default=None, help="MIL pooling d, or 'random'")

    p = add("train", cmd_train, "train a model")
    add_train_flags(p)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    p.add_argument("--eval-manifest", type=Path, default=None, help="test manifest scored after training")

    p = add("predict", cmd_predict, "score a manifest with a checkpoint")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--d", type=int, default=None, help="pooling d for video classification")
    p.add_argument("--class-filter", type=int, default=None, metavar="K", help="keep top-K video classes")
    p.add_argument("--dump-graphs", action="store_true", help="write adjacency CSVs per video")

    p = add("eval", cmd_eval, "score detections against ground truth")
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--iou", default=",".join(str(t) for t in DEFAULT_IOU_THRESHOLDS))
    p.add_argument("--video-scores", type=Path, default=None)
    p.add_argument("--segment-scores", type=Path, default=None)
    p.add_argument("--per-frame", action="store_true", help="also report per-frame mAP")
    p.add_argument("--points", type=int, default=25)

    p = add("gradcheck", cmd_gradcheck, "compare analytic and finite-difference gradients")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--segments", type=int, default=8)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--hidden-dim", type=int, default=8)
    p.add_argument("--graph-mode", choices=["learned", "identity"], default="learned")
    p.add_argument("--samples", type=int, default=None, help="coordinates probed per block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.add_argument("--corrupt", choices=PARAM_NAMES, default=None, help=argparse.SUPPRESS)

    p = add("ablate", cmd_ablate, "train and compare loss/graph variants")
    add_train_flags(p)
    p.add_argument("--test-manifest", type=Path, required=True)
    p.add_argument("--variants", default=",".join(DEFAULT_VARIANTS))
    p.add_argument("--iou", default=",".join(str(t) for t in DEFAULT_IOU_THRESHOLDS))
    p.add_argument("--jobs", type=int, default=1)

    p = add("plot", cmd_plot, "timeline of ground truth and detections for one video")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--video-id", required=True)
    p.add_argument("--detections", action="append", default=[], metavar="[NAME=]PATH")

    p = add("dump-graph", cmd_dump_graph, "write adjacency CSVs for videos of a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--video-id", action="append", default=[])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    verbosity = args.verbose - args.quiet
    configure_logging(verbosity)
    try:
        run = validated(
            RunConfig,
            {
                "subcommand": args.subcommand,
                "manifest": getattr(args, "manifest", None),
                "checkpoint": getattr(args, "checkpoint", None),
                "out_dir": settings.output_dir(args.subcommand, args.out),
                "overrides": parse_overrides(args.set),
                "verbosity": verbosity,
            },
            "command line",
        )
        logger.debug("run %s", run.model_dump(mode="json"))
        return args.handler(args, run)
    except ActionGraphError as exc:
        logger.debug("%s failed", args.subcommand, exc_info=True)
        print(json.dumps(exc.as_dict()), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        error = ActionGraphError(str(exc), code="io_error")
        print(json.dumps(error.as_dict()), file=sys.stderr)
        return error.exit_code
