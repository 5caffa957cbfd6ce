# Training loop: batches, CASL pairs, per-video graphs, Adam updates, checkpoints
import csv
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import numcore as nc
from .checkpoint import load_checkpoint, save_checkpoint
from .data import FeatureCache
from .errors import ContractError, DivergedError, PairingError
from .losses import LossBreakdown, Pair, total_loss
from .model import ModelParams, forward, init_params
from .numcore import AdamState
from .schemas import DStrategy, LabeledVideo, TrainConfig

logger = logging.getLogger(__name__)

LOSS_CSV_FIELDS = ["epoch", "iter", "mil", "l1", "casl", "total"]


@dataclass
class Batch:
    videos: List[LabeledVideo]
    pairs: List[Pair]


@dataclass
class TrainState:
    params: ModelParams
    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0
    iteration: int = 0
    history: List[LossBreakdown] = field(default_factory=list)


def init_state(config: TrainConfig) -> TrainState:
    return TrainState(
        params=init_params(config.model),
        adam=AdamState(learning_rate=config.learning_rate),
        rng=np.random.default_rng(config.seed),
    )


# =====================================================================
# BATCHES AND PAIRS
# =====================================================================


def all_pairs(videos: Sequence[LabeledVideo]) -> List[Pair]:
    """
    One entry per (unordered video pair, shared class).
    """
    pairs = []
    for j, k in combinations(range(len(videos)), 2):
        for cls in sorted(set(videos[j].labels) & set(videos[k].labels)):
            pairs.append((j, k, cls))
    return pairs


def sample_batch(
    dataset: Sequence[LabeledVideo],
    batch_size: int,
    rng: np.random.Generator,
    pair_strategy: str = "all_pairs",
    free: Optional[Sequence[int]] = None,
) -> Batch:
    """
    Assemble one batch and its CASL pairs.

    `free` gives the dataset indices of the uniformly drawn part of the batch
    (the trainer passes slices of its shuffled epoch order); when omitted they
    are sampled here without replacement.
    """
    if not dataset:
        raise ContractError("cannot sample a batch from an empty dataset")
    n_pairs = batch_size // 4 if pair_strategy == "half_fixed" else 0
    n_free = batch_size - 2 * n_pairs
    if free is None:
        free = rng.choice(len(dataset), size=min(n_free, len(dataset)), replace=False)
    free = [int(i) for i in free][:n_free]

    if pair_strategy == "all_pairs":
        videos = [dataset[i] for i in free]
        return Batch(videos=videos, pairs=all_pairs(videos))
    if pair_strategy != "half_fixed":
        raise ContractError(f"unknown pair strategy {pair_strategy!r}")

    by_class = {}
    for index, video in enumerate(dataset):
        for cls in video.labels:
            by_class.setdefault(cls, []).append(index)
    # drawing among eligible classes equals resampling until a class has two videos
    eligible = sorted(cls for cls, members in by_class.items() if len(members) >= 2)
    if not eligible:
        raise PairingError("no class has two or more videos to pair")

    videos, pairs = [], []
    for _ in range(n_pairs):
        cls = int(rng.choice(eligible))
        j, k = rng.choice(by_class[cls], size=2, replace=False)
        pairs.append((len(videos), len(videos) + 1, cls))
        videos.extend([dataset[int(j)], dataset[int(k)]])
    videos.extend(dataset[i] for i in free)
    return Batch(videos=videos, pairs=pairs)


def choose_d(strategy: DStrategy, rng: np.random.Generator) -> int:
    if strategy.kind == "fixed":
        return strategy.d
    return int(strategy.choices[int(rng.integers(len(strategy.choices)))])


# =====================================================================
# STEPS
# =====================================================================


def _dump_divergence(dump_dir: Optional[Path], state: TrainState, breakdown: LossBreakdown) -> None:
    norms = {name: float(np.linalg.norm(value)) for name, value in state.params.as_dict().items()}
    logger.error(
        "non-finite loss at iteration %d: %s; parameter norms %s",
        state.iteration,
        breakdown.as_row(),
        norms,
    )
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
        np.savez(dump_dir / f"diverged_iter{state.iteration:06d}.npz", **state.params.as_dict())


def train_step(
    state: TrainState,
    videos: Sequence[LabeledVideo],
    pairs: Sequence[Pair],
    config: TrainConfig,
    features: Callable[[str], np.ndarray],
    d: int,
    dump_dir: Optional[Path] = None,
) -> Tuple[TrainState, LossBreakdown]:
    """
    Forward every video on its own graph, sum the losses, one Adam update.
    """
    if not videos:
        raise ContractError("train_step needs at least one video")
    tape = nc.Tape()
    watched = {name: tape.watch(value, name) for name, value in state.params.as_dict().items()}
    outputs = [
        forward(features(video.feature_path), watched, config.model, mode="train", rng=state.rng)
        for video in videos
    ]
    breakdown = total_loss(
        outputs,
        [video.labels for video in videos],
        pairs,
        config.model,
        [d] * len(videos),
    )
    if not math.isfinite(breakdown.total):
        _dump_divergence(dump_dir, state, breakdown)
        raise DivergedError(f"loss became non-finite at iteration {state.iteration}: {breakdown.as_row()}")

    grads = nc.backward(tape, breakdown.node)
    state.params = ModelParams.from_dict(nc.adam_step(state.params.as_dict(), grads, state.adam))
    state.iteration += 1
    breakdown.node = None
    state.history.append(breakdown)
    return state, breakdown


def run_epoch(
    state: TrainState,
    dataset: Sequence[LabeledVideo],
    config: TrainConfig,
    features: Callable[[str], np.ndarray],
    on_step: Optional[Callable[[TrainState, LossBreakdown], None]] = None,
    dump_dir: Optional[Path] = None,
) -> List[LossBreakdown]:
    steps = math.ceil(len(dataset) / config.batch_size)
    n_free = config.batch_size
    if config.pair_strategy == "half_fixed":
        n_free -= 2 * (config.batch_size // 4)
    order = state.rng.permutation(len(dataset))
    losses = []
    for step in range(steps):
        chunk = order[step * n_free : (step + 1) * n_free]
        batch = sample_batch(dataset, config.batch_size, state.rng, config.pair_strategy, free=chunk)
        d = choose_d(config.model.d_strategy, state.rng)
        state, breakdown = train_step(state, batch.videos, batch.pairs, config, features, d, dump_dir)
        losses.append(breakdown)
        if on_step is not None:
            on_step(state, breakdown)
    return losses


def train(
    dataset: Sequence[LabeledVideo],
    config: TrainConfig,
    out_dir: Union[str, Path],
    resume_from: Optional[Union[str, Path]] = None,
    features: Optional[Callable[[str], np.ndarray]] = None,
) -> Path:
    """
    Train for `config.epochs` epochs and return the final checkpoint path.

    Writes `loss.csv` (one row per iteration) and `epoch_XXXX.ckpt` every
    `checkpoint_every` epochs into `out_dir`.
    """
    if not dataset:
        raise ContractError("training split is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    features = features if features is not None else FeatureCache().get

    if resume_from is not None:
        state, _ = load_checkpoint(resume_from)
        logger.info("resuming from %s at epoch %d", resume_from, state.epoch)
    else:
        state = init_state(config)

    loss_path = out_dir / "loss.csv"
    append = resume_from is not None and loss_path.exists() and loss_path.stat().st_size > 0
    with open(loss_path, "a" if append else "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=LOSS_CSV_FIELDS)
        if not append:
            writer.writeheader()

        def on_step(current: TrainState, breakdown: LossBreakdown) -> None:
            writer.writerow({"epoch": current.epoch + 1, "iter": current.iteration, **breakdown.as_row()})
            logger.debug("epoch %d iter %d %s", current.epoch + 1, current.iteration, breakdown.as_row())

        for epoch in range(state.epoch, config.epochs):
            losses = run_epoch(state, dataset, config, features, on_step=on_step, dump_dir=out_dir)
            state.epoch = epoch + 1
            logger.info(
                "epoch %d/%d mil=%.4f l1=%.4f casl=%.4f total=%.4f",
                state.epoch,
                config.epochs,
                float(np.mean([b.mil for b in losses])),
                float(np.mean([b.l1 for b in losses])),
                float(np.mean([b.casl for b in losses])),
                float(np.mean([b.total for b in losses])),
            )
            if config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"epoch_{state.epoch:04d}.ckpt", state, config)

    final = save_checkpoint(out_dir / "final.ckpt", state, config)
    logger.info("wrote %s after %d iterations", final, state.iteration)
    return final
