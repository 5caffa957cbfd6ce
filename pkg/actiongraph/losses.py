"""
Training losses: top-k MIL cross entropy, L1 graph sparsity and the
co-activity similarity hinge, plus their weighted sum.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import numcore as nc
from .errors import ContractError, DegenerateVideoError, ParameterError
from .model import ForwardOutputs
from .numcore import Matrix
from .schemas import ModelConfig

CASL_MARGIN = 0.5

Pair = Tuple[int, int, int]


@dataclass(frozen=True)
class LabelVector:
    indicator: np.ndarray

    @classmethod
    def from_labels(cls, labels: Sequence[int], num_classes: int) -> "LabelVector":
        indicator = np.zeros(num_classes)
        for label in labels:
            if not 0 <= label < num_classes:
                raise ContractError(f"label {label} outside [0, {num_classes})")
            indicator[label] = 1.0
        if indicator.sum() == 0:
            raise ContractError("video has an empty label set")
        return cls(indicator=indicator)

    @property
    def normalized(self) -> np.ndarray:
        return self.indicator / self.indicator.sum()


@dataclass
class LossBreakdown:
    mil: float = 0.0
    l1: float = 0.0
    casl: float = 0.0
    total: float = 0.0
    lambdas: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    node: Optional[Matrix] = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict:
        return {"mil": self.mil, "l1": self.l1, "casl": self.casl, "total": self.total}


def compute_k(l: int, d: int) -> int:
    if l < 1 or d < 1:
        raise ParameterError(f"compute_k needs l >= 1 and d >= 1, got l={l}, d={d}")
    return max(1, l // d)


def _label_vector(labels, num_classes: int) -> LabelVector:
    return labels if isinstance(labels, LabelVector) else LabelVector.from_labels(labels, num_classes)


# =====================================================================
# MIL LOSS
# =====================================================================


def mil_video_loss(scores: Matrix, labels, d: int) -> Matrix:
    target = _label_vector(labels, scores.cols).normalized.reshape(1, -1)
    pooled = nc.topk_mean_columns(scores, compute_k(scores.rows, d))
    log_p = nc.log_softmax_rows(pooled)
    return nc.scale(nc.sum_all(nc.mul_const(log_p, target)), -1.0)


def mil_loss(scores_per_video: Sequence[Matrix], labels: Sequence, d_per_video: Sequence[int]) -> Matrix:
    """
    Cross entropy of softmaxed top-k means against normalized labels, batch mean.
    """
    if not scores_per_video:
        raise ContractError("mil_loss needs a nonempty batch")
    if not len(scores_per_video) == len(labels) == len(d_per_video):
        raise ContractError("scores, labels and d must align per video")
    terms = [mil_video_loss(s, y, d) for s, y, d in zip(scores_per_video, labels, d_per_video)]
    return nc.scale(nc.total(terms), 1.0 / len(terms))


# =====================================================================
# GRAPH SPARSITY
# =====================================================================


def l1_sparsity(g_raw: Matrix) -> Matrix:
    if g_raw.rows != g_raw.cols:
        raise ContractError(f"l1_sparsity needs a square graph, got {g_raw.shape}")
    return nc.scale(nc.sum_all(nc.elementwise(g_raw, "abs")), 1.0 / (g_raw.rows * g_raw.rows))


# =====================================================================
# CO-ACTIVITY SIMILARITY
# =====================================================================


def casl_features(
    features: Matrix, scores: Matrix, class_i: int, attention_axis: str = "time"
) -> Tuple[Matrix, Matrix]:
    """
    Attention-weighted foreground f_i and complement-weighted background b_i.
    """
    if features.rows < 2:
        raise DegenerateVideoError("CASL needs at least two segments per video")
    if features.rows != scores.rows:
        raise ContractError(f"features {features.shape} and scores {scores.shape} disagree on length")
    if attention_axis == "time":
        attention = nc.softmax_rows(nc.transpose(scores))
    elif attention_axis == "class":
        attention = nc.transpose(nc.softmax_rows(scores))
    else:
        raise ParameterError(f"unknown attention axis {attention_axis!r}")
    weights = nc.select_row(attention, class_i)
    foreground = nc.matmul(weights, features)
    # sum_t (1 - p_t) F_t == sum_t F_t - f_i
    background = nc.sub(nc.column_sum(features), foreground)
    return foreground, background


def cosine_distance(a: Matrix, b: Matrix) -> Matrix:
    return nc.affine(nc.cosine_rows(a, b), -0.5, 0.5)


def casl_source(outputs: ForwardOutputs, config: ModelConfig) -> Matrix:
    if config.casl_target == "phi_output":
        if outputs.phi_out is None:
            raise ContractError("CASL on phi output needs graph_mode=learned")
        return outputs.phi_out
    if config.casl_target == "graph_output":
        return outputs.z
    raise ContractError("CASL is disabled for this configuration")


def casl_pair(
    video_j: Tuple[ForwardOutputs, Sequence[int]],
    video_k: Tuple[ForwardOutputs, Sequence[int]],
    class_i: int,
    config: ModelConfig,
) -> Matrix:
    (out_j, labels_j), (out_k, labels_k) = video_j, video_k
    if class_i not in labels_j or class_i not in labels_k:
        raise ContractError(f"class {class_i} must be in both videos' label sets")
    f_j, b_j = casl_features(casl_source(out_j, config), out_j.scores, class_i, config.attention_axis)
    f_k, b_k = casl_features(casl_source(out_k, config), out_k.scores, class_i, config.attention_axis)
    d_fg = cosine_distance(f_j, f_k)
    first = nc.elementwise(nc.affine(nc.sub(d_fg, cosine_distance(b_j, f_k)), 1.0, CASL_MARGIN), "relu")
    second = nc.elementwise(nc.affine(nc.sub(d_fg, cosine_distance(b_k, f_j)), 1.0, CASL_MARGIN), "relu")
    return nc.add(first, second)


# =====================================================================
# TOTAL
# =====================================================================


def total_loss(
    batch_outputs: Sequence[ForwardOutputs],
    labels: Sequence[Sequence[int]],
    pairs: Sequence[Pair],
    config: ModelConfig,
    d_per_video: Sequence[int],
) -> LossBreakdown:
    """
    Weighted sum of the enabled losses; `node` holds the differentiable total.
    """
    lam_mil, lam_l1, lam_casl = config.lambdas
    terms: List[Matrix] = []
    breakdown = LossBreakdown(lambdas=tuple(config.lambdas))

    if config.use_mil and batch_outputs:
        mil = mil_loss([o.scores for o in batch_outputs], labels, d_per_video)
        breakdown.mil = mil.item()
        terms.append(nc.scale(mil, lam_mil))

    if config.use_l1 and batch_outputs:
        l1 = nc.scale(
            nc.total(l1_sparsity(o.affinity.raw) for o in batch_outputs), 1.0 / len(batch_outputs)
        )
        breakdown.l1 = l1.item()
        terms.append(nc.scale(l1, lam_l1))

    if config.casl_enabled and pairs:
        casl = nc.scale(
            nc.total(
                casl_pair((batch_outputs[j], labels[j]), (batch_outputs[k], labels[k]), c, config)
                for j, k, c in pairs
            ),
            1.0 / len(pairs),
        )
        breakdown.casl = casl.item()
        terms.append(nc.scale(casl, lam_casl))

    breakdown.node = nc.total(terms)
    breakdown.total = breakdown.node.item()
    return breakdown
