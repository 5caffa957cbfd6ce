# Network assembly: phi -> affinity -> graph conv -> ReLU -> L2 -> dropout -> classifier -> tanh
from dataclasses import dataclass
from typing import Dict, Literal, Mapping, Optional, Union

import numpy as np

from . import graph
from . import numcore as nc
from .errors import EmptyVideoError, InputError, ShapeError
from .graph import AffinityTriplet
from .numcore import Matrix
from .schemas import ModelConfig

PARAM_NAMES = ("phi_weight", "phi_bias", "graph_weight", "cls_weight", "cls_bias")


@dataclass
class ModelParams:
    graph_weight: np.ndarray
    cls_weight: np.ndarray
    cls_bias: np.ndarray
    phi_weight: Optional[np.ndarray] = None
    phi_bias: Optional[np.ndarray] = None

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES if getattr(self, name) is not None}

    @classmethod
    def from_dict(cls, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        unknown = set(arrays) - set(PARAM_NAMES)
        if unknown:
            raise ShapeError(f"unknown parameter blocks {sorted(unknown)}")
        return cls(**{name: np.asarray(value, dtype=nc.DTYPE) for name, value in arrays.items()})


@dataclass
class ForwardOutputs:
    phi_out: Optional[Matrix]
    affinity: AffinityTriplet
    z: Matrix
    hidden: Matrix
    scores: Matrix


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(config: ModelConfig, rng: Optional[np.random.Generator] = None) -> ModelParams:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    hidden = config.effective_hidden_dim
    phi_weight = phi_bias = None
    if config.graph_mode == "learned":
        phi_weight = _glorot(rng, config.feature_dim, config.hidden_dim)
        phi_bias = np.zeros((1, config.hidden_dim))
    graph_weight = _glorot(rng, config.feature_dim, hidden)
    cls_weight = _glorot(rng, hidden, config.num_classes)
    return ModelParams(
        graph_weight=graph_weight,
        cls_weight=cls_weight,
        cls_bias=np.zeros((1, config.num_classes)),
        phi_weight=phi_weight,
        phi_bias=phi_bias,
    )


def count_params(params: ModelParams) -> int:
    return int(sum(value.size for value in params.as_dict().values()))


def _as_matrices(params: Union[ModelParams, Mapping[str, Matrix]]) -> Dict[str, Matrix]:
    if isinstance(params, ModelParams):
        return {name: nc.constant(value) for name, value in params.as_dict().items()}
    return dict(params)


def forward(
    x: Union[Matrix, np.ndarray],
    params: Union[ModelParams, Mapping[str, Matrix]],
    config: ModelConfig,
    mode: Literal["train", "eval"] = "eval",
    rng: Optional[np.random.Generator] = None,
    edge_mask: Optional[np.ndarray] = None,
    dropout_mask: Optional[np.ndarray] = None,
) -> ForwardOutputs:
    """
    Run one video through the network.

    `params` is either a ModelParams (pure evaluation) or a mapping of
    tape-watched matrices (training). `edge_mask` and `dropout_mask` freeze
    the otherwise data/rng dependent masks.
    """
    x = x if isinstance(x, Matrix) else nc.constant(x)
    if x.rows == 0:
        raise EmptyVideoError("video has no segments")
    if x.cols != config.feature_dim:
        raise ShapeError(f"features have {x.cols} columns, model expects {config.feature_dim}")
    if not np.all(np.isfinite(x.value)):
        raise InputError("video features contain non-finite values")
    p = _as_matrices(params)

    if config.graph_mode == "learned":
        phi_out = nc.add_bias(nc.matmul(x, p["phi_weight"]), p["phi_bias"])
        affinity = graph.build_triplet(
            phi_out,
            signed_drop=config.signed_edge_drop,
            signed_norm=config.signed_row_norm,
            mask=edge_mask,
        )
        z = graph.graph_conv(affinity.normalized, x, p["graph_weight"])
    else:
        phi_out = None
        affinity = AffinityTriplet.identity(x.rows)
        z = nc.matmul(x, p["graph_weight"])

    hidden = nc.l2_normalize_rows(nc.elementwise(z, "relu"))
    hidden = nc.dropout(hidden, config.dropout_p, rng, training=mode == "train", mask=dropout_mask)
    logits = nc.add_bias(nc.matmul(hidden, p["cls_weight"]), p["cls_bias"])
    scores = nc.elementwise(logits, "tanh")
    return ForwardOutputs(phi_out=phi_out, affinity=affinity, z=z, hidden=hidden, scores=scores)


def segment_scores(x: np.ndarray, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """
    Eval-mode l x c score matrix for one video.
    """
    return forward(x, params, config, mode="eval").scores.value
