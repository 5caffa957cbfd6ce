# Affinity graph construction and graph convolution
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from . import numcore as nc
from .errors import EmptyVideoError, ShapeError
from .numcore import Matrix


@dataclass
class AffinityTriplet:
    raw: Matrix
    masked: Matrix
    normalized: Matrix
    mask: np.ndarray

    @classmethod
    def identity(cls, length: int) -> "AffinityTriplet":
        eye = nc.constant(np.eye(length))
        return cls(raw=eye, masked=eye, normalized=eye, mask=np.ones((length, length)))


def build_affinity(phi_out: Matrix) -> Matrix:
    """
    Pairwise cosine similarity of the phi rows of one video.
    """
    if phi_out.rows == 0:
        raise EmptyVideoError("cannot build an affinity graph for a video with no segments")
    return nc.cosine_similarity_matrix(phi_out)


def edge_mask(values: np.ndarray, signed: bool = False) -> np.ndarray:
    """
    Keep-mask for the upper half of the edge-weight range.

    The range and the comparison use |weight| unless `signed` is set.
    """
    weights = values if signed else np.abs(values)
    low, high = weights.min(), weights.max()
    if high - low <= nc.UNIT_TOL:
        return np.ones_like(values)
    threshold = low + (high - low) / 2.0
    return (weights >= threshold).astype(nc.DTYPE)


def drop_weak_edges(g: Matrix, signed: bool = False, mask: Optional[np.ndarray] = None) -> Matrix:
    if g.rows != g.cols:
        raise ShapeError(f"affinity matrix must be square, got {g.shape}")
    if mask is None:
        mask = edge_mask(g.value, signed=signed)
    # the mask is a constant: no gradient flows through the threshold decision
    return nc.mul_const(g, mask)


def row_normalize(g: Matrix, signed: bool = False, eps: float = nc.NORM_EPS) -> Matrix:
    """
    Divide each row by its absolute sum (or signed sum); empty rows become self-edges.
    """
    if g.rows != g.cols:
        raise ShapeError(f"affinity matrix must be square, got {g.shape}")
    values = g.value
    sums = values.sum(axis=1, keepdims=True) if signed else np.abs(values).sum(axis=1, keepdims=True)
    empty = np.abs(sums) <= eps
    safe = np.where(empty, 1.0, sums)
    out = np.where(empty, np.eye(g.rows), values / safe)
    sign = np.ones_like(values) if signed else np.sign(values)

    def backward(grad):
        weighted = (grad * values).sum(axis=1, keepdims=True)
        dg = grad / safe - sign * weighted / (safe * safe)
        return (np.where(empty, 0.0, dg),)

    return nc.record(out, (g,), backward)


def graph_conv(g_hat: Matrix, x: Matrix, w: Matrix) -> Matrix:
    """
    Z = G_hat X W, evaluated as G_hat (X W).
    """
    if g_hat.rows != g_hat.cols or g_hat.cols != x.rows:
        raise ShapeError(f"graph {g_hat.shape} does not fit features {x.shape}")
    if x.cols != w.rows:
        raise ShapeError(f"features {x.shape} do not fit graph weight {w.shape}")
    return nc.matmul(g_hat, nc.matmul(x, w))


def build_triplet(
    phi_out: Matrix,
    signed_drop: bool = False,
    signed_norm: bool = False,
    mask: Optional[np.ndarray] = None,
) -> AffinityTriplet:
    raw = build_affinity(phi_out)
    if mask is None:
        mask = edge_mask(raw.value, signed=signed_drop)
    masked = drop_weak_edges(raw, mask=mask)
    normalized = row_normalize(masked, signed=signed_norm)
    return AffinityTriplet(raw=raw, masked=masked, normalized=normalized, mask=mask)


def dump_graph(triplet: AffinityTriplet, out_dir: Union[str, Path], video_id: str) -> List[Path]:
    """
    Write the raw, edge-dropped and normalized adjacency of one video as CSVs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for stage in ("raw", "masked", "normalized"):
        path = out_dir / f"{video_id}_{stage}.csv"
        np.savetxt(path, getattr(triplet, stage).value, delimiter=",", fmt="%.9g")
        paths.append(path)
    return paths
