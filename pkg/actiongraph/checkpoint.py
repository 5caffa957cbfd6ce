"""
Checkpoint container.

Layout (little endian):
    b"AGCK" | u32 format version | u64 header length | header JSON (utf-8)
    then for every tensor listed in the header, in order:
    u64 rows | u64 cols | rows*cols float64 values, row-major

The header echoes the training configuration and stores the epoch and
iteration counters, the Adam hyperparameters and step, the run seed and the
full bit-generator state so a resumed run continues bit-identically.
"""

import json
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .errors import FormatError, InputError, TruncationError
from .numcore import AdamState
from .schemas import TrainConfig, validated

MAGIC = b"AGCK"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<4sIQ")
SHAPE = struct.Struct("<QQ")


def _blob(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f8")
    return SHAPE.pack(*array.shape) + array.tobytes()


def save_checkpoint(path: Union[str, Path], state, config: TrainConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: Dict[str, np.ndarray] = {}
    for name, value in state.params.as_dict().items():
        tensors[f"param/{name}"] = value
    for name in sorted(state.adam.m):
        tensors[f"adam_m/{name}"] = state.adam.m[name]
        tensors[f"adam_v/{name}"] = state.adam.v[name]

    header = {
        "format_version": FORMAT_VERSION,
        "config": config.model_dump(mode="json"),
        "epoch": state.epoch,
        "iteration": state.iteration,
        "seed": config.seed,
        "rng_state": state.rng.bit_generator.state,
        "adam": {
            "learning_rate": state.adam.learning_rate,
            "beta1": state.adam.beta1,
            "beta2": state.adam.beta2,
            "epsilon": state.adam.epsilon,
            "step": state.adam.step,
        },
        "tensors": list(tensors),
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(encoded)))
        handle.write(encoded)
        for value in tensors.values():
            handle.write(_blob(value))
    return path


def read_checkpoint(path: Union[str, Path]) -> Tuple[dict, Dict[str, np.ndarray]]:
    """
    Raw header and tensors of a checkpoint file.
    """
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise InputError(f"checkpoint {path} does not exist") from exc
    if len(raw) < PREAMBLE.size:
        raise TruncationError(f"{path}: too short for a checkpoint")
    magic, version, header_len = PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = PREAMBLE.size
    header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    offset += header_len

    tensors = {}
    for name in header["tensors"]:
        if offset + SHAPE.size > len(raw):
            raise TruncationError(f"{path}: missing tensor {name}")
        rows, cols = SHAPE.unpack_from(raw, offset)
        offset += SHAPE.size
        count = rows * cols
        if offset + 8 * count > len(raw):
            raise TruncationError(f"{path}: tensor {name} is truncated")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(rows, cols).copy()
        offset += 8 * count
    return header, tensors


def load_checkpoint(path: Union[str, Path]):
    """
    Rebuild (TrainState, TrainConfig) from a checkpoint.
    """
    from .model import ModelParams
    from .trainer import TrainState

    header, tensors = read_checkpoint(path)
    config = validated(TrainConfig, header["config"], f"checkpoint config in {path}")
    params = ModelParams.from_dict(
        {name.split("/", 1)[1]: value for name, value in tensors.items() if name.startswith("param/")}
    )
    adam = AdamState(**header["adam"])
    for name, value in tensors.items():
        kind, _, block = name.partition("/")
        if kind == "adam_m":
            adam.m[block] = value
        elif kind == "adam_v":
            adam.v[block] = value
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    state = TrainState(
        params=params,
        adam=adam,
        rng=rng,
        epoch=header["epoch"],
        iteration=header["iteration"],
    )
    return state, config
