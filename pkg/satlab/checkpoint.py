"""
Checkpoint container: 8-byte magic, little-endian uint32 header length, a
JSON header (configs, counters, random-stream state and a name/shape/offset
table), then raw little-endian float32 arrays.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import CheckpointError
from .models import ModelConfig, SatModel, build_model

logger = logging.getLogger(__name__)

MAGIC = b"QSATCKPT"
FORMAT_VERSION = 1
DTYPE = "<f4"


@dataclasses.dataclass
class Checkpoint:
    model_config: ModelConfig
    params: Dict[str, np.ndarray]
    moments: Dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    iteration: int = 0
    optimizer_step: int = 0
    rng_state: Optional[Dict[str, object]] = None
    train_state: Dict[str, object] = dataclasses.field(default_factory=dict)


def _table(prefix: str, arrays: Dict[str, np.ndarray], offset: int, entries: List[dict]) -> int:
    for name, array in arrays.items():
        nbytes = int(array.size) * 4
        entries.append(
            {"name": f"{prefix}{name}", "shape": list(array.shape), "offset": offset, "nbytes": nbytes}
        )
        offset += nbytes
    return offset


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    entries: List[dict] = []
    offset = _table("param/", checkpoint.params, 0, entries)
    _table("moment/", checkpoint.moments, offset, entries)
    header = {
        "format": "satlab-checkpoint",
        "version": FORMAT_VERSION,
        "dtype": DTYPE,
        "model_config": checkpoint.model_config.to_dict(),
        "iteration": checkpoint.iteration,
        "optimizer_step": checkpoint.optimizer_step,
        "rng_state": checkpoint.rng_state,
        "train_state": checkpoint.train_state,
        "tensors": entries,
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        for array in (*checkpoint.params.values(), *checkpoint.moments.values()):
            fh.write(np.ascontiguousarray(array, dtype=DTYPE).tobytes())
    logger.info("Saved checkpoint %s (iteration %d)", path, checkpoint.iteration)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a satlab checkpoint")
    (length,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(raw) < start + length:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointError(f"{path}: corrupt header ({error})") from error
    if header.get("format") != "satlab-checkpoint" or header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {header.get('version')!r} "
            f"(expected {FORMAT_VERSION})"
        )
    if header.get("dtype") != DTYPE:
        raise CheckpointError(f"{path}: unsupported dtype {header.get('dtype')!r}")

    blob = raw[start + length :]
    params: Dict[str, np.ndarray] = {}
    moments: Dict[str, np.ndarray] = {}
    try:
        for entry in header["tensors"]:
            end = entry["offset"] + entry["nbytes"]
            if end > len(blob):
                raise CheckpointError(f"{path}: truncated data for {entry['name']}")
            array = np.frombuffer(blob[entry["offset"] : end], dtype=DTYPE)
            array = array.reshape(entry["shape"]).astype(np.float32)
            kind, name = entry["name"].split("/", 1)
            (params if kind == "param" else moments)[name] = array
        config = ModelConfig.from_dict(header["model_config"])
    except (KeyError, TypeError, ValueError) as error:
        if isinstance(error, CheckpointError):
            raise
        raise CheckpointError(f"{path}: inconsistent tensor table ({error})") from error

    return Checkpoint(
        model_config=config,
        params=params,
        moments=moments,
        iteration=int(header.get("iteration", 0)),
        optimizer_step=int(header.get("optimizer_step", 0)),
        rng_state=header.get("rng_state"),
        train_state=header.get("train_state", {}),
    )


def restore_model(checkpoint: Checkpoint, seed: int = 0) -> SatModel:
    """Build the configured model and load the stored parameters into it."""
    model = build_model(checkpoint.model_config, seed)
    expected = {param.name: param.shape for param in model.parameters()}
    stored = {name: array.shape for name, array in checkpoint.params.items()}
    if expected != stored:
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        wrong = sorted(k for k in set(expected) & set(stored) if expected[k] != stored[k])
        raise CheckpointError(
            "shape table inconsistent with model config: "
            f"missing={missing} unexpected={extra} mismatched={wrong}"
        )
    model.load_arrays(checkpoint.params)
    return model
