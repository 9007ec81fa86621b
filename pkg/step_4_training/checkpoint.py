#!/usr/bin/env python3
"""
checkpoint.py
Versioned JSON checkpoints holding parameter blocks, optimizer state and
scheduler state. Floats are written with repr precision, so a load restores
bit-identical values.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_TAG = "fbsde-checkpoint/v1"


class CheckpointError(ValueError):
    """Raised for unreadable, foreign or dimension-incompatible checkpoints."""


@dataclass
class Checkpoint:
    iteration: int
    params: Dict[str, np.ndarray]
    optimizer: Dict[str, Any]
    scheduler: Dict[str, Any]
    meta: Dict[str, Any] = field(default_factory=dict)


def _encode_blocks(blocks: Dict[str, np.ndarray]) -> Dict[str, Any]:
    return {name: {"shape": list(array.shape), "values": np.asarray(array).ravel().tolist()}
            for name, array in blocks.items()}


def _decode_blocks(blocks: Dict[str, Any]) -> Dict[str, np.ndarray]:
    decoded = {}
    for name, block in blocks.items():
        values = np.asarray(block["values"], dtype=np.float64)
        shape = tuple(block["shape"])
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"block '{name}' holds {values.size} values for shape {shape}")
        decoded[name] = values.reshape(shape)
    return decoded


def write_json_atomic(path: str, document: Dict[str, Any]) -> str:
    """Write JSON to a temporary sibling and move it into place."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", encoding="utf-8") as f:
        json.dump(document, f, ensure_ascii=False, indent=2)
    os.replace(tmp_path, path)
    return path


def save_checkpoint(path: str, checkpoint: Checkpoint) -> str:
    optimizer = dict(checkpoint.optimizer)
    for key in ("m", "v"):
        if key in optimizer:
            optimizer[key] = _encode_blocks(optimizer[key])
    document = {
        "format": FORMAT_TAG,
        "iteration": checkpoint.iteration,
        "params": _encode_blocks(checkpoint.params),
        "optimizer": optimizer,
        "scheduler": checkpoint.scheduler,
        "meta": checkpoint.meta,
    }
    write_json_atomic(path, document)
    logger.debug(f"💾 Checkpoint written: {path}")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    """
    Read a checkpoint document.

    Raises:
        CheckpointError: missing file, bad JSON or unknown format tag
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    if document.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path} has format {document.get('format')!r}, expected {FORMAT_TAG!r}")

    optimizer = dict(document.get("optimizer", {}))
    for key in ("m", "v"):
        if key in optimizer:
            optimizer[key] = _decode_blocks(optimizer[key])
    return Checkpoint(
        iteration=int(document["iteration"]),
        params=_decode_blocks(document["params"]),
        optimizer=optimizer,
        scheduler=document.get("scheduler", {}),
        meta=document.get("meta", {}),
    )


def check_dimensions(checkpoint: Checkpoint, expected_shapes: Dict[str, Any]) -> None:
    for name, shape in expected_shapes.items():
        if name not in checkpoint.params:
            raise CheckpointError(f"checkpoint lacks parameter block '{name}'")
        if tuple(checkpoint.params[name].shape) != tuple(shape):
            raise CheckpointError(f"block '{name}' has shape {checkpoint.params[name].shape}, "
                                  f"config expects {tuple(shape)}")
