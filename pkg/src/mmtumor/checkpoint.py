"""Single-file versioned model checkpoints shared by all trainable modules."""

import os

import torch

from .errors import CheckpointVersionError, IoFailureError, MissingFileError

FORMAT_VERSION = 1


def save_checkpoint(path, kind, config, state_dict, trained=True, extra=None):
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": dict(config),
        "state_dict": state_dict,
        "trained": bool(trained),
        "extra": extra or {},
    }
    tmp = f"{path}.tmp"
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except OSError as e:
        raise IoFailureError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path, expected_kind):
    if not os.path.exists(path):
        raise MissingFileError(f"no such checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format version {version}, expected {FORMAT_VERSION}")
    if payload.get("kind") != expected_kind:
        raise CheckpointVersionError(
            f"checkpoint {path} holds a '{payload.get('kind')}' model, expected '{expected_kind}'")
    return payload
