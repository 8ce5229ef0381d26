"""Binary checkpoint format for radiance-field models.

Layout (little-endian)::

    b"SNRF" | u32 version | u32 n | n bytes of UTF-8 JSON config | f32 payload

The payload holds the hash tables (level-major, then entry, then feature),
then every density-MLP layer (weight row-major, then bias), then every
color-MLP layer in the same way.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, RadianceFieldModel

MAGIC = b"SNRF"
VERSION = 1
_HEADER = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def _ordered_params(model: RadianceFieldModel) -> list:
    params = [model.encoding.tables]
    for net in (model.density_net, model.color_net):
        for layer in net:
            if isinstance(layer, torch.nn.Linear):
                params += [layer.weight, layer.bias]
    return params


def save_model(model: RadianceFieldModel, path, extra: dict | None = None) -> Path:
    if model.dtype != torch.float32:
        raise CheckpointError(f"checkpoints store float32 parameters, model is {model.dtype}")
    config = {"model": model.cfg.to_json()}
    if extra:
        config["extra"] = extra
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    payload = b"".join(p.detach().numpy().astype("<f4").tobytes() for p in _ordered_params(model))
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)
    return path


def read_checkpoint(path) -> tuple:
    """Parse a checkpoint file into ``(config dict, float32 payload)``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError("truncated checkpoint: header incomplete")
    magic, version, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    end = _HEADER.size + n
    if len(data) < end:
        raise CheckpointError("truncated checkpoint: config block incomplete")
    try:
        config = json.loads(data[_HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable config block: {exc}") from exc
    if (len(data) - end) % 4:
        raise CheckpointError("truncated checkpoint: payload is not whole float32 values")
    return config, np.frombuffer(data, dtype="<f4", offset=end)


def load_model(path) -> RadianceFieldModel:
    config, payload = read_checkpoint(path)
    model = RadianceFieldModel(ModelConfig.from_json(config["model"]))
    params = _ordered_params(model)
    expected = sum(p.numel() for p in params)
    if payload.size != expected:
        raise CheckpointError(f"payload holds {payload.size} values, model needs {expected}")
    offset = 0
    with torch.no_grad():
        for p in params:
            k = p.numel()
            p.copy_(torch.from_numpy(payload[offset:offset + k].astype(np.float32).reshape(p.shape)))
            offset += k
    return model
