"""Hash-grid radiance field: encoding, model, rendering, training and checkpoints."""

from .checkpoint import CheckpointError, load_model, read_checkpoint, save_model
from .encoding import HashGridConfig, HashGridEncoding, hash_encode
from .model import ModelConfig, RadianceFieldModel, field_eval, sh_encode
from .render import RenderConfig, composite, render_ray, render_view
from .train import NonFiniteLossError, TrainConfig, TrainResult, batch_loss, train

__all__ = [
    "CheckpointError", "load_model", "read_checkpoint", "save_model",
    "HashGridConfig", "HashGridEncoding", "ModelConfig", "NonFiniteLossError", "RadianceFieldModel",
    "RenderConfig", "TrainConfig", "TrainResult", "batch_loss", "composite", "field_eval", "hash_encode",
    "render_ray", "render_view", "sh_encode", "train",
]
