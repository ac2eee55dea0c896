"""Hooked models, tokenizer, toy trainer and checkpoint I/O."""

from .checkpoint import CheckpointError, load, save
from .hooks import SITE_KINDS, ActivationCache, ComponentId, ForwardResult, HookedModel, UnknownComponentError
from .tokenizer import TokenizerError, WordTokenizer
from .toy import LinearModel, MLPStack
from .train import Adam, TrainExample, TrainingDivergedError, TrainResult, answer_accuracy, train_toy
from .transformer import ConfigError, ModelConfig, Transformer, param_shapes

build = Transformer.build

__all__ = [
    "SITE_KINDS",
    "ActivationCache",
    "Adam",
    "CheckpointError",
    "ComponentId",
    "ConfigError",
    "ForwardResult",
    "HookedModel",
    "LinearModel",
    "MLPStack",
    "ModelConfig",
    "TokenizerError",
    "TrainExample",
    "TrainResult",
    "TrainingDivergedError",
    "Transformer",
    "UnknownComponentError",
    "WordTokenizer",
    "answer_accuracy",
    "build",
    "load",
    "param_shapes",
    "save",
    "train_toy",
]
