"""Caption-guided visual saliency on a from-scratch LSTM captioner."""

from . import evaluation, numerics, saliency, seq2seq, synthworld, training
from .numerics import ContractError, DimensionError, Tensor
from .seq2seq import (
    DescriptorSequence,
    Distribution,
    Hyperparams,
    ModelParams,
    Vocabulary,
    greedy_caption,
    load_checkpoint,
    save_checkpoint,
)
from .saliency import Query, SaliencyMap, batch_probe, temporal_saliency
from .synthworld import Scene, SynthConfig, generate_dataset, generate_scene
from .training import TrainConfig, caption_loss, train

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DescriptorSequence",
    "DimensionError",
    "Distribution",
    "Hyperparams",
    "ModelParams",
    "Query",
    "SaliencyMap",
    "Scene",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "Vocabulary",
    "batch_probe",
    "caption_loss",
    "evaluation",
    "generate_dataset",
    "generate_scene",
    "greedy_caption",
    "load_checkpoint",
    "numerics",
    "saliency",
    "save_checkpoint",
    "seq2seq",
    "synthworld",
    "temporal_saliency",
    "train",
    "training",
]
