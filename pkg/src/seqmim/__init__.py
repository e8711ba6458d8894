"""Self-supervised pretraining (item/attribute/segment mutual information) for sequential recommenders."""

from .corpus import Dataset, load_dataset, preprocess, save_dataset
from .encoder import BIDIRECTIONAL, CAUSAL, Critics, ModelConfig, SeqEncoder, encode
from .evaluation import EvalProtocol, EvalResult, evaluate
from .objectives import LossWeights, finetune_loss, pretrain_loss
from .sampler import SamplerConfig, build_finetune_batch, build_pretrain_batch
from .synth import SynthSpec, generate
from .trainer import (
    TrainConfig,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    transfer_parameters,
)

__version__ = "0.1.0"

__all__ = [
    "BIDIRECTIONAL", "CAUSAL", "Critics", "Dataset", "EvalProtocol", "EvalResult", "LossWeights",
    "ModelConfig", "SamplerConfig", "SeqEncoder", "SynthSpec", "TrainConfig", "build_finetune_batch",
    "build_pretrain_batch", "encode", "evaluate", "finetune", "finetune_loss", "generate", "load_checkpoint",
    "load_dataset", "preprocess", "pretrain", "pretrain_loss", "save_checkpoint", "transfer_parameters",
]
