"""Conditional GAN with hand-written forward and backward passes."""

from .nets import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig
from .train import TrainingConfig, TrainResult, gan_train
from .checkpoint import Checkpoint

__all__ = [
    "Discriminator", "DiscriminatorConfig", "Generator", "GeneratorConfig",
    "TrainingConfig", "TrainResult", "gan_train", "Checkpoint",
]
