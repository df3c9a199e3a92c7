"""Numpy encoder-decoder with self-attention bottleneck, trained with hand-written gradients."""

from polarsfp.nn.layers import Tensor
from polarsfp.nn.model import Model, ModelConfig, build_model, load_checkpoint, save_checkpoint
from polarsfp.nn.train import Adam, TrainConfig, cosine_loss_grad, network_input, predict, train

__all__ = [
    "Adam", "Model", "ModelConfig", "Tensor", "TrainConfig", "build_model", "cosine_loss_grad",
    "load_checkpoint", "network_input", "predict", "save_checkpoint", "train",
]
