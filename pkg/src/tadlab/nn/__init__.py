"""Residual-MLP encoder, losses, optimiser and training loop, in plain numpy."""

from .losses import LOSS_KINDS, LossSpec, init_loss_params, loss_terms
from .network import EMBED_DIM, Network, backward, build_network, forward, forward_embed
from .train import (
    Adam,
    Encoder,
    TrainConfig,
    TrainedEncoder,
    batch_loss,
    build_encoder,
    extract_embeddings,
    load_checkpoint,
    random_search,
    save_checkpoint,
    train_pretext,
)


def loss_and_grad(loss: LossSpec, encoder: Encoder, task, batch, mode="train", rng=None):
    """Scalar pretext loss of ``batch`` and exact gradients for every encoder parameter."""
    return batch_loss(encoder, task, loss, batch, mode, rng)


__all__ = [
    "Adam",
    "EMBED_DIM",
    "Encoder",
    "LOSS_KINDS",
    "LossSpec",
    "Network",
    "TrainConfig",
    "TrainedEncoder",
    "backward",
    "batch_loss",
    "build_encoder",
    "build_network",
    "extract_embeddings",
    "forward",
    "forward_embed",
    "init_loss_params",
    "load_checkpoint",
    "loss_and_grad",
    "loss_terms",
    "random_search",
    "save_checkpoint",
    "train_pretext",
]
