"""Latent-thought language models on a small numpy autodiff engine."""

from .model import DecoderParams, ModelConfig, forward_logits, init_params, load_checkpoint, log_likelihood, \
    save_checkpoint
from .variational import VariationalState, elbo, init_state, kl_to_prior

__all__ = [
    "DecoderParams", "ModelConfig", "VariationalState", "elbo", "forward_logits", "init_params", "init_state",
    "kl_to_prior", "load_checkpoint", "log_likelihood", "save_checkpoint",
]
__version__ = "0.1.0"
