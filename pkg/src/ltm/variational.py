"""Diagonal-Gaussian posteriors over the layered latents and the evidence lower bound."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as tt
from .container import read_container, write_container
from .model import DecoderParams, ModelConfig, log_likelihood
from .tensor import Tensor

LOGVAR_MIN = -12.0
LOGVAR_MAX = 6.0


@dataclass
class VariationalState:
    """Per-sequence (mu, log sigma^2); leading batch axis optional."""

    mu: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise tt.ShapeError(f"mu {self.mu.shape} vs logvar {self.logvar.shape}")

    def clamp_(self) -> "VariationalState":
        np.clip(self.logvar, LOGVAR_MIN, LOGVAR_MAX, out=self.logvar)
        return self

    def copy(self) -> "VariationalState":
        return VariationalState(self.mu.copy(), self.logvar.copy())

    def __getitem__(self, i) -> "VariationalState":
        return VariationalState(self.mu[i].copy(), self.logvar[i].copy())

    @classmethod
    def stack(cls, states) -> "VariationalState":
        return cls(np.stack([s.mu for s in states]), np.stack([s.logvar for s in states]))


def init_state(config: ModelConfig, batch: int | None = None, dtype=None) -> VariationalState:
    """q initialised to the prior: mu = 0, log sigma^2 = 0."""
    shape = config.latent_shape if batch is None else (batch, *config.latent_shape)
    dtype = dtype or tt.get_default_dtype()
    return VariationalState(np.zeros(shape, dtype), np.zeros(shape, dtype))


def kl_to_prior(mu, logvar) -> Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)) summed over the trailing (L, N, H) axes."""
    mu, logvar = tt.as_tensor(mu), tt.as_tensor(logvar)
    terms = (mu * mu + tt.exp(logvar) - logvar - 1.0) * 0.5
    return terms.reshape(*terms.shape[:-3], -1).sum(axis=-1)


def state_kl(state: VariationalState) -> np.ndarray:
    return kl_to_prior(state.mu, state.logvar).data


def reparam_sample(mu, logvar, noise) -> Tensor:
    """z = mu + exp(logvar / 2) * noise, differentiable in mu and logvar."""
    mu, logvar = tt.as_tensor(mu), tt.as_tensor(logvar)
    noise = tt.as_tensor(noise)
    if noise.shape != mu.shape:
        raise tt.ShapeError(f"noise {noise.shape} vs mu {mu.shape}")
    return mu + tt.exp(logvar * 0.5) * noise


def elbo_terms(x, mu, logvar, params: DecoderParams, noise) -> tuple[Tensor, Tensor, Tensor]:
    """Single-sample (elbo, recon, kl) as graph tensors for one noise draw."""
    z = reparam_sample(mu, logvar, noise)
    recon, _ = log_likelihood(x, z, params)
    kl = kl_to_prior(mu, logvar)
    return recon - kl, recon, kl


class Elbo(NamedTuple):
    elbo: np.ndarray
    recon: np.ndarray
    kl: np.ndarray


def elbo(x, state: VariationalState, params: DecoderParams, n_mc: int = 8,
         rng: np.random.Generator | None = None) -> Elbo:
    """Monte Carlo ELBO: mean over ``n_mc`` reparameterised draws of log p(x|z), minus the KL."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    recon = 0.0
    for _ in range(n_mc):
        noise = rng.standard_normal(state.mu.shape).astype(state.mu.dtype)
        ll, _ = log_likelihood(x, reparam_sample(state.mu, state.logvar, noise), params)
        recon = recon + ll.data.astype(np.float64)
    recon = recon / n_mc
    kl = state_kl(state).astype(np.float64)
    return Elbo(recon - kl, recon, kl)


def save_states(path, states: dict[str, VariationalState], config: ModelConfig) -> None:
    tensors = {}
    for name, st in states.items():
        tensors[f"{name}.mu"] = st.mu
        tensors[f"{name}.logvar"] = st.logvar
    header = {"kind": "ltm-states", "count": str(len(states))}
    header.update(config.to_header())
    write_container(path, header, tensors)


def load_states(path) -> dict[str, VariationalState]:
    header, tensors = read_container(path)
    if header.get("kind") != "ltm-states":
        raise ValueError(f"{path}: not a latent-state file")
    names = sorted({k.rsplit(".", 1)[0] for k in tensors}, key=lambda s: (len(s), s))
    return {n: VariationalState(tensors[f"{n}.mu"], tensors[f"{n}.logvar"]) for n in names}
