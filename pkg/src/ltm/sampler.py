"""Langevin posterior sampling and autoregressive generation conditioned on latent thoughts."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .model import DecoderParams, SequenceLengthError, forward_logits, log_likelihood
from .tensor import NumericError, Tensor
from .trainer import fast_infer

log = logging.getLogger(__name__)

STRATEGIES = ("greedy", "multinomial", "top_k", "nucleus")


@dataclass(frozen=True)
class DecodeStrategy:
    kind: str = "greedy"
    temperature: float = 1.0
    k: int = 1
    p: float = 1.0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown decode strategy {self.kind!r}; choose from {STRATEGIES}")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.k < 1:
            raise ValueError("top_k needs k >= 1")
        if not 0 < self.p <= 1:
            raise ValueError("nucleus p must lie in (0, 1]")

    @classmethod
    def parse(cls, text: str, temperature: float = 1.0) -> "DecodeStrategy":
        """``greedy``, ``multinomial``, ``top_k:40`` or ``nucleus:0.95``."""
        kind, _, arg = text.partition(":")
        if kind == "top_k":
            return cls(kind, temperature, k=int(arg or 1))
        if kind == "nucleus":
            return cls(kind, temperature, p=float(arg or 1.0))
        if arg:
            raise ValueError(f"strategy {kind!r} takes no argument")
        return cls(kind, temperature)


def token_distribution(logits, strategy: DecodeStrategy) -> np.ndarray:
    """The exact float64 distribution that ``sample_token`` draws from.

    Greedy puts all mass on the lowest-index maximum.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise tt.ShapeError(f"expected logits of shape [V], got {z.shape}")
    if np.isnan(z).any() or np.isposinf(z).any():
        raise NumericError("logits contain NaN or +inf")
    if np.isneginf(z).all():
        raise tt.DegenerateDistributionError("every logit is -inf")
    probs = np.zeros_like(z)
    if strategy.kind == "greedy":
        probs[int(np.argmax(z))] = 1.0
        return probs
    z = z / strategy.temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    if strategy.kind == "top_k":
        order = np.argsort(-z, kind="stable")
        keep = order[:strategy.k]
        probs[keep] = p[keep]
    elif strategy.kind == "nucleus":
        order = np.argsort(-p, kind="stable")
        cum = np.cumsum(p[order])
        n = len(p) if strategy.p >= 1.0 else int(np.searchsorted(cum, strategy.p, side="left")) + 1
        keep = order[:max(1, min(n, len(p)))]
        probs[keep] = p[keep]
    else:
        probs = p
    return probs / probs.sum()


def sample_token(logits, strategy: DecodeStrategy, rng: np.random.Generator) -> int:
    probs = token_distribution(logits, strategy)
    if strategy.kind == "greedy":
        return int(np.argmax(probs))
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    # never land on a zero-probability id through rounding at the top of the cdf
    return int(np.flatnonzero(probs)[-1]) if idx >= len(probs) or probs[idx] == 0 else idx


# ---------------------------------------------------------------------------
# Langevin dynamics


@dataclass(frozen=True)
class LangevinConfig:
    step_size: float = 1e-3
    n_steps: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("Langevin step size must be > 0")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")


def log_joint(z, x, params: DecoderParams) -> tuple[np.ndarray, np.ndarray]:
    """log p(z) + log p(x|z) up to the prior's constant, and its gradient in z."""
    zt = Tensor(np.asarray(z, dtype=tt.get_default_dtype()), requires_grad=True)
    saved = {k: p.requires_grad for k, p in params.items()}
    params.requires_grad_(False)
    try:
        ll, _ = log_likelihood(x, zt, params)
        flat = (zt * zt).reshape(*zt.shape[:-3], -1).sum(axis=-1)
        lj = ll - flat * 0.5
        lj.sum().backward()
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]
    return lj.data, zt.grad


def langevin_step(z, x, params: DecoderParams, s: float, noise, *, step_index: int = 0,
                  test_mode: bool = False) -> np.ndarray:
    """z + s * grad[log p(z) + log p(x|z)] + sqrt(2 s) * noise, unadjusted."""
    z_new, _ = _langevin_update(z, x, params, s, noise, step_index, test_mode)
    return z_new


def _langevin_update(z, x, params, s, noise, step_index, test_mode):
    if not (s > 0 or (test_mode and s == 0)):
        raise ValueError("Langevin step size must be > 0 (s = 0 only in test mode)")
    z = np.asarray(z, dtype=tt.get_default_dtype())
    noise = np.asarray(noise, dtype=z.dtype)
    if noise.shape != z.shape:
        raise tt.ShapeError(f"noise {noise.shape} vs z {z.shape}")
    lj, grad = log_joint(z, x, params)
    if not np.isfinite(grad).all():
        raise NumericError(f"non-finite log-joint gradient at Langevin step {step_index}")
    z_new = z + z.dtype.type(s) * grad + z.dtype.type(np.sqrt(2.0 * s)) * noise
    return z_new, lj


def langevin_infer(x, params: DecoderParams, cfg: LangevinConfig, rng: np.random.Generator | None = None,
                   z0=None, noise_free: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Run ``cfg.n_steps`` Langevin updates from z0 ~ N(0, I).

    ``x`` may be [T] or a batch [B, T] (one independent chain per row).  Returns
    the final sample and the log-joint trace evaluated before each update
    ([n_steps] or [n_steps, B]).
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    xa = np.asarray(x)
    shape = params.config.latent_shape if xa.ndim == 1 else (xa.shape[0], *params.config.latent_shape)
    dtype = tt.get_default_dtype()
    z = rng.standard_normal(shape).astype(dtype) if z0 is None else np.array(z0, dtype=dtype)
    trace = []
    for step in range(cfg.n_steps):
        noise = np.zeros(shape, dtype) if noise_free else rng.standard_normal(shape).astype(dtype)
        z, lj = _langevin_update(z, xa, params, cfg.step_size, noise, step, False)
        trace.append(lj)
    trace = np.array(trace, dtype=np.float64).reshape(cfg.n_steps, *shape[:-3])
    return z, trace


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class VBInfer:
    t_fast: int = 16
    eta: float = 0.34


def _decode(context: list[int], z, params: DecoderParams, n_new: int, strategy: DecodeStrategy,
            rng: np.random.Generator, reinfer=None) -> list[int]:
    out = list(context)
    for _ in range(n_new):
        if reinfer is not None:
            z = reinfer(out)
        logits = forward_logits(np.array(out, dtype=np.int64), z, params).data[-1]
        out.append(sample_token(logits, strategy, rng))
    return out


def generate_unconditional(params: DecoderParams, length: int, strategy: DecodeStrategy,
                           rng: np.random.Generator, z=None) -> np.ndarray:
    """Draw z from the prior (unless given) and decode ``length`` tokens after a single BOS."""
    cfg = params.config
    if length < 0:
        raise ValueError("length must be >= 0")
    if length > cfg.max_seq_len:
        raise SequenceLengthError(f"length {length} exceeds max_seq_len {cfg.max_seq_len}")
    if z is None:
        z = rng.standard_normal(cfg.latent_shape).astype(tt.get_default_dtype())
    ids = _decode([cfg.bos_id], z, params, length, strategy, rng)
    return np.array(ids[1:], dtype=np.int64)


def infer_latent(prompt, params: DecoderParams, infer, rng: np.random.Generator,
                 deterministic: bool = False) -> np.ndarray:
    """z for a prompt: a draw from (or the mean of) q after fast inference, or a Langevin sample."""
    prompt = np.asarray(prompt, dtype=np.int64)
    if isinstance(infer, LangevinConfig):
        z, _ = langevin_infer(prompt, params, infer, rng)
        return z
    state, _ = fast_infer(prompt, params, infer.t_fast, infer.eta, rng)
    if deterministic:
        return state.mu
    eps = rng.standard_normal(state.mu.shape).astype(state.mu.dtype)
    return state.mu + np.exp(state.logvar * 0.5) * eps


def generate_conditional(prompt, n_new: int, params: DecoderParams, infer=VBInfer(),
                         strategy: DecodeStrategy = DecodeStrategy(), rng: np.random.Generator | None = None,
                         deterministic: bool = False, reinfer: bool = False) -> np.ndarray:
    """Infer z from the prompt, then continue it by ``n_new`` tokens; returns prompt + continuation.

    With ``reinfer`` the latent is re-estimated from the whole text before
    every new token instead of being frozen after the prompt.
    """
    prompt = np.asarray(prompt, dtype=np.int64).ravel()
    if prompt.size == 0:
        raise ValueError("prompt must be non-empty")
    if n_new < 0:
        raise ValueError("n_new must be >= 0")
    if prompt.size + n_new > params.config.max_seq_len:
        raise SequenceLengthError(
            f"prompt ({prompt.size}) + n_new ({n_new}) exceeds max_seq_len {params.config.max_seq_len}")
    rng = rng if rng is not None else np.random.default_rng(0)
    if n_new == 0:
        return prompt.copy()
    z = infer_latent(prompt, params, infer, rng, deterministic)
    again = (lambda ids: infer_latent(ids, params, infer, rng, deterministic)) if reinfer else None
    return np.array(_decode(prompt.tolist(), z, params, n_new, strategy, rng, again), dtype=np.int64)
