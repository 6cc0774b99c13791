"""Evaluation: ELBO perplexity bounds, entropy of generations, reconstruction accuracy and layer probing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import tensor as tt
from .model import DecoderParams, forward_logits
from .trainer import fast_infer, sequence_rngs
from .variational import VariationalState, elbo


def ppl_upper_bound(total_elbo: float, n_predicted_tokens: int) -> float:
    """exp(-ELBO / tokens); an upper bound on perplexity because the ELBO bounds log evidence from below."""
    if n_predicted_tokens < 1:
        raise ValueError("need at least one predicted token")
    return math.exp(-float(total_elbo) / n_predicted_tokens)


def unigram_entropy(tokens) -> float:
    """Entropy in nats of the empirical token frequencies."""
    t = np.asarray(tokens).ravel()
    if t.size == 0:
        raise ValueError("unigram_entropy of an empty sequence")
    _, counts = np.unique(t, return_counts=True)
    p = counts / t.size
    return float(-(p * np.log(p)).sum())


def predictive_entropy(logits) -> float:
    """Mean entropy in nats of the next-token distributions given by ``logits`` [..., V]."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-(np.exp(logp) * logp).sum(axis=-1).mean())


def reconstruction_accuracy(x, x_hat) -> float:
    x, x_hat = np.asarray(x), np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {x_hat.shape}")
    if x.size == 0:
        raise ValueError("reconstruction_accuracy of empty sequences")
    return float((x == x_hat).mean())


def _masked_latent(mu: np.ndarray, m: int) -> np.ndarray:
    z = np.array(mu, copy=True)
    if m < z.shape[-3]:
        z[..., m:, :, :] = 0.0
    return z


def reconstruct(x, z, params: DecoderParams, free_running: bool = False) -> np.ndarray:
    """Greedy reconstruction of x[1:] from x[0] and z.

    Teacher forcing feeds the true prefix at every position; free running feeds
    back the model's own argmax.
    """
    x = np.asarray(x, dtype=np.int64)
    if not free_running:
        return forward_logits(x[..., :-1], z, params).data.argmax(axis=-1)
    if x.ndim != 1:
        return np.stack([reconstruct(xi, zi, params, True) for xi, zi in zip(x, z)])
    out = [int(x[0])]
    for _ in range(len(x) - 1):
        logits = forward_logits(np.array(out), z, params).data[-1]
        out.append(int(np.argmax(logits)))
    return np.array(out[1:], dtype=np.int64)


def progressive_probe(x, state: VariationalState, params: DecoderParams, m: int,
                      free_running: bool = False) -> tuple[np.ndarray, float]:
    """Reconstruct with layers 1..m taken from mu and the rest at the prior mean (zero).

    Accuracy is over the T-1 predicted positions.
    """
    L = params.config.n_layers
    if not 0 <= m <= L:
        raise ValueError(f"m={m} outside 0..{L}")
    x = np.asarray(x, dtype=np.int64)
    z = state.mu if m == L else _masked_latent(state.mu, m)
    x_hat = reconstruct(x, z, params, free_running)
    return x_hat, reconstruction_accuracy(x[..., 1:], x_hat)


@dataclass
class ProbeReport:
    n_layers: int
    accuracy: dict[int, float]
    rows: list[dict] = field(default_factory=list)

    def gap(self) -> float:
        return self.accuracy[self.n_layers] - self.accuracy[0]

    def table(self) -> str:
        lines = [f"{'m':>3} {'accuracy':>10}", "-" * 14]
        lines += [f"{m:>3} {a:>10.4f}" for m, a in sorted(self.accuracy.items())]
        return "\n".join(lines)

    def records(self) -> str:
        out = [f"m={m} accuracy={a:.9g}" for m, a in sorted(self.accuracy.items())]
        for r in self.rows:
            out.append(" ".join(f"{k}={v:.9g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
        return "\n".join(out)


def run_probe(xs, params: DecoderParams, t_fast: int = 16, eta: float = 0.34, seed: int = 0,
              states: VariationalState | None = None, batch_size: int = 8,
              free_running: bool = False) -> tuple[ProbeReport, VariationalState]:
    """Sweep m over 0..L on a probe set [n, T], inferring each sequence's q once."""
    xs = np.asarray(xs, dtype=np.int64)
    L = params.config.n_layers
    if states is None:
        parts = []
        for b in range(0, len(xs), batch_size):
            xb = xs[b:b + batch_size]
            st, _ = fast_infer(xb, params, t_fast, eta, sequence_rngs(seed, 0, range(b, b + len(xb))))
            parts.append(st)
        states = VariationalState(np.concatenate([s.mu for s in parts]), np.concatenate([s.logvar for s in parts]))
    per_seq = np.zeros((len(xs), L + 1))
    for m in range(L + 1):
        for i in range(len(xs)):
            _, per_seq[i, m] = progressive_probe(xs[i], states[i], params, m, free_running)
    acc = {m: float(per_seq[:, m].mean()) for m in range(L + 1)}
    rows = [{"seq": i, **{f"acc_m{m}": float(per_seq[i, m]) for m in range(L + 1)}} for i in range(len(xs))]
    return ProbeReport(L, acc, rows), states


@dataclass
class EvalReport:
    n_sequences: int
    n_tokens: int
    elbo: float
    recon: float
    kl: float

    @property
    def ppl(self) -> float:
        return ppl_upper_bound(self.elbo, self.n_tokens)

    def records(self) -> str:
        return (f"n_sequences={self.n_sequences} n_tokens={self.n_tokens} elbo={self.elbo:.9g} "
                f"recon={self.recon:.9g} kl={self.kl:.9g} ppl_bound={self.ppl:.9g}")


def evaluate(xs, params: DecoderParams, t_fast: int = 16, eta: float = 0.34, n_mc: int = 8,
             seed: int = 0, batch_size: int = 8) -> EvalReport:
    """Fast inference per sequence, then a Monte Carlo ELBO summed over the split."""
    xs = np.asarray(xs, dtype=np.int64)
    tot_e = tot_r = tot_k = 0.0
    for b in range(0, len(xs), batch_size):
        xb = xs[b:b + batch_size]
        st, _ = fast_infer(xb, params, t_fast, eta, sequence_rngs(seed, 0, range(b, b + len(xb))))
        e = elbo(xb, st, params, n_mc, np.random.default_rng([seed, b]))
        tot_e += float(e.elbo.sum())
        tot_r += float(e.recon.sum())
        tot_k += float(e.kl.sum())
    return EvalReport(len(xs), len(xs) * (xs.shape[1] - 1), tot_e, tot_r, tot_k)


class ExternalScorer(Protocol):
    """Anything that returns per-token log-probabilities (nats) for a piece of generated text."""

    def score(self, text: bytes) -> np.ndarray: ...


def generative_perplexity(texts, scorer: ExternalScorer) -> float:
    total, n = 0.0, 0
    for t in texts:
        lp = np.asarray(scorer.score(t), dtype=np.float64)
        total += float(lp.sum())
        n += lp.size
    if n == 0:
        raise ValueError("scorer returned no tokens")
    return math.exp(-total / n)


def with_precision(fn, dtype=np.float64):
    """Run ``fn`` under the given default dtype; evaluation helpers are otherwise dtype-agnostic."""
    with tt.precision(dtype):
        return fn()
