"""Adam / AdamW on plain numpy arrays, learning-rate schedules and gradient clipping."""

from __future__ import annotations

import math

import numpy as np


class Adam:
    """Adam with optional decoupled weight decay (AdamW when ``weight_decay > 0``).

    ``decay`` maps parameter name -> whether weight decay applies to it.
    """

    def __init__(self, shapes: dict[str, tuple], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decay: dict[str, bool] | None = None, dtype=np.float32):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = decay or {}
        self.m = {k: np.zeros(s, dtype) for k, s in shapes.items()}
        self.v = {k: np.zeros(s, dtype) for k, s in shapes.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        """In-place update of every array in ``params`` that has an entry in ``grads``."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if self.weight_decay and self.decay.get(name, False):
                p *= p.dtype.type(1.0 - lr * self.weight_decay)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)

    def state_tensors(self, prefix: str = "opt") -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int, prefix: str = "opt") -> None:
        for k in self.m:
            self.m[k] = np.array(tensors[f"{prefix}.m.{k}"], dtype=self.m[k].dtype)
            self.v[k] = np.array(tensors[f"{prefix}.v.{k}"], dtype=self.v[k].dtype)
        self.t = t


class BatchedAdam:
    """Elementwise Adam for a batch of independent per-sequence parameter arrays.

    Each row of the leading axis owns its own moments and step count, so a row
    whose step is skipped is left exactly as it was.
    """

    def __init__(self, shape: tuple, betas=(0.9, 0.999), eps: float = 1e-8, dtype=np.float32):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros(shape, dtype)
        self.v = np.zeros(shape, dtype)
        self.t = np.zeros(shape[0], dtype=np.int64)

    def step(self, p: np.ndarray, g: np.ndarray, lr: float, active: np.ndarray) -> None:
        idx = np.flatnonzero(active)
        if idx.size == 0:
            return
        self.t[idx] += 1
        shape = (-1,) + (1,) * (p.ndim - 1)
        bc1 = (1.0 - self.beta1 ** self.t[idx]).reshape(shape)
        bc2 = (1.0 - self.beta2 ** self.t[idx]).reshape(shape)
        m = self.beta1 * self.m[idx] + (1.0 - self.beta1) * g[idx]
        v = self.beta2 * self.v[idx] + (1.0 - self.beta2) * (g[idx] * g[idx])
        self.m[idx] = m
        self.v[idx] = v
        p[idx] -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm / norm when the global norm exceeds max_norm."""
    norm = global_norm(grads.values())
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: (g * scale).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


def fast_lr(t: float, total_steps: int, start: float = 0.3, end: float = 0.34) -> float:
    """Linear ramp from ``start`` at t=0 to ``end`` at t=total_steps."""
    if total_steps <= 0:
        return start
    frac = min(max(t / total_steps, 0.0), 1.0)
    return start + (end - start) * frac


def slow_lr(t: float, total_steps: int, warmup_steps: int = 1000, peak: float = 4e-4,
            floor: float = 4e-5) -> float:
    """Linear warmup 0 -> peak, then cosine decay peak -> floor at total_steps."""
    if warmup_steps > 0 and t < warmup_steps:
        return peak * t / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return peak if t <= warmup_steps else floor
    frac = min(max((t - warmup_steps) / span, 0.0), 1.0)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))
