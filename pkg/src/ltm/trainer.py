"""Dual-rate training: per-sequence fast variational inference, then one slow decoder update per batch."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tt
from .data import PackedDataset, batch_order
from .model import DecoderParams, ModelConfig, init_params, is_gain, load_checkpoint, log_likelihood, \
    save_checkpoint
from .optim import Adam, BatchedAdam, clip_by_global_norm, fast_lr, slow_lr
from .profiler import tfpt
from .tensor import Tensor
from .variational import LOGVAR_MAX, LOGVAR_MIN, VariationalState, init_state, kl_to_prior, reparam_sample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    t_fast: int = 16
    eta_fast_start: float = 0.3
    eta_fast_end: float = 0.34
    eta_slow_peak: float = 4e-4
    eta_slow_floor: float = 4e-5
    warmup_steps: int = 1000
    total_steps: int = 10000
    batch_size: int = 8
    grad_clip_norm: float = 1.0
    adamw_beta1: float = 0.9
    adamw_beta2: float = 0.95
    adam_fast_beta1: float = 0.9
    adam_fast_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0
    persist_states: bool = False
    frozen: tuple[str, ...] = ()
    plateau_patience: int = 0
    plateau_min_delta: float = 1e-3

    def __post_init__(self):
        if self.t_fast < 0:
            raise ValueError("t_fast must be >= 0")
        if min(self.eta_fast_start, self.eta_fast_end, self.eta_slow_peak, self.eta_slow_floor) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def fast_lr(self, t: float) -> float:
        return fast_lr(t, self.total_steps, self.eta_fast_start, self.eta_fast_end)

    def slow_lr(self, t: float) -> float:
        return slow_lr(t, self.total_steps, self.warmup_steps, self.eta_slow_peak, self.eta_slow_floor)

    def to_header(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f"train.{f.name}"] = ",".join(v) if isinstance(v, tuple) else repr(v)
        return out


def sequence_rngs(seed: int, step: int, indices) -> list[np.random.Generator]:
    """Independent counter-based streams keyed by (seed, step, sequence index)."""
    return [np.random.Generator(np.random.Philox(key=[seed, step * 1_000_003 + int(i)])) for i in indices]


def _draw(rngs, shape, dtype) -> np.ndarray:
    return np.stack([r.standard_normal(shape) for r in rngs]).astype(dtype)


def fast_infer(x, params: DecoderParams, t_fast: int, eta_fast: float, rng,
               betas=(0.9, 0.999), eps: float = 1e-8,
               init: VariationalState | None = None) -> tuple[VariationalState, np.ndarray]:
    """Maximise the single-sample ELBO over (mu, logvar) with ``t_fast`` Adam steps.

    ``x`` is [T] or [B, T].  ``rng`` is one Generator or a list with one per
    sequence; sequence i draws all of its noise from its own stream, so batched
    and one-at-a-time inference agree.  Returns the final state and the ELBO
    trace ([t_fast] or [t_fast, B]) evaluated before each update.  A step with a
    non-finite ELBO or gradient is skipped for that sequence.  Decoder weights
    are never modified.
    """
    xa = np.asarray(x)
    batched = xa.ndim == 2
    xb = xa if batched else xa[None]
    B = xb.shape[0]
    rngs = list(rng) if isinstance(rng, (list, tuple)) else [rng]
    if len(rngs) != B:
        raise ValueError(f"need one rng per sequence ({B}), got {len(rngs)}")
    cfg = params.config
    dtype = tt.get_default_dtype()
    if init is None:
        state = init_state(cfg, B, dtype)
    else:
        state = VariationalState(np.array(init.mu, dtype).reshape(B, *cfg.latent_shape),
                                 np.array(init.logvar, dtype).reshape(B, *cfg.latent_shape))
    trace = np.zeros((t_fast, B))
    if t_fast == 0 or xb.shape[1] < 2:
        return (state if batched else state[0]), (trace if batched else trace[:, 0])

    saved_flags = {k: p.requires_grad for k, p in params.items()}
    params.requires_grad_(False)
    opt_mu = BatchedAdam(state.mu.shape, betas, eps, dtype)
    opt_lv = BatchedAdam(state.mu.shape, betas, eps, dtype)
    try:
        for step in range(t_fast):
            noise = _draw(rngs, cfg.latent_shape, dtype)
            mu = Tensor(state.mu, requires_grad=True)
            lv = Tensor(state.logvar, requires_grad=True)
            recon, _ = log_likelihood(xb, reparam_sample(mu, lv, noise), params)
            elbo = recon - kl_to_prior(mu, lv)
            (-elbo.sum()).backward()
            g_mu, g_lv = mu.grad, lv.grad
            ok = np.isfinite(elbo.data)
            ok &= np.isfinite(g_mu).reshape(B, -1).all(axis=1) & np.isfinite(g_lv).reshape(B, -1).all(axis=1)
            if not ok.all():
                log.warning("fast step %d: non-finite ELBO for sequences %s; step skipped",
                            step, np.flatnonzero(~ok).tolist())
            trace[step] = elbo.data
            opt_mu.step(state.mu, np.nan_to_num(g_mu), eta_fast, ok)
            opt_lv.step(state.logvar, np.nan_to_num(g_lv), eta_fast, ok)
            np.clip(state.logvar, LOGVAR_MIN, LOGVAR_MAX, out=state.logvar)
    finally:
        for k, p in params.items():
            p.requires_grad = saved_flags[k]
    return (state if batched else state[0]), (trace if batched else trace[:, 0])


def _is_frozen(name: str, frozen) -> bool:
    return any(name == f or name.endswith("." + f) or name.endswith(f) for f in frozen)


class SlowOptimizer:
    """AdamW over the decoder weights; frozen names are neither updated nor clipped."""

    def __init__(self, params: DecoderParams, cfg: TrainConfig):
        self.trainable = [k for k in params if not _is_frozen(k, cfg.frozen)]
        decay = {k: not (is_gain(k) or k == "tok_emb") for k in self.trainable}
        self.adam = Adam({k: params[k].shape for k in self.trainable},
                         betas=(cfg.adamw_beta1, cfg.adamw_beta2), eps=cfg.adam_eps,
                         weight_decay=cfg.weight_decay, decay=decay,
                         dtype=params["tok_emb"].dtype)


@dataclass
class StepMetrics:
    step: int
    elbo: float
    recon: float
    kl: float
    grad_norm: float
    lr_fast: float
    lr_slow: float
    tokens_seen: int
    tfpt_cum: float
    fast_up: int = 0
    skipped: int = 0
    wall: float = 0.0

    FIELDS = ("step", "elbo", "recon", "kl", "grad_norm", "lr_fast", "lr_slow", "tokens_seen",
              "tfpt_cum", "fast_up", "skipped", "wall")

    def line(self) -> str:
        parts = []
        for k in self.FIELDS:
            v = getattr(self, k)
            parts.append(f"{k}={v:.9g}" if isinstance(v, float) else f"{k}={v}")
        return " ".join(parts)

    @classmethod
    def parse(cls, line: str) -> "StepMetrics":
        kv = dict(p.split("=", 1) for p in line.split())
        ints = {"step", "tokens_seen", "fast_up", "skipped"}
        return cls(**{k: (int(kv[k]) if k in ints else float(kv[k])) for k in cls.FIELDS if k in kv})


def slow_step(x, params: DecoderParams, opt: SlowOptimizer, state: VariationalState, lr: float,
              clip_norm: float, noise: np.ndarray) -> dict:
    """One AdamW step on the batch-mean negative ELBO per predicted token, q held fixed.

    Returns recon/kl/elbo per sequence (means over the batch), the pre-clip
    gradient norm and whether the update was skipped.
    """
    xb = np.asarray(x)
    B, T = xb.shape
    params.zero_grad()
    for k in opt.trainable:
        params[k].requires_grad = True
    z = reparam_sample(state.mu, state.logvar, noise)
    recon, _ = log_likelihood(xb, z, params)
    kl = kl_to_prior(state.mu, state.logvar).data
    elbo = recon.data - kl
    loss = -(recon.sum()) * (1.0 / (B * (T - 1)))
    loss.backward()
    grads = {k: params[k].grad for k in opt.trainable if params[k].grad is not None}
    for k in params:
        params[k].requires_grad = False
    grads, norm = clip_by_global_norm(grads, clip_norm)
    skipped = not (np.isfinite(elbo).all() and np.isfinite(norm))
    if skipped:
        log.warning("slow step skipped: non-finite batch loss or gradient")
    else:
        opt.adam.step({k: params[k].data for k in grads}, grads, lr)
    params.zero_grad()
    return {"elbo": float(elbo.mean()), "recon": float(recon.data.mean()), "kl": float(kl.mean()),
            "grad_norm": norm, "skipped": skipped, "elbo_per_seq": elbo}


@dataclass
class TrainResult:
    params: DecoderParams
    metrics: list[StepMetrics]
    checkpoint: Path
    stopped_early: bool = False
    states: dict[int, VariationalState] = field(default_factory=dict)


def _steps_per_epoch(ds: PackedDataset, batch_size: int) -> int:
    n = ds.n_rows // batch_size
    if n < 1:
        raise ValueError(f"dataset has {ds.n_rows} rows, fewer than batch_size={batch_size}")
    return n


def batch_rows(ds: PackedDataset, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Row indices used at 1-based ``step``: epochs are consecutive seeded permutations."""
    per = _steps_per_epoch(ds, batch_size)
    epoch, b = divmod(step - 1, per)
    order = batch_order(ds.n_rows, seed, epoch)
    return order[b * batch_size:(b + 1) * batch_size]


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"step{step:07d}.ltmc"


def _save(out_dir: Path, params, opt: SlowOptimizer, step: int, tcfg: TrainConfig,
          states: dict[int, VariationalState]) -> Path:
    path = checkpoint_path(out_dir, step)
    extra = opt.adam.state_tensors()
    for i, st in states.items():
        extra[f"state.{i}.mu"] = st.mu
        extra[f"state.{i}.logvar"] = st.logvar
    header = {"opt.t": opt.adam.t}
    header.update(tcfg.to_header())
    save_checkpoint(path, params, step, header, extra)
    return path


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: PackedDataset, out_dir,
          resume=None, params: DecoderParams | None = None, max_steps: int | None = None,
          on_step: Callable | None = None) -> TrainResult:
    """Run the dual-rate loop until ``total_steps`` (or ``max_steps`` further steps).

    Writes ``metrics.log`` and ``checkpoints/`` under ``out_dir``.  ``resume`` is
    a checkpoint path written by an earlier run with the same configs; the
    continued run reproduces the uninterrupted one.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory {out_dir} is not writable: {e}") from e
    if dataset.n_rows == 0:
        raise ValueError("empty dataset")
    _steps_per_epoch(dataset, train_cfg.batch_size)

    states: dict[int, VariationalState] = {}
    if resume is not None:
        params, header, extra = load_checkpoint(resume)
        if params.config != model_cfg:
            raise ValueError("checkpoint model config differs from the requested config")
        start = int(header["step"])
        opt = SlowOptimizer(params, train_cfg)
        opt.adam.load_state_tensors(extra, int(header.get("opt.t", 0)))
        for k, v in extra.items():
            if k.startswith("state.") and k.endswith(".mu"):
                i = int(k.split(".")[1])
                states[i] = VariationalState(v.copy(), extra[f"state.{i}.logvar"].copy())
    else:
        params = params if params is not None else init_params(model_cfg, train_cfg.seed)
        start = 0
        opt = SlowOptimizer(params, train_cfg)
    params.requires_grad_(False)

    metrics_path = out_dir / "metrics.log"
    history: list[StepMetrics] = []
    if resume is not None and metrics_path.exists():
        kept = [ln for ln in metrics_path.read_text().splitlines()
                if ln and StepMetrics.parse(ln).step <= start]
        history = [StepMetrics.parse(ln) for ln in kept]
        metrics_path.write_text("".join(ln + "\n" for ln in kept))
    elif resume is None:
        metrics_path.write_text("")

    T = dataset.seq_len
    per_tok = float(tfpt(model_cfg, T, train_cfg.t_fast))
    dtype = params["tok_emb"].dtype
    end = train_cfg.total_steps if max_steps is None else min(train_cfg.total_steps, start + max_steps)
    ckpt = _save(out_dir, params, opt, start, train_cfg, states) if start == 0 else checkpoint_path(out_dir, start)
    best, since_best, stopped = -np.inf, 0, False
    t0 = time.perf_counter()

    with open(metrics_path, "a") as mlog:
        for step in range(start + 1, end + 1):
            rows = batch_rows(dataset, train_cfg.batch_size, train_cfg.seed, step)
            x = dataset.rows[rows]
            rngs = sequence_rngs(train_cfg.seed, step, rows)
            init = None
            if train_cfg.persist_states:
                init = VariationalState.stack([states.get(int(r), init_state(model_cfg, None, dtype)) for r in rows])
            lr_f, lr_s = train_cfg.fast_lr(step), train_cfg.slow_lr(step)
            state, trace = fast_infer(x, params, train_cfg.t_fast, lr_f, rngs,
                                      (train_cfg.adam_fast_beta1, train_cfg.adam_fast_beta2),
                                      train_cfg.adam_eps, init)
            noise = _draw(rngs, model_cfg.latent_shape, dtype)
            res = slow_step(x, params, opt, state, lr_s, train_cfg.grad_clip_norm, noise)
            if train_cfg.persist_states:
                for j, r in enumerate(rows):
                    states[int(r)] = state[j]
            fast_up = int((trace[-1] > trace[0]).sum()) if train_cfg.t_fast >= 2 else 0
            m = StepMetrics(step, res["elbo"], res["recon"], res["kl"], res["grad_norm"], lr_f, lr_s,
                            step * len(rows) * T, per_tok * step * len(rows) * T, fast_up,
                            int(res["skipped"]), time.perf_counter() - t0)
            history.append(m)
            mlog.write(m.line() + "\n")
            mlog.flush()
            if on_step is not None:
                on_step(step, rows, state, trace, m)
            if train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                ckpt = _save(out_dir, params, opt, step, train_cfg, states)
            if train_cfg.plateau_patience:
                if m.elbo > best + train_cfg.plateau_min_delta:
                    best, since_best = m.elbo, 0
                else:
                    since_best += 1
                    if since_best >= train_cfg.plateau_patience:
                        stopped = True
                        end = step
                        break
    if end > start and not (train_cfg.checkpoint_every and end % train_cfg.checkpoint_every == 0):
        ckpt = _save(out_dir, params, opt, end, train_cfg, states)
    elif end > start:
        ckpt = checkpoint_path(out_dir, end)
    return TrainResult(params, history, ckpt, stopped, states)


def read_metrics(path) -> list[StepMetrics]:
    return [StepMetrics.parse(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]
