"""The latent-thought decoder: windowed self-attention layers that cross-attend to per-layer latents."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as tt
from .container import ContainerError, read_container, write_container
from .tensor import Tensor, mac_scope

BYTE_VOCAB = 258
BOS_ID = 257


class SequenceLengthError(ValueError):
    pass


class CheckpointError(ContainerError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 3
    hidden: int = 64
    n_heads: int = 4
    n_latents: int = 4
    vocab: int = BYTE_VOCAB
    window_k: int = 64
    max_seq_len: int = 256
    rope_base: float = 10000.0
    ffn_mult: float = 8 / 3
    bos_id: int | None = None       # defaults to the last id (257 for the byte vocabulary)

    def __post_init__(self):
        if self.bos_id is None:
            object.__setattr__(self, "bos_id", self.vocab - 1)
        problems = []
        if self.n_layers < 1:
            problems.append("n_layers must be >= 1")
        if self.hidden < self.n_heads or self.n_heads < 1 or self.hidden % self.n_heads:
            problems.append(f"n_heads={self.n_heads} must divide hidden={self.hidden}")
        elif (self.hidden // self.n_heads) % 2:
            problems.append("head_dim must be even for rotary embeddings")
        if self.n_latents < 1:
            problems.append("n_latents must be >= 1")
        if self.vocab < 2:
            problems.append("vocab must be >= 2")
        if not 1 <= self.window_k <= self.max_seq_len:
            problems.append("need 1 <= window_k <= max_seq_len")
        if not 0 <= self.bos_id < self.vocab:
            problems.append("bos_id outside vocabulary")
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    @classmethod
    def unchecked(cls, **kwargs) -> "ModelConfig":
        """Build without validation (degenerate shapes used only by compute-accounting tests)."""
        obj = object.__new__(cls)
        for f in dataclasses.fields(cls):
            object.__setattr__(obj, f.name, kwargs.get(f.name, f.default))
        return obj

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    @property
    def ffn_hidden(self) -> int:
        return nn.ffn_width(self.hidden, self.ffn_mult)

    @property
    def n_latents_total(self) -> int:
        return self.n_layers * self.n_latents

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.n_layers, self.n_latents, self.hidden)

    def attention(self) -> nn.AttentionConfig:
        return nn.AttentionConfig(self.n_heads, self.head_dim, self.window_k, self.rope_base)

    def to_header(self) -> dict[str, str]:
        return {f"model.{f.name}": repr(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_header(cls, header: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            key = f"model.{f.name}"
            if key in header:
                kwargs[f.name] = float(header[key]) if f.type == "float" else int(header[key])
        return cls(**kwargs)


PRESETS = {
    "ltm-small": 3,
    "ltm-medium": 6,
    "ltm-large": 12,
}


def preset(name: str, **overrides) -> ModelConfig:
    """Desk-scale configs with the 3/6/12 layer ratios of the small/medium/large variants."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(n_layers=PRESETS[name], **overrides)


OUTPUT_PROJECTIONS = ("attn.wo", "cross.wo", "ffn.w_out")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, F = cfg.hidden, cfg.ffn_hidden
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (cfg.vocab, H)}
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes[p + "attn_norm"] = (H,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + w] = (H, H)
        shapes[p + "cross_norm"] = (H,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + "cross." + w] = (H, H)
        shapes[p + "ffn_norm"] = (H,)
        shapes[p + "ffn.w_in"] = (H, F)
        shapes[p + "ffn.w_gate"] = (H, F)
        shapes[p + "ffn.w_out"] = (F, H)
    shapes["final_norm"] = (H,)
    shapes["unembed"] = (H, cfg.vocab)
    return shapes


def is_gain(name: str) -> bool:
    return name.endswith("norm")


class DecoderParams:
    """All global decoder weights, keyed by dotted name."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise CheckpointError(f"parameter names mismatch (missing {missing[:3]}, extra {extra[:3]})")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise CheckpointError(f"{name}: shape {tensors[name].shape} != {shape} from config")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def requires_grad_(self, flag: bool = True) -> "DecoderParams":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.config, {k: Tensor(v.data.copy()) for k, v in self.tensors.items()})

    def astype(self, dtype) -> "DecoderParams":
        with tt.precision(dtype):
            return DecoderParams(self.config, {k: Tensor(v.data) for k, v in self.tensors.items()})

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 3.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 3.0
    return out * std


def init_params(config: ModelConfig, seed: int = 0, std: float = 0.02) -> DecoderParams:
    """Truncated-normal weights (±3σ), unit norm gains, residual outputs scaled by 1/sqrt(2L)."""
    rng = np.random.default_rng(seed)
    out_scale = 1.0 / np.sqrt(2 * config.n_layers)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if is_gain(name):
            arr = np.ones(shape)
        else:
            arr = _trunc_normal(rng, shape, std)
            if name.endswith(OUTPUT_PROJECTIONS):
                arr *= out_scale
        tensors[name] = Tensor(arr)
    return DecoderParams(config, tensors)


def _as_batch(x, z):
    x = np.asarray(x)
    batched = x.ndim == 2
    if not batched:
        x = x[None]
    if z is not None:
        z = tt.as_tensor(z)
        if not batched:
            z = z.reshape(1, *z.shape)
    return x, z, batched


def forward_logits(x, z, params: DecoderParams, capture: dict | None = None) -> Tensor:
    """Next-token logits for every position of ``x`` given latents ``z``.

    ``x`` is [T] or [B, T] token ids; ``z`` is [L, N, H] or [B, L, N, H].  With
    ``z=None`` the cross-attention sublayers are skipped entirely, giving a plain
    windowed autoregressive decoder.  ``capture`` collects per-layer residual
    stream snapshots keyed ``(layer, stage)``.
    """
    cfg = params.config
    x, z, batched = _as_batch(x, z)
    T = x.shape[1]
    if T > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if z is not None and tuple(z.shape[1:]) != cfg.latent_shape:
        raise tt.ShapeError(f"latent shape {z.shape[1:]} != {cfg.latent_shape}")
    acfg = cfg.attention()
    pos = np.arange(T)

    h = tt.embedding(params["tok_emb"], x)
    if capture is not None:
        capture[(-1, "embed")] = h.data.copy()
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        with mac_scope("self_attn"):
            a = tt.rmsnorm(h, params[p + "attn_norm"], nn.NORM_EPS)
            h = h + nn.self_attention(a, params[p + "attn.wq"], params[p + "attn.wk"],
                                      params[p + "attn.wv"], params[p + "attn.wo"], acfg, pos)
        if capture is not None:
            capture[(l, "self_attn")] = h.data.copy()
        if z is not None:
            with mac_scope("cross_attn"):
                a = tt.rmsnorm(h, params[p + "cross_norm"], nn.NORM_EPS)
                h = h + nn.latent_cross_attn(a, z[:, l], params[p + "cross.wq"], params[p + "cross.wk"],
                                             params[p + "cross.wv"], params[p + "cross.wo"], acfg, pos)
            if capture is not None:
                capture[(l, "cross_attn")] = h.data.copy()
        with mac_scope("ffn"):
            a = tt.rmsnorm(h, params[p + "ffn_norm"], nn.NORM_EPS)
            h = h + nn.swiglu_ffn(a, params[p + "ffn.w_in"], params[p + "ffn.w_gate"],
                                  params[p + "ffn.w_out"])
        if capture is not None:
            capture[(l, "ffn")] = h.data.copy()
    h = tt.rmsnorm(h, params["final_norm"], nn.NORM_EPS)
    with mac_scope("embed"):
        logits = h @ params["unembed"]
    return logits if batched else logits.reshape(T, cfg.vocab)


def log_likelihood(x, z, params: DecoderParams) -> tuple[Tensor, Tensor]:
    """log p(x[1:] | z, x[0]) in nats: (total, per-token values).

    The first token is context only, so a length-T sequence contributes T-1 terms.
    Batched input returns totals of shape [B] and per-token values [B, T-1].
    """
    xa = np.asarray(x)
    if xa.shape[-1] < 2:
        raise ValueError("log_likelihood needs at least two tokens")
    if xa.size and (xa.min() < 0 or xa.max() >= params.config.vocab):
        raise IndexError("token id out of vocabulary range")
    logits = forward_logits(xa[..., :-1], z, params)
    per_token = tt.token_log_probs(logits, xa[..., 1:])
    return per_token.sum(axis=-1), per_token


def save_checkpoint(path, params: DecoderParams, step: int = 0, header: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    head = {"kind": "ltm-checkpoint", "step": str(step)}
    head.update(params.config.to_header())
    if header:
        head.update({k: str(v) for k, v in header.items()})
    tensors = {f"param.{k}": v for k, v in params.state_dict().items()}
    for k, v in (extra or {}).items():
        tensors[k] = v
    write_container(path, head, tensors)


def load_checkpoint(path) -> tuple[DecoderParams, dict[str, str], dict[str, np.ndarray]]:
    """Returns (params, header, extra tensors).  Shapes are checked against the embedded config."""
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header, tensors = read_container(path)
    if header.get("kind") != "ltm-checkpoint":
        raise CheckpointError(f"{path}: not an LTM checkpoint")
    config = ModelConfig.from_header(header)
    with tt.precision(np.float32):
        params = {k[len("param."):]: Tensor(v) for k, v in tensors.items() if k.startswith("param.")}
    extra = {k: v for k, v in tensors.items() if not k.startswith("param.")}
    return DecoderParams(config, params), header, extra
