"""Analytic compute accounting (FLOPs per token) with an exact per-component breakdown.

One multiply-accumulate counts as two FLOPs.  Only matrix products enter the
headline numbers; softmax/normalisation/activation work is reported separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .model import ModelConfig

COMPONENTS = ("self_attn", "cross_attn", "ffn", "embed")
BACKWARD_MULTIPLIER = 2


def attended_pairs(n: int, window: int) -> int:
    """sum over queries i < n of min(window, i + 1)."""
    if n <= window:
        return n * (n + 1) // 2
    return window * (window + 1) // 2 + (n - window) * window


def forward_macs(cfg: ModelConfig, n: int) -> dict[str, int]:
    L, H, F, V, nz = cfg.n_layers, cfg.hidden, cfg.ffn_hidden, cfg.vocab, cfg.n_latents
    return {
        "self_attn": L * (4 * n * H * H + 2 * attended_pairs(n, cfg.window_k) * H),
        "cross_attn": L * (2 * n * H * H + 2 * nz * H * H + 2 * n * nz * H),
        "ffn": L * 3 * n * H * F,
        "embed": n * H * V,
    }


@dataclass
class FlopsReport:
    config: ModelConfig
    seq_len: int
    t_fast: int
    flops: dict[str, int]          # exact forward FLOPs of one n-token pass, by component
    big_o: dict[str, int]          # L N^2 H, L N Nz H, L N H^2, N V H
    elementwise: int               # non-matmul forward FLOPs (not in the headline)
    backward_multiplier: int = BACKWARD_MULTIPLIER
    extra: dict = field(default_factory=dict)

    @property
    def forward_total(self) -> int:
        return sum(self.flops.values())

    @property
    def forward_per_token(self) -> Fraction:
        return Fraction(self.forward_total, self.seq_len)

    @property
    def pass_total(self) -> int:
        """Forward plus backward FLOPs for one pass over the sequence."""
        return self.forward_total * (1 + self.backward_multiplier)

    @property
    def tfpt_total(self) -> Fraction:
        return Fraction((self.t_fast + 1) * self.pass_total, self.seq_len)

    @property
    def shares(self) -> dict[str, float]:
        tot = self.forward_total
        return {k: (v / tot if tot else 0.0) for k, v in self.flops.items()}

    def record(self) -> str:
        c = self.config
        parts = [f"L={c.n_layers}", f"H={c.hidden}", f"Nz={c.n_latents}", f"V={c.vocab}",
                 f"N={self.seq_len}", f"k={c.window_k}", f"T_fast={self.t_fast}"]
        parts += [f"{k}_flops={v}" for k, v in self.flops.items()]
        parts += [f"{k}_share={v:.6f}" for k, v in self.shares.items()]
        parts += [f"elementwise_flops={self.elementwise}", f"tfpt={float(self.tfpt_total):.6g}"]
        return " ".join(parts)


def _elementwise_flops(cfg: ModelConfig, n: int) -> int:
    # rough constants: softmax ~5/score, rmsnorm ~4/elem, rope ~6/pair-element, silu+gate ~5/elem
    L, H, F, nz = cfg.n_layers, cfg.hidden, cfg.ffn_hidden, cfg.n_latents
    scores = L * cfg.n_heads * (attended_pairs(n, cfg.window_k) + n * nz)
    norms = (3 * L + 1) * 4 * n * H
    rope = L * 6 * (3 * n * H + nz * H) // 2
    act = L * 5 * n * F
    final = 5 * n * cfg.vocab
    return 5 * scores + norms + rope + act + final


def forward_flops(cfg: ModelConfig, n: int, t_fast: int = 0) -> FlopsReport:
    macs = forward_macs(cfg, n)
    L, H, V, nz = cfg.n_layers, cfg.hidden, cfg.vocab, cfg.n_latents
    big_o = {"self_attn": L * n * n * H, "cross_attn": L * n * nz * H,
             "ffn": L * n * H * H, "embed": n * V * H}
    return FlopsReport(cfg, n, t_fast, {k: 2 * v for k, v in macs.items()}, big_o,
                       _elementwise_flops(cfg, n))


def tfpt(cfg: ModelConfig, n: int, t_fast: int) -> Fraction:
    """Training FLOPs per token: (T_fast + 1) passes of forward + backward (= 2 x forward)."""
    if t_fast < 0:
        raise ValueError("t_fast must be >= 0")
    return forward_flops(cfg, n, t_fast).tfpt_total


def breakdown_sweep(configs, n: int, t_fast: int = 0) -> list[FlopsReport]:
    configs = list(configs)
    if not configs:
        raise ValueError("breakdown_sweep needs at least one config")
    return [forward_flops(c, n, t_fast) for c in configs]


def format_table(reports: list[FlopsReport]) -> str:
    head = f"{'L':>3} {'H':>5} {'Nz':>3} {'V':>6} {'N':>6} | " + " ".join(f"{c:>10}" for c in COMPONENTS) \
        + f" | {'trFLOPs/tok':>12}"
    lines = [head, "-" * len(head)]
    for r in reports:
        c = r.config
        shares = " ".join(f"{100 * r.shares[k]:>9.2f}%" for k in COMPONENTS)
        lines.append(f"{c.n_layers:>3} {c.hidden:>5} {c.n_latents:>3} {c.vocab:>6} {r.seq_len:>6} | "
                     f"{shares} | {float(r.tfpt_total):>12.4g}")
    return "\n".join(lines)


def format_csv(reports: list[FlopsReport]) -> str:
    rows = ["n_layers,hidden,n_latents,vocab,seq_len,t_fast," + ",".join(f"{c}_flops" for c in COMPONENTS)
            + "," + ",".join(f"{c}_share" for c in COMPONENTS) + ",tfpt"]
    for r in reports:
        c = r.config
        rows.append(",".join(str(v) for v in (c.n_layers, c.hidden, c.n_latents, c.vocab, r.seq_len, r.t_fast))
                    + "," + ",".join(str(r.flops[k]) for k in COMPONENTS)
                    + "," + ",".join(f"{r.shares[k]:.9f}" for k in COMPONENTS)
                    + f",{float(r.tfpt_total):.9g}")
    return "\n".join(rows)


def measured_forward_flops(params, n: int, batch: int = 1, seed: int = 0) -> dict[str, int]:
    """Run a real forward pass under the tensor MAC counter and return FLOPs per component.

    Counts are divided by ``batch`` so they compare with ``forward_flops`` for one sequence.
    """
    from . import tensor as tt
    from .model import forward_logits

    cfg = params.config
    rng = np.random.default_rng(seed)
    x = rng.integers(0, cfg.vocab, size=(batch, n))
    z = rng.standard_normal((batch, *cfg.latent_shape))
    with tt.count_macs() as counter:
        forward_logits(x, z, params)
    out = {}
    for k in COMPONENTS:
        macs = counter[k]
        if macs % batch:
            raise AssertionError("MAC count not divisible by batch size")
        out[k] = 2 * macs // batch
    stray = counter.total - sum(counter[k] for k in COMPONENTS)
    if stray:
        out["unattributed"] = 2 * stray // batch
    return out
