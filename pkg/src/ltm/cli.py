"""Command-line entry point: ``ltm {train,eval,infer,generate,probe,flops}``.

Configuration files hold one ``key = value`` per line; ``#`` starts a comment.
``--set key=value`` overrides a file entry.  Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .container import ContainerError
from .data import detokenize, load_corpus, pack_corpus, split_docs, synthetic_corpus, tokenize
from .model import ModelConfig, SequenceLengthError, load_checkpoint
from .tensor import NumericError

log = logging.getLogger("ltm")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _train_fields():
    from .trainer import TrainConfig
    return {f.name: f.default for f in dataclasses.fields(TrainConfig)}


def config_schema() -> dict[str, object]:
    """Every accepted key with its default; the default's type is the value type."""
    schema: dict[str, object] = {f.name: f.default for f in dataclasses.fields(ModelConfig)}
    schema.update(_train_fields())
    schema.update({
        "corpus": "",                  # file, directory, or "synthetic"
        "synthetic_docs": 32,
        "synthetic_doc_bytes": 512,
        "synthetic_seed": 0,
        "seq_len": 0,                  # packing length; 0 means max_seq_len
        "val_fraction": 0.1,
        "run_dir": "runs/default",
        "dtype": "float32",
    })
    return schema


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if default is None:  # optional integer, e.g. bos_id (None means vocab - 1)
            return None if raw.lower() in ("", "none") else int(raw)
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(s.strip() for s in raw.split(",") if s.strip())
    except ValueError:
        kind = "optional int" if default is None else type(default).__name__
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(path: str | None, overrides: list[str]) -> dict[str, object]:
    """Defaults, then the file, then ``--set`` overrides; unknown keys raise ConfigError."""
    schema = config_schema()
    raw: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        raw.update(parse_config_text(p.read_text(), str(p)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = dict(schema)
    for k, v in raw.items():
        cfg[k] = _coerce(k, v, schema[k])
    return cfg


def format_config(cfg: dict) -> str:
    lines = []
    for k, v in cfg.items():
        lines.append(f"{k} = {','.join(v) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"


def model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**{f.name: cfg[f.name] for f in dataclasses.fields(ModelConfig)})
    except ValueError as e:
        raise ConfigError(str(e)) from None


def train_config(cfg: dict):
    from .trainer import TrainConfig
    try:
        return TrainConfig(**{k: cfg[k] for k in _train_fields()})
    except ValueError as e:
        raise ConfigError(str(e)) from None


def corpus_docs(cfg: dict) -> list[bytes]:
    src = cfg["corpus"]
    if not src:
        raise ConfigError("no corpus given (set corpus = <path> or corpus = synthetic)")
    if src == "synthetic":
        return synthetic_corpus(cfg["synthetic_docs"], cfg["synthetic_doc_bytes"], cfg["synthetic_seed"])
    return load_corpus(src)


def dataset_split(cfg: dict, split: str):
    docs = corpus_docs(cfg)
    train_docs, val_docs = split_docs(docs, cfg["val_fraction"])
    seq_len = cfg["seq_len"] or cfg["max_seq_len"]
    chosen = {"train": train_docs, "val": val_docs, "all": docs}[split]
    if not chosen:
        raise ConfigError(f"split {split!r} is empty")
    return pack_corpus(chosen, seq_len)


def run_dirs(root) -> dict[str, Path]:
    root = Path(root)
    d = {"root": root, "checkpoints": root / "checkpoints", "samples": root / "samples", "reports": root / "reports"}
    for p in d.values():
        p.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, cfg) -> int:
    from .trainer import train
    mcfg, tcfg = model_config(cfg), train_config(cfg)
    dirs = run_dirs(args.run_dir or cfg["run_dir"])
    (dirs["root"] / "config.resolved").write_text(format_config(cfg))
    ds = dataset_split(cfg, "train")
    res = train(mcfg, tcfg, ds, dirs["root"], resume=args.resume)
    last = res.metrics[-1].line() if res.metrics else "step=0"
    print(f"checkpoint={res.checkpoint}")
    print(last)
    return EXIT_OK


def _load(path):
    params, header, _ = load_checkpoint(path)
    return params, header


def cmd_eval(args, cfg) -> int:
    from .evalprobe import evaluate
    params, _ = _load(args.checkpoint)
    cfg = dict(cfg, max_seq_len=params.config.max_seq_len)
    ds = dataset_split(cfg, args.split)
    rep = evaluate(ds.rows, params, args.t_fast, args.eta, args.n_mc, args.seed)
    print(rep.records())
    if args.out:
        Path(args.out).write_text(rep.records() + "\n")
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    from .trainer import fast_infer, sequence_rngs
    from .variational import VariationalState, save_states
    params, _ = _load(args.checkpoint)
    cfg = dict(cfg, max_seq_len=params.config.max_seq_len)
    ds = dataset_split(cfg, args.split)
    states = {}
    for b in range(0, ds.n_rows, 8):
        xb = ds.rows[b:b + 8]
        st, _ = fast_infer(xb, params, args.t_fast, args.eta, sequence_rngs(args.seed, 0, range(b, b + len(xb))))
        for j in range(len(xb)):
            states[f"seq{b + j}"] = VariationalState(st.mu[j], st.logvar[j])
    save_states(args.out, states, params.config)
    print(f"states={args.out} n={len(states)}")
    return EXIT_OK


def cmd_generate(args, cfg) -> int:
    from .evalprobe import unigram_entropy
    from .sampler import DecodeStrategy, LangevinConfig, VBInfer, generate_conditional, generate_unconditional
    params, _ = _load(args.checkpoint)
    strategy = DecodeStrategy.parse(args.strategy, args.temperature)
    rng = np.random.default_rng(args.seed)
    if args.uncond:
        ids = generate_unconditional(params, args.len, strategy, rng)
    else:
        if not args.prompt_file:
            raise ConfigError("generate needs --uncond or --prompt-file")
        prompt = tokenize(Path(args.prompt_file).read_bytes())
        infer = LangevinConfig(args.langevin_step, args.langevin_steps, args.seed) if args.langevin \
            else VBInfer(args.t_fast, args.eta)
        ids = generate_conditional(prompt, args.n_new, params, infer, strategy, rng,
                                   deterministic=args.deterministic, reinfer=args.reinfer)
    text = detokenize(ids)
    sys.stdout.write(text.decode("utf-8", errors="replace") + "\n")
    if args.report_entropy:
        print(f"unigram_entropy={unigram_entropy(ids):.9g}")
    if args.ids_out:
        Path(args.ids_out).write_text(" ".join(str(int(i)) for i in ids) + "\n")
    return EXIT_OK


def cmd_probe(args, cfg) -> int:
    from .evalprobe import run_probe
    params, _ = _load(args.checkpoint)
    cfg = dict(cfg, max_seq_len=params.config.max_seq_len)
    if args.probe_set:
        cfg["corpus"] = args.probe_set
    ds = dataset_split(cfg, args.split)
    rep, _ = run_probe(ds.rows, params, args.t_fast, args.eta, args.seed, free_running=args.free_running)
    print(rep.table())
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "probe.txt").write_text(rep.table() + "\n")
        (out / "probe.kv").write_text(rep.records() + "\n")
    return EXIT_OK


def cmd_flops(args, cfg) -> int:
    from . import profiler
    from .model import init_params
    base = model_config(cfg)
    n = args.seq_len or base.max_seq_len
    layers = [int(v) for v in args.sweep.split(",")] if args.sweep else [base.n_layers]
    configs = [dataclasses.replace(base, n_layers=L) for L in layers]
    reports = profiler.breakdown_sweep(configs, n, cfg["t_fast"])
    print(profiler.format_csv(reports) if args.csv else profiler.format_table(reports))
    if args.oracle:
        for c, r in zip(configs, reports):
            measured = profiler.measured_forward_flops(init_params(c, 0), n)
            ok = all(measured[k] == r.flops[k] for k in profiler.COMPONENTS) and "unattributed" not in measured
            print(f"oracle L={c.n_layers} exact_match={'yes' if ok else 'no'}")
            if not ok:
                return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--threads", type=int, default=0, help="BLAS threads (0 = library default)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ltm", description="Latent-thought language model toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="run the dual-rate training loop")
    t.add_argument("--run-dir")
    t.add_argument("--resume", help="checkpoint to continue from")

    def ckpt_cmd(name, help_):
        c = sub.add_parser(name, parents=[common], help=help_)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--t-fast", "--t-fast-eval", dest="t_fast", type=int, default=16)
        c.add_argument("--eta", type=float, default=0.34)
        c.add_argument("--seed", type=int, default=0)
        return c

    e = ckpt_cmd("eval", "ELBO perplexity bound on a corpus split")
    e.add_argument("--split", choices=("train", "val", "all"), default="val")
    e.add_argument("--n-mc", type=int, default=8)
    e.add_argument("--out")

    i = ckpt_cmd("infer", "fit q(z|x) for every packed row and save the states")
    i.add_argument("--split", choices=("train", "val", "all"), default="all")
    i.add_argument("--out", required=True)

    g = ckpt_cmd("generate", "unconditional or prompt-conditioned generation")
    g.add_argument("--uncond", action="store_true")
    g.add_argument("--len", type=int, default=64)
    g.add_argument("--prompt-file")
    g.add_argument("--n-new", type=int, default=64)
    g.add_argument("--strategy", default="greedy", help="greedy | multinomial | top_k:K | nucleus:P")
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--deterministic", action="store_true", help="use z = mu instead of a draw from q")
    g.add_argument("--reinfer", action="store_true", help="re-infer z before every new token")
    g.add_argument("--langevin", action="store_true", help="infer z by Langevin dynamics")
    g.add_argument("--langevin-step", type=float, default=1e-3)
    g.add_argument("--langevin-steps", type=int, default=100)
    g.add_argument("--report-entropy", action="store_true")
    g.add_argument("--ids-out")

    pr = ckpt_cmd("probe", "progressive layer-inclusion probe")
    pr.add_argument("--probe-set", help="corpus path (defaults to the config corpus)")
    pr.add_argument("--split", choices=("train", "val", "all"), default="train")
    pr.add_argument("--free-running", action="store_true")
    pr.add_argument("--out-dir")

    f = sub.add_parser("flops", parents=[common], help="analytic compute breakdown")
    f.add_argument("--sweep", help="comma-separated layer counts")
    f.add_argument("--seq-len", type=int, default=0)
    f.add_argument("--csv", action="store_true")
    f.add_argument("--oracle", action="store_true", help="check against counted MACs of a real forward pass")
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "generate": cmd_generate,
            "probe": cmd_probe, "flops": cmd_flops}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.set)
        from .tensor import precision
        limiter = None
        if args.threads:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(args.threads)
        try:
            with precision(np.float64 if cfg["dtype"] == "float64" else np.float32):
                return COMMANDS[args.command](args, cfg)
        finally:
            if limiter is not None:
                limiter.unregister()
    except (ConfigError, SequenceLengthError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ContainerError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
