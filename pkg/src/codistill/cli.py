"""Command-line entry point: datagen, train, eval, caption.

Config precedence: built-in defaults < config file < CODIST_SEED env var
< command-line flags.  Every command validates its full configuration before
touching the filesystem, so flag errors never leave partial run directories.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datagen as D
from . import model as M
from . import tokenizer as tok
from . import trainer as TR
from .bridge import DEFAULT_DIM, make_bridge
from .evaluation import evaluate_model

PROG = "codist"


class CliError(Exception):
    """Runtime failure (I/O, corrupt inputs); maps to exit code 1."""


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise CliError(f"config file {p} is not valid JSON: {err}") from None
    if not isinstance(data, dict):
        raise CliError(f"config file {p} must hold a JSON object")
    return data


def _resolve(defaults: dict, file_cfg: dict, args: argparse.Namespace,
             flag_map: dict[str, str]) -> dict:
    """defaults < config file < CODIST_SEED < explicit flags."""
    resolved = dict(defaults)
    for key, value in file_cfg.items():
        if key in resolved:
            resolved[key] = value
    env_seed = os.environ.get("CODIST_SEED")
    if env_seed is not None and "seed" in resolved:
        try:
            resolved["seed"] = int(env_seed)
        except ValueError:
            raise CliError(f"CODIST_SEED must be an integer, got {env_seed!r}") from None
    for key, flag_attr in flag_map.items():
        value = getattr(args, flag_attr)
        if value is not None:
            resolved[key] = value
    return resolved


def _prob_flag(parser: argparse.ArgumentParser, value: float, name: str) -> float:
    if not 0.0 <= value <= 1.0:
        parser.error(f"{name} must be in [0, 1], got {value}")
    return value


# ---------------------------------------------------------------- datagen

def _add_datagen(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("datagen", help="generate clean/noisy/test JSONL corpora",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--n", type=int, default=1000, help="records per training corpus")
    p.add_argument("--n-test", type=int, default=200, help="records in the clean test corpus")
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--p-mismatch", type=float, default=None, help="caption swap probability (default 0.3)")
    p.add_argument("--p-delete", type=float, default=None, help="per-word deletion probability (default 0.1)")
    p.add_argument("--p-shuffle", type=float, default=None, help="word shuffle probability (default 0.1)")
    p.add_argument("--p-insert", type=float, default=None, help="word insertion probability (default 0.1)")
    p.add_argument("--sigma-feature", type=float, default=None, help="feature jitter stddev (default 0.05)")
    p.add_argument("--config", default=None, help="JSON config file")
    p.set_defaults(func=cmd_datagen)


def cmd_datagen(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    if args.n < 1:
        parser.error("--n must be at least 1")
    if args.n_test < 0:
        parser.error("--n-test must be non-negative")
    file_cfg = _load_config_file(args.config)
    defaults = {"seed": 0, **D.NoiseConfig().to_dict()}
    resolved = _resolve(defaults, file_cfg.get("noise", {}) | file_cfg, args, {
        "seed": "seed",
        "p_mismatch": "p_mismatch",
        "p_delete": "p_delete",
        "p_shuffle": "p_shuffle",
        "p_insert": "p_insert",
        "sigma_feature": "sigma_feature",
    })
    for name in ("p_mismatch", "p_delete", "p_shuffle", "p_insert"):
        _prob_flag(parser, resolved[name], f"--{name.replace('_', '-')}")
    if resolved["sigma_feature"] < 0:
        parser.error("--sigma-feature must be non-negative")
    noise = D.NoiseConfig(resolved["p_mismatch"], resolved["p_delete"],
                          resolved["p_shuffle"], resolved["p_insert"],
                          resolved["sigma_feature"])
    seed = int(resolved["seed"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    noisy = D.generate_corpus(args.n, noise, seed=seed)
    clean = D.generate_corpus(args.n, D.CLEAN_NOISE, seed=seed + 1)
    D.write_corpus(noisy, out / "noisy.jsonl")
    D.write_corpus(clean, out / "clean.jsonl")
    split = {
        "train": {"noisy": "noisy.jsonl", "clean": "clean.jsonl"},
        "counts": {"noisy": args.n, "clean": args.n, "test": args.n_test},
        "seed": seed,
        "noise": noise.to_dict(),
    }
    if args.n_test > 0:
        test = D.generate_corpus(args.n_test, D.CLEAN_NOISE, seed=seed + 2)
        D.write_corpus(test, out / "test.jsonl")
        split["test"] = "test.jsonl"
    (out / "split.json").write_text(json.dumps(split, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.n} noisy + {args.n} clean + {args.n_test} test records to {out}")
    return 0


# ------------------------------------------------------------------ train

_MODEL_DEFAULTS = {
    "layers": 2,
    "embed_dim": 64,
    "heads": 4,
    "ffn_dim": 0,
    "max_positions": 32,
    "vocab_target_size": 512,
}

_BRIDGE_DEFAULTS = {
    "kind": "hashed",
    "dim": DEFAULT_DIM,
    "endpoint": "",
    "timeout_ms": 10_000,
}


def _add_train(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("train", help="vocab, warm starts, co-distillation, artifacts",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--noisy", required=True, help="noisy corpus JSONL")
    p.add_argument("--clean", required=True, help="clean corpus JSONL")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--steps", type=int, default=None, help="co-distillation steps (default 200)")
    p.add_argument("--pretrain-steps", type=int, default=None, help="warm-start steps per model (default 500)")
    p.add_argument("--batch-size", type=int, default=None, help="batch size (default 8)")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate (default 3e-4)")
    p.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    p.add_argument("--warmup-steps", type=int, default=None, help="linear lr warmup (default 100)")
    p.add_argument("--checkpoint-every", type=int, default=None, help="checkpoint cadence (default 1000)")
    p.add_argument("--max-decode-len", type=int, default=None, help="greedy decode cap (default 24)")
    p.add_argument("--alternation", choices=("per_batch", "per_epoch"), default=None,
                   help="stream alternation granularity (default per_batch)")
    p.add_argument("--layers", type=int, default=None, help="encoder/decoder layers (default 2)")
    p.add_argument("--embed-dim", type=int, default=None, help="embedding width (default 64)")
    p.add_argument("--heads", type=int, default=None, help="attention heads (default 4)")
    p.add_argument("--ffn-dim", type=int, default=None, help="feed-forward width (default 4*embed)")
    p.add_argument("--max-positions", type=int, default=None, help="max sequence length (default 32)")
    p.add_argument("--vocab-target-size", type=int, default=None, help="subword vocab budget (default 512)")
    p.add_argument("--bridge-kind", choices=("hashed", "remote"), default=None)
    p.add_argument("--bridge-dim", type=int, default=None)
    p.add_argument("--bridge-endpoint", default=None)
    p.add_argument("--bridge-timeout-ms", type=int, default=None)
    p.add_argument("--timing", action="store_true",
                   help="record wall_ms in metrics.csv (breaks byte reproducibility)")
    p.set_defaults(func=cmd_train)


def cmd_train(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    train_resolved = _resolve(TR.TrainConfig().to_dict(), file_cfg.get("train", {}), args, {
        "steps": "steps",
        "pretrain_steps": "pretrain_steps",
        "batch_size": "batch_size",
        "lr": "lr",
        "seed": "seed",
        "warmup_steps": "warmup_steps",
        "checkpoint_every": "checkpoint_every",
        "max_decode_len": "max_decode_len",
        "alternation": "alternation",
    })
    model_resolved = _resolve(_MODEL_DEFAULTS, file_cfg.get("model", {}), args, {
        "layers": "layers",
        "embed_dim": "embed_dim",
        "heads": "heads",
        "ffn_dim": "ffn_dim",
        "max_positions": "max_positions",
        "vocab_target_size": "vocab_target_size",
    })
    bridge_resolved = _resolve(_BRIDGE_DEFAULTS, file_cfg.get("bridge", {}), args, {
        "kind": "bridge_kind",
        "dim": "bridge_dim",
        "endpoint": "bridge_endpoint",
        "timeout_ms": "bridge_timeout_ms",
    })
    try:
        train_cfg = TR.TrainConfig(**{k: train_resolved[k] for k in TR.TrainConfig().to_dict()})
    except (ValueError, TypeError) as err:
        parser.error(str(err))

    noisy_path = Path(args.noisy)
    clean_path = Path(args.clean)
    for path in (noisy_path, clean_path):
        if not path.is_file():
            raise CliError(f"dataset not found: {path}")

    noisy = D.read_corpus(noisy_path)
    clean = D.read_corpus(clean_path)
    if not noisy or not clean:
        raise CliError("both corpora must be non-empty")

    vocab = tok.train_vocab([[r.caption for r in noisy], [r.caption for r in clean]],
                            int(model_resolved["vocab_target_size"]))
    feature_dim = noisy[0].features.shape[1]
    try:
        model_cfg = M.ModelConfig(
            vocab_size=len(vocab),
            feature_dim=feature_dim,
            layers=int(model_resolved["layers"]),
            embed_dim=int(model_resolved["embed_dim"]),
            heads=int(model_resolved["heads"]),
            ffn_dim=int(model_resolved["ffn_dim"]),
            max_positions=int(model_resolved["max_positions"]),
        )
    except ValueError as err:
        parser.error(str(err))
    bridge = make_bridge(bridge_resolved["kind"], vocab, dim=int(bridge_resolved["dim"]),
                         endpoint=bridge_resolved["endpoint"],
                         timeout_ms=int(bridge_resolved["timeout_ms"]))

    run_dir = Path(args.out)
    result = TR.train_codistill(
        model_cfg, train_cfg,
        TR.samples_from_records(noisy, vocab, "noisy"),
        TR.samples_from_records(clean, vocab, "clean"),
        bridge, vocab, run_dir=run_dir, timing=args.timing,
    )
    # record the bridge settings alongside the resolved model/train config
    cfg_path = run_dir / "config.json"
    cfg_data = json.loads(cfg_path.read_text())
    cfg_data["bridge"] = bridge_resolved
    cfg_path.write_text(json.dumps(cfg_data, indent=2, sort_keys=True) + "\n")
    print(f"trained {train_cfg.steps} steps -> {run_dir} "
          f"(final step {result.state.step})")
    return 0


# ------------------------------------------------------------------- eval

def _add_eval(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("eval", help="BLEU-4 and coherence AUC for a checkpoint",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.ckpt)")
    p.add_argument("--corpus", required=True, help="corpus JSONL to evaluate on")
    p.add_argument("--out", default=None, help="write the full EvalReport JSON here")
    p.add_argument("--run-config", default=None,
                   help="config.json of the run (default: next to the checkpoint)")
    p.add_argument("--vocab", default=None, help="vocab file (default: next to the checkpoint)")
    p.add_argument("--max-decode-len", type=int, default=24, help="greedy decode cap")
    p.add_argument("--bridge-kind", choices=("hashed", "remote"), default="hashed")
    p.add_argument("--bridge-dim", type=int, default=DEFAULT_DIM)
    p.add_argument("--bridge-endpoint", default="")
    p.add_argument("--bridge-timeout-ms", type=int, default=10_000)
    p.set_defaults(func=cmd_eval)


def _run_dir_of(checkpoint: Path) -> Path:
    # checkpoints live in <run>/checkpoints/
    return checkpoint.parent.parent if checkpoint.parent.name == "checkpoints" else checkpoint.parent


def _load_run_model(args: argparse.Namespace) -> tuple[M.ModelParams, tok.Vocab]:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(f"checkpoint not found: {ckpt}")
    run_dir = _run_dir_of(ckpt)
    cfg_path = Path(args.run_config) if args.run_config else run_dir / "config.json"
    vocab_path = Path(args.vocab) if args.vocab else run_dir / "vocab.txt"
    if not cfg_path.is_file():
        raise CliError(f"run config not found: {cfg_path}")
    if not vocab_path.is_file():
        raise CliError(f"vocab not found: {vocab_path}")
    try:
        model_cfg = M.ModelConfig(**json.loads(cfg_path.read_text())["model"])
    except (KeyError, TypeError, ValueError) as err:
        raise CliError(f"bad run config {cfg_path}: {err}") from None
    vocab = tok.load_vocab(vocab_path)
    try:
        params = M.params_from_checkpoint(model_cfg, ckpt)
    except ValueError as err:
        raise CliError(str(err)) from None
    return params, vocab


def cmd_eval(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    corpus_path = Path(args.corpus)
    if not corpus_path.is_file():
        raise CliError(f"corpus not found: {corpus_path}")
    params, vocab = _load_run_model(args)
    corpus = D.read_corpus(corpus_path)
    if not corpus:
        raise CliError(f"corpus is empty: {corpus_path}")
    bridge = make_bridge(args.bridge_kind, vocab, dim=args.bridge_dim,
                         endpoint=args.bridge_endpoint, timeout_ms=args.bridge_timeout_ms)
    report = evaluate_model(params, corpus, bridge, vocab, max_len=args.max_decode_len)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json() + "\n")
    print(report.summary())
    return 0


# ---------------------------------------------------------------- caption

def _add_caption(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("caption", help="print ground truth vs greedy captions",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.ckpt)")
    p.add_argument("--corpus", required=True, help="corpus JSONL with features")
    p.add_argument("--count", type=int, default=10, help="records to caption")
    p.add_argument("--run-config", default=None,
                   help="config.json of the run (default: next to the checkpoint)")
    p.add_argument("--vocab", default=None, help="vocab file (default: next to the checkpoint)")
    p.add_argument("--max-decode-len", type=int, default=24, help="greedy decode cap")
    p.set_defaults(func=cmd_caption)


def cmd_caption(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    if args.count < 0:
        parser.error("--count must be non-negative")
    corpus_path = Path(args.corpus)
    if not corpus_path.is_file():
        raise CliError(f"corpus not found: {corpus_path}")
    params, vocab = _load_run_model(args)
    corpus = D.read_corpus(corpus_path)[: args.count]
    print(f"{'id':>6}  {'ground truth':<46}  greedy caption")
    if corpus:
        decodes = M.greedy_decode_batch(params, [r.features for r in corpus],
                                        args.max_decode_len)
        for record, ids in zip(corpus, decodes):
            caption = tok.decode(vocab, ids)
            print(f"{record.id:>6}  {record.caption:<46.46}  {caption}")
    return 0


# ------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Cooperative distillation for captioning with noisy labels",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_datagen(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_caption(sub)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(parser, args)
    except SystemExit as err:  # argparse --help (0) and flag errors (2)
        return 0 if err.code is None else int(err.code)
    except CliError as err:
        print(f"{PROG}: error: {err}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as err:
        print(f"{PROG}: error: {err}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
