"""Command-line front-end: train, run sweeps, diagnose, verify.

The only environment variable honoured is SPECLAB_THREADS, which caps the
BLAS thread pool; it must be applied before numpy loads, which is why this
module touches os.environ before any numeric import.
"""

from __future__ import annotations

import os

_threads = os.environ.get("SPECLAB_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .ablation import ablate_and_score
from .checkpoint import load_checkpoint, save_checkpoint
from .engine import STRATEGY_KINDS, DecodeSettings, DraftStrategy
from .experiments import ExperimentSpec, emit_plot_data, run_experiments
from .corpus import sample_prompts
from .metrics import divergence_stats, match_rate
from .model import HybridModel, ModelConfig, ARCHS
from .engine import build_mask
from .theory import flop_ratio, optimal_k, speedup_readings
from .training import TrainConfig, load_corpus, train


def _csv_list(conv):
    def parse(text):
        return tuple(conv(x) for x in text.split(",") if x)
    return parse


def _load_model(path) -> HybridModel:
    weights = load_checkpoint(path)
    return HybridModel(weights.cfg, weights)


def _strategy_from_args(kind, args) -> DraftStrategy:
    return DraftStrategy(kind, skip_fraction=args.skip_fraction,
                         exit_fraction=args.exit_fraction)


def _add_strategy_fractions(p):
    p.add_argument("--skip-fraction", type=float, default=1.0 / 3.0,
                   help="fraction of layers removed by layer_skip (default 1/3)")
    p.add_argument("--exit-fraction", type=float, default=0.5,
                   help="fraction of layers kept by early_exit (default 0.5)")


def cmd_train(args) -> int:
    pattern = tuple(args.layer_pattern.split(",")) if args.layer_pattern else None
    cfg = ModelConfig(
        arch=args.arch, n_layers=args.n_layers, d_model=args.d_model,
        n_heads=args.n_heads, d_state=args.d_state, vocab_size=args.vocab_size,
        context_limit=args.context_limit, layer_pattern=pattern)
    log_path = args.log or str(args.out) + ".train_log.csv"
    tcfg = TrainConfig(
        corpus_path=args.corpus, steps=args.steps, batch_size=args.batch_size,
        seq_len=args.seq_len, learning_rate=args.lr, seed=args.seed,
        warmup_steps=args.warmup_steps, log_path=log_path,
        compute_dtype=args.compute_dtype)
    weights, history = train(cfg, tcfg)
    save_checkpoint(args.out, weights)
    if history:
        tail = float(np.mean([loss for _, loss in history[-max(1, len(history) // 10):]]))
        print(f"trained {len(history)} steps; tail loss {tail:.4f}")
    print(f"checkpoint written to {args.out}")
    print(f"training log written to {log_path}")
    return 0


def cmd_run(args) -> int:
    spec = ExperimentSpec(
        checkpoints=tuple(args.checkpoint),
        strategies=args.strategies,
        k_values=args.k,
        temperatures=args.temperatures,
        prompt_corpus=args.corpus,
        out_dir=args.out_dir,
        n_prompts=args.n_prompts,
        prompt_len=args.prompt_len,
        max_new_tokens=args.max_new_tokens,
        seed=args.seed,
        k_top=args.k_top,
        skip_fraction=args.skip_fraction,
        exit_fraction=args.exit_fraction,
    )
    result = run_experiments(spec)
    print(f"computed {result.n_computed} cells, reused {result.n_skipped}")
    print(f"report: {result.report_path}")
    for cell, err in result.errors:
        print(f"error in {cell}: {err}", file=sys.stderr)
    return 0 if not result.errors else 1


def cmd_divergence(args) -> int:
    model = _load_model(args.checkpoint)
    corpus = load_corpus(args.corpus)
    prompts = sample_prompts(corpus, args.n_prompts, args.prompt_len, args.seed)
    strategy = _strategy_from_args(args.strategy, args)
    stats = divergence_stats(model, build_mask(model.cfg, strategy), prompts,
                             args.k_top)
    payload = {"checkpoint": str(args.checkpoint), "strategy": strategy.label(),
               "tv_mean": stats.tv_mean, "top1_agreement": stats.top1_agreement,
               "n_positions": stats.n_positions}
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.json:
        Path(args.json).write_text(json.dumps(payload, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    model = _load_model(args.checkpoint)
    corpus = load_corpus(args.corpus)
    if args.eval_bytes:
        corpus = corpus[:args.eval_bytes]
    report = ablate_and_score(model, corpus,
                              viable_below=args.viable_below,
                              non_viable_above=args.non_viable_above)
    payload = {"checkpoint": str(args.checkpoint), **report.to_dict()}
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.json:
        Path(args.json).write_text(json.dumps(payload, sort_keys=True))
    if args.ledger:
        path = Path(args.ledger)
        new = not path.exists()
        with open(path, "a") as f:
            if new:
                f.write("checkpoint,ppl_base,ppl_no_attn,ppl_ratio,verdict\n")
            f.write(f"{args.checkpoint},{report.ppl_base:.10g},"
                    f"{report.ppl_no_attn:.10g},{report.ppl_ratio:.10g},"
                    f"{report.verdict}\n")
    return 0


def cmd_theory(args) -> int:
    if args.cost_ratio is not None:
        ratio = args.cost_ratio
        fraction = None
    elif args.checkpoint:
        model = _load_model(args.checkpoint)
        cost = flop_ratio(model.cfg, _strategy_from_args(args.strategy, args))
        ratio, fraction = cost.cost_ratio, cost.draft_param_fraction
    else:
        print("need --cost-ratio or --checkpoint", file=sys.stderr)
        return 2
    alpha = args.alpha
    readings = speedup_readings(alpha, args.k, ratio)
    alpha_pt = readings["alpha_input"] if not args.alpha_is_all_token else \
        alpha ** (1.0 / args.k)
    payload = {
        "alpha": alpha,
        "alpha_is_all_token": bool(args.alpha_is_all_token),
        "alpha_per_token": alpha_pt,
        "k": args.k,
        "cost_ratio": ratio,
        "draft_param_fraction": fraction,
        "expected_tokens": readings["expected_tokens_direct"]
        if not args.alpha_is_all_token
        else readings["expected_tokens_all_token_converted"],
        "speedup": readings["speedup_direct"] if not args.alpha_is_all_token
        else readings["speedup_all_token_converted"],
        "speedup_readings": readings,
        "optimal_k": optimal_k(alpha_pt, ratio, args.k_max),
    }
    if args.reference_speedup is not None:
        payload["reference_speedup"] = args.reference_speedup
        payload["reference_deviation_direct"] = (
            readings["speedup_direct"] - args.reference_speedup)
        payload["reference_deviation_all_token_converted"] = (
            readings["speedup_all_token_converted"] - args.reference_speedup)
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.json:
        Path(args.json).write_text(json.dumps(payload, sort_keys=True))
    return 0


def cmd_plot_data(args) -> int:
    n = emit_plot_data(args.report, args.out)
    print(f"wrote {n} rows to {args.out}")
    return 0


def cmd_verify_lossless(args) -> int:
    model = _load_model(args.checkpoint)
    corpus = load_corpus(args.corpus)
    prompts = sample_prompts(corpus, args.n_prompts, args.prompt_len, args.seed)
    kinds = args.strategies or tuple(
        k for k in STRATEGY_KINDS
        if not (k == "component_only" and model.cfg.arch == "transformer"))
    settings = DecodeSettings(k=args.k, temperature=0.0,
                              max_new_tokens=args.max_new_tokens,
                              seed=args.seed)
    ok = True
    for kind in kinds:
        rate = match_rate(model, _strategy_from_args(kind, args), prompts,
                          settings)
        print(f"{kind}: match rate {rate:.3f} over {len(prompts)} prompts")
        ok = ok and rate == 1.0
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speclab",
        description="toy lab for component-aware self-speculative decoding")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a toy checkpoint on a byte corpus")
    p.add_argument("--arch", choices=ARCHS, required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=96)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warmup-steps", type=int, default=50)
    p.add_argument("--compute-dtype", choices=("float32", "float64"),
                   default="float32")
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--n-layers", type=int, default=8)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--d-state", type=int, default=32)
    p.add_argument("--vocab-size", type=int, default=256)
    p.add_argument("--context-limit", type=int, default=256)
    p.add_argument("--layer-pattern", default=None,
                   help="comma list of linear/attention (sequential only)")
    p.add_argument("--log", default=None, help="training-log CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="run the acceptance-rate sweep")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint path; repeatable")
    p.add_argument("--corpus", required=True, help="prompt source corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--strategies", type=_csv_list(str),
                   default=("component_only", "layer_skip", "early_exit"),
                   help="comma list of draft strategies")
    p.add_argument("--k", type=_csv_list(int), default=(2, 4, 8),
                   help="comma list of draft lengths")
    p.add_argument("--temperatures", type=_csv_list(float), default=(0.0, 0.6),
                   help="comma list of temperatures")
    p.add_argument("--n-prompts", type=int, default=200)
    p.add_argument("--prompt-len", type=int, default=16)
    p.add_argument("--max-new-tokens", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-top", type=int, default=100)
    _add_strategy_fractions(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("divergence", help="draft-vs-full distribution gap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--strategy", choices=STRATEGY_KINDS,
                   default="component_only")
    p.add_argument("--n-prompts", type=int, default=100)
    p.add_argument("--prompt-len", type=int, default=32)
    p.add_argument("--k-top", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", default=None)
    _add_strategy_fractions(p)
    p.set_defaults(func=cmd_divergence)

    p = sub.add_parser("ablate", help="attention-removal viability diagnostic")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--eval-bytes", type=int, default=24_000)
    p.add_argument("--viable-below", type=float, default=5.0)
    p.add_argument("--non-viable-above", type=float, default=20.0)
    p.add_argument("--json", default=None)
    p.add_argument("--ledger", default=None,
                   help="CSV to append the verdict row to")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("theory", help="speedup model and optimal k")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--alpha-is-all-token", action="store_true",
                   help="convert alpha(k) to per-token by the k-th root")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--cost-ratio", type=float, default=None)
    p.add_argument("--checkpoint", default=None,
                   help="derive the cost ratio from a checkpoint instead")
    p.add_argument("--strategy", choices=STRATEGY_KINDS,
                   default="component_only")
    p.add_argument("--k-max", type=int, default=16)
    p.add_argument("--reference-speedup", type=float, default=None,
                   help="external estimate to report deviations against")
    p.add_argument("--json", default=None)
    _add_strategy_fractions(p)
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("plot-data", help="tidy CSV for acceptance-vs-k plots")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_data)

    p = sub.add_parser("verify-lossless",
                       help="check speculative output equals autoregressive")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--strategies", type=_csv_list(str), default=None)
    p.add_argument("--n-prompts", type=int, default=100)
    p.add_argument("--prompt-len", type=int, default=16)
    p.add_argument("--max-new-tokens", type=int, default=64)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    _add_strategy_fractions(p)
    p.set_defaults(func=cmd_verify_lossless)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
