#!/usr/bin/env python3
"""The full desk protocol over trained toy checkpoints.

Runs the acceptance-rate sweep (strategies x k x temperature, 200 prompts),
emits plot data, the ablation verdicts, and the speedup-model report for
each checkpoint's component draft. Resumable: finished cells are skipped.
Expects checkpoints from scripts/train_toy_models.py.
"""

import argparse
from pathlib import Path

from speclab.cli import main as cli_main
from speclab.corpus import write_corpus


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--toys-dir", default="runs/toys")
    parser.add_argument("--out-dir", default="runs/sweep")
    parser.add_argument("--n-prompts", type=int, default=200)
    args = parser.parse_args()

    toys = Path(args.toys_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    eval_corpus = out / "eval_corpus.bin"
    if not eval_corpus.exists():
        write_corpus(eval_corpus, 26_000, 777)
    par = toys / "toy_parallel.ckpt"
    seq = toys / "toy_sequential.ckpt"

    rc = cli_main([
        "run", "--checkpoint", str(par), "--checkpoint", str(seq),
        "--corpus", str(eval_corpus), "--out-dir", str(out),
        "--strategies", "component_only,layer_skip,early_exit",
        "--k", "2,4,8", "--temperatures", "0,0.6",
        "--n-prompts", str(args.n_prompts),
    ])
    if rc != 0:
        raise SystemExit(rc)
    cli_main(["plot-data", "--report", str(out / "report.csv"),
              "--out", str(out / "plot_data.csv")])
    for ckpt in (par, seq):
        cli_main(["ablate", "--checkpoint", str(ckpt), "--corpus",
                  str(eval_corpus), "--json",
                  str(out / f"{ckpt.stem}.ablation.json"),
                  "--ledger", str(out / "ablation_ledger.csv")])
        cli_main(["theory", "--alpha", "0.5", "--k", "2", "--checkpoint",
                  str(ckpt), "--json", str(out / f"{ckpt.stem}.theory.json")])


if __name__ == "__main__":
    main()
