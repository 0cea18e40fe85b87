"""Batch experiment runner: sweeps, resumable cells, CSV/JSON reports.

A sweep is the cross product (checkpoint, strategy, k, temperature). Each
cell's results live in ``<out_dir>/cells/<cell_id>.json``; completed cells
are skipped on re-run, and the top-level ``report.csv`` is regenerated from
cell files every run, so re-running a finished sweep does no model work and
reproduces the report byte for byte. Wall-clock timings are intentionally
kept out of the deterministic report and land in ``timings.csv``.

Per-cell randomness is derived from (seed, prompt index), never from
execution order, so cells can in principle run concurrently over the shared
immutable checkpoints without changing any number.
"""

from __future__ import annotations

import csv
import io
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .corpus import sample_prompts
from .engine import (
    DecodeSettings,
    DraftStrategy,
    autoregressive_generate,
    build_mask,
    speculative_generate,
)
from .metrics import all_token_alpha, divergence_stats, _prompt_seed
from .model import HybridModel
from .theory import expected_tokens, flop_ratio, speedup
from .training import load_corpus

REPORT_SCHEMA = "speclab-report v1"
PLOT_SCHEMA = "speclab-plot-data v1"
TIMING_SCHEMA = "speclab-timings v1"

REPORT_COLUMNS = [
    "model", "arch", "strategy", "k", "temperature", "n_prompts", "n_rounds",
    "alpha", "alpha_ci_low", "alpha_ci_high", "per_token_alpha",
    "mean_accepted_per_round", "tv_mean", "top1_agreement",
    "divergence_positions", "match_rate", "cost_ratio",
    "expected_tokens_theory", "speedup_theory",
]


@dataclass(frozen=True)
class ExperimentSpec:
    checkpoints: tuple[str, ...]
    strategies: tuple[str, ...]
    k_values: tuple[int, ...]
    temperatures: tuple[float, ...]
    prompt_corpus: str
    out_dir: str
    n_prompts: int = 200
    prompt_len: int = 16
    max_new_tokens: int = 64
    seed: int = 0
    k_top: int = 100
    skip_fraction: float = 1.0 / 3.0
    exit_fraction: float = 0.5
    bootstrap_resamples: int = 10_000

    def __post_init__(self):
        if not (self.checkpoints and self.strategies and self.k_values
                and self.temperatures):
            raise ValueError("sweep dimensions must be non-empty")
        if self.n_prompts < 1 or self.prompt_len < 1:
            raise ValueError("prompt settings must be positive")

    def strategy(self, kind: str) -> DraftStrategy:
        return DraftStrategy(kind, skip_fraction=self.skip_fraction,
                             exit_fraction=self.exit_fraction)


@dataclass
class RunResult:
    report_path: Path
    timing_path: Path
    rows: list[dict]
    n_computed: int = 0
    n_skipped: int = 0
    errors: list[tuple[str, str]] = field(default_factory=list)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def _cell_id(model: str, strategy: str, k: int, temp: float) -> str:
    return f"{model}__{strategy}__k{k}__T{temp:g}"


def _write_csv(path: Path, schema: str, columns: list[str], rows: list[dict]):
    buf = io.StringIO()
    buf.write(f"# {schema}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    path.write_text(buf.getvalue())


def read_report(path) -> list[dict]:
    """Rows of a report/plot CSV, skipping the schema comment line."""
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _generate_cell(model: HybridModel, strategy: DraftStrategy, prompts,
                   settings: DecodeSettings):
    """Speculative runs over all prompts: rounds, outputs, timed seconds.

    The first prompt is a warm-up: it contributes rounds and outputs like any
    other, but its wall time is discarded."""
    rounds, outputs, times = [], [], []
    for i, prompt in enumerate(prompts):
        per_prompt = DecodeSettings(
            k=settings.k, temperature=settings.temperature,
            max_new_tokens=settings.max_new_tokens,
            seed=_prompt_seed(settings.seed, i))
        t0 = time.perf_counter()
        out, rs = speculative_generate(model, strategy, prompt, per_prompt)
        times.append(time.perf_counter() - t0)
        rounds.extend(rs)
        outputs.append(out)
    timed_tokens = sum(len(o) for o in outputs[1:])
    seconds_per_token = sum(times[1:]) / timed_tokens if timed_tokens else None
    return rounds, outputs, seconds_per_token


def _ar_outputs(model: HybridModel, prompts, settings: DecodeSettings):
    outputs, times = [], []
    for i, prompt in enumerate(prompts):
        per_prompt = DecodeSettings(
            k=settings.k, temperature=settings.temperature,
            max_new_tokens=settings.max_new_tokens,
            seed=_prompt_seed(settings.seed, i))
        t0 = time.perf_counter()
        outputs.append(autoregressive_generate(model, prompt, per_prompt))
        times.append(time.perf_counter() - t0)
    timed_tokens = sum(len(o) for o in outputs[1:])
    seconds_per_token = sum(times[1:]) / timed_tokens if timed_tokens else None
    return outputs, seconds_per_token


def run_experiments(spec: ExperimentSpec, log=None) -> RunResult:
    """Execute (or resume) the sweep; returns rows plus computed/skipped
    counts. Per-cell failures are recorded and the run continues."""
    out_dir = Path(spec.out_dir)
    cells_dir = out_dir / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    log = log or (lambda msg: print(msg, file=sys.stderr))
    corpus = load_corpus(spec.prompt_corpus)
    prompts = sample_prompts(corpus, spec.n_prompts, spec.prompt_len,
                             seed=spec.seed + 101)
    result = RunResult(report_path=out_dir / "report.csv",
                       timing_path=out_dir / "timings.csv", rows=[])
    timing_rows: list[dict] = []
    for ckpt_path in spec.checkpoints:
        model_name = Path(ckpt_path).stem
        try:
            weights = load_checkpoint(ckpt_path)
            model = HybridModel(weights.cfg, weights)
        except (OSError, ValueError) as exc:
            for kind in spec.strategies:
                result.errors.append((f"{model_name}/{kind}", str(exc)))
            log(f"[skip] {model_name}: {exc}")
            continue
        ar_cache: dict[float, list] = {}
        ar_seconds: dict[float, float | None] = {}
        div_cache: dict[str, tuple] = {}
        for kind in spec.strategies:
            try:
                strategy = spec.strategy(kind)
                build_mask(model.cfg, strategy)
            except ValueError as exc:
                result.errors.append((f"{model_name}/{kind}", str(exc)))
                log(f"[skip] {model_name}/{kind}: {exc}")
                continue
            for temp in spec.temperatures:
                for k in spec.k_values:
                    cell = _cell_id(model_name, strategy.label(), k, temp)
                    cell_path = cells_dir / f"{cell}.json"
                    if cell_path.exists():
                        payload = json.loads(cell_path.read_text())
                        result.rows.append(payload["row"])
                        result.n_skipped += 1
                        continue
                    row, timing, payload = _compute_cell(
                        spec, model, model_name, strategy, kind, k, temp,
                        prompts, ar_cache, ar_seconds, div_cache)
                    cell_path.write_text(json.dumps(payload, sort_keys=True))
                    result.rows.append(row)
                    timing_rows.append(timing)
                    result.n_computed += 1
                    log(f"[done] {cell}: alpha={row['alpha']:.3f}")
    result.rows.sort(key=lambda r: (r["model"], r["strategy"],
                                    float(r["temperature"]), int(r["k"])))
    _write_csv(result.report_path, REPORT_SCHEMA, REPORT_COLUMNS, result.rows)
    if timing_rows:
        _write_csv(result.timing_path, TIMING_SCHEMA,
                   ["model", "strategy", "k", "temperature",
                    "spec_seconds_per_token", "ar_seconds_per_token"],
                   timing_rows)
    return result


def _compute_cell(spec, model, model_name, strategy, kind, k, temp, prompts,
                  ar_cache, ar_seconds, div_cache):
    settings = DecodeSettings(k=k, temperature=temp,
                              max_new_tokens=spec.max_new_tokens,
                              seed=spec.seed)
    rounds, outputs, spec_spt = _generate_cell(model, strategy, prompts,
                                               settings)
    stats = all_token_alpha(rounds, k, resamples=spec.bootstrap_resamples,
                            seed=spec.seed)
    if kind not in div_cache:
        div_cache[kind] = divergence_stats(
            model, build_mask(model.cfg, strategy), prompts, spec.k_top)
    div = div_cache[kind]
    rate = None
    if temp == 0.0:
        if temp not in ar_cache:
            ar_cache[temp], ar_seconds[temp] = _ar_outputs(
                model, prompts, settings)
        ar_out = ar_cache[temp]
        rate = float(np.mean([a == b for a, b in zip(outputs, ar_out)]))
    cost = flop_ratio(model.cfg, strategy)
    alpha_pt = min(stats.per_token_alpha, 1.0 - 1e-9)
    row = {
        "model": model_name, "arch": model.cfg.arch, "strategy": strategy.label(),
        "k": k, "temperature": temp, "n_prompts": len(prompts),
        "n_rounds": stats.n_rounds, "alpha": stats.all_token_alpha,
        "alpha_ci_low": stats.ci_low, "alpha_ci_high": stats.ci_high,
        "per_token_alpha": stats.per_token_alpha,
        "mean_accepted_per_round": stats.mean_accepted_per_round,
        "tv_mean": div.tv_mean, "top1_agreement": div.top1_agreement,
        "divergence_positions": div.n_positions, "match_rate": rate,
        "cost_ratio": cost.cost_ratio,
        "expected_tokens_theory": expected_tokens(alpha_pt, k),
        "speedup_theory": speedup(alpha_pt, k, cost.cost_ratio),
    }
    timing = {"model": model_name, "strategy": strategy.label(), "k": k,
              "temperature": temp, "spec_seconds_per_token": spec_spt,
              "ar_seconds_per_token": ar_seconds.get(temp)}
    payload = {
        "row": row,
        "diagnostics": {
            "accepted_counts": [r.accepted_count for r in rounds],
            "all_accepted": [bool(r.all_accepted) for r in rounds],
            "position_match_totals": _position_match_totals(rounds, k),
        },
    }
    return row, timing, payload


def _position_match_totals(rounds, k: int) -> list[int]:
    totals = [0] * k
    for r in rounds:
        for i, flag in enumerate(r.per_position_match):
            totals[i] += bool(flag)
    return totals


def emit_plot_data(report_path, out_path) -> int:
    """Tidy long-format CSV for acceptance-vs-k plots.

    One row per (model, strategy, temperature, k) over the full grid spanned
    by the report; absent cells are emitted with NA markers.
    """
    rows = read_report(report_path)
    if not rows:
        raise ValueError(f"report {report_path} has no data rows")
    series = sorted({(r["model"], r["strategy"], r["temperature"])
                     for r in rows})
    ks = sorted({int(r["k"]) for r in rows})
    indexed = {(r["model"], r["strategy"], r["temperature"], int(r["k"])): r
               for r in rows}
    out_rows = []
    for model, strategy, temp in series:
        for k in ks:
            r = indexed.get((model, strategy, temp, k))
            out_rows.append({
                "model": model, "strategy": strategy, "temperature": temp,
                "k": k,
                "alpha": r["alpha"] if r else "NA",
                "ci_low": r["alpha_ci_low"] if r else "NA",
                "ci_high": r["alpha_ci_high"] if r else "NA",
                "mean_accepted": r["mean_accepted_per_round"] if r else "NA",
            })
    _write_csv(Path(out_path), PLOT_SCHEMA,
               ["model", "strategy", "temperature", "k", "alpha", "ci_low",
                "ci_high", "mean_accepted"], out_rows)
    return len(out_rows)
