"""Empirical quantities: acceptance rates, divergence, match rate, perplexity.

Acceptance statistics aggregate speculation rounds from one experimental cell
(same model, strategy, k and temperature). The all-token rate is the fraction
of rounds in which every drafted token was accepted; at temperature 0 that is
the greedy argmax-agreement product, at temperature > 0 it is the realized
accept/reject outcome. Uncertainty comes from a percentile bootstrap over
rounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import (
    DecodeSettings,
    DraftStrategy,
    SpecRoundResult,
    autoregressive_generate,
    speculative_generate,
)
from .model import ComponentMask, HybridModel
from .numerics import RngState, argmax_tiebreak, log_softmax, softmax


@dataclass(frozen=True)
class AcceptanceStats:
    all_token_alpha: float
    per_token_alpha: float
    mean_accepted_per_round: float
    n_rounds: int
    ci_low: float
    ci_high: float

    def __post_init__(self):
        if not (self.ci_low - 1e-12 <= self.all_token_alpha <= self.ci_high + 1e-12):
            raise ValueError("confidence interval must bracket the point estimate")


@dataclass(frozen=True)
class DivergenceStats:
    tv_mean: float
    top1_agreement: float
    n_positions: int


def bootstrap_ci(samples, resamples: int = 10_000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean; deterministic under seed."""
    arr = np.asarray(samples, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("bootstrap_ci needs at least one sample")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    if arr.min() == arr.max():
        # degenerate data: every resample mean is the same value exactly
        return float(arr[0]), float(arr[0])
    rng = RngState(seed)
    n = arr.size
    means = np.empty(resamples)
    block = max(1, min(resamples, 2_000_000 // max(n, 1)))
    done = 0
    while done < resamples:
        take = min(block, resamples - done)
        idx = rng.resample_indices(n, (take, n))
        means[done:done + take] = arr[idx].mean(axis=1)
        done += take
    lo, hi = np.quantile(means, [(1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0])
    return float(lo), float(hi)


def all_token_alpha(rounds: list[SpecRoundResult], k: int,
                    resamples: int = 10_000, level: float = 0.95,
                    seed: int = 0) -> AcceptanceStats:
    """Aggregate rounds of one (model, strategy, k, T) cell."""
    if not rounds:
        raise ValueError("no rounds to aggregate")
    if any(r.k != k for r in rounds):
        raise ValueError("rounds mix different draft lengths")
    accepted = np.array([r.all_accepted for r in rounds], dtype=np.float64)
    flags = np.array([f for r in rounds for f in r.per_position_match],
                     dtype=np.float64)
    emitted = np.array([len(r.emitted_tokens) for r in rounds], dtype=np.float64)
    lo, hi = bootstrap_ci(accepted, resamples=resamples, level=level, seed=seed)
    alpha = float(accepted.mean())
    return AcceptanceStats(
        all_token_alpha=alpha,
        per_token_alpha=float(flags.mean()),
        mean_accepted_per_round=float(emitted.mean()),
        n_rounds=len(rounds),
        ci_low=min(lo, alpha),
        ci_high=max(hi, alpha),
    )


def tv_distance_topk(p: np.ndarray, q: np.ndarray, k_top: int = 100) -> float:
    """Total variation over the union of both distributions' top-k supports.

    Both restrictions are renormalized over the union set, so the result is a
    true TV distance on a shared support, in [0, 1]. ``k_top`` larger than
    the vocabulary is clamped.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("distributions must be 1-D and share a vocabulary")
    if k_top < 1:
        raise ValueError("k_top must be >= 1")
    k_top = min(k_top, p.size)
    top_p = np.argsort(-p, kind="stable")[:k_top]
    top_q = np.argsort(-q, kind="stable")[:k_top]
    union = np.union1d(top_p, top_q)
    pr = p[union]
    qr = q[union]
    ps, qs = pr.sum(), qr.sum()
    if ps <= 0.0 or qs <= 0.0:
        raise ValueError("restricted distribution has no mass")
    return float(0.5 * np.abs(pr / ps - qr / qs).sum())


def top1_agreement(pairs) -> float:
    """Fraction of distribution pairs whose greedy argmax agrees."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no distribution pairs")
    hits = sum(argmax_tiebreak(p) == argmax_tiebreak(q) for p, q in pairs)
    return hits / len(pairs)


def divergence_stats(model: HybridModel, draft_mask: ComponentMask, prompts,
                     k_top: int = 100) -> DivergenceStats:
    """Draft-vs-full distribution divergence, teacher-forced over prompts.

    Scores every next-token distribution along each prompt (positions are
    pooled across prompts; the count is reported).
    """
    tvs: list[float] = []
    agree = 0
    for prompt in prompts:
        full_logits, _ = model.forward_prefix(prompt)
        draft_logits, _ = model.forward_prefix(prompt, draft_mask)
        for j in range(len(prompt)):
            p_h = softmax(full_logits[j], 1.0)
            p_s = softmax(draft_logits[j], 1.0)
            tvs.append(tv_distance_topk(p_s, p_h, k_top))
            agree += argmax_tiebreak(p_s) == argmax_tiebreak(p_h)
    if not tvs:
        raise ValueError("no positions scored")
    return DivergenceStats(tv_mean=float(np.mean(tvs)),
                           top1_agreement=agree / len(tvs),
                           n_positions=len(tvs))


def match_rate(model: HybridModel, strategy: DraftStrategy, prompts,
               settings: DecodeSettings) -> float:
    """Fraction of prompts whose speculative and autoregressive outputs are
    token-identical. Greedy decoding only; sampled runs consume randomness
    differently and are compared distributionally instead."""
    if settings.temperature != 0.0:
        raise ValueError("match_rate is defined for temperature 0")
    prompts = list(prompts)
    if not prompts:
        raise ValueError("no prompts")
    hits = 0
    for prompt in prompts:
        spec, _ = speculative_generate(model, strategy, prompt, settings)
        ar = autoregressive_generate(model, prompt, settings)
        hits += spec == ar
    return hits / len(prompts)


def perplexity(model: HybridModel, mask: ComponentMask | None, corpus_tokens,
               stride: int | None = None) -> float:
    """exp(mean next-token NLL) under the masked model.

    The corpus is scored in context-length windows hopping by ``stride``
    (default: non-overlapping). Each token is scored at most once; the first
    token of a window is never scored.
    """
    tokens = np.asarray(corpus_tokens, dtype=np.int64).ravel()
    if tokens.size < 2:
        raise ValueError("corpus must hold at least two tokens")
    window = model.cfg.context_limit
    if stride is None:
        stride = window
    if not 1 <= stride <= window:
        raise ValueError("stride must be in [1, context_limit]")
    total_nll = 0.0
    scored = 0
    last_scored = 0  # global index of the newest scored token
    start = 0
    while start + 1 < tokens.size:
        chunk = tokens[start:start + window]
        if chunk.size < 2:
            break
        logits, _ = model.forward_prefix(chunk, mask)
        logp = log_softmax(logits[:-1])
        targets = chunk[1:]
        nll = -logp[np.arange(targets.size), targets]
        global_idx = start + 1 + np.arange(targets.size)
        fresh = global_idx > last_scored
        total_nll += float(nll[fresh].sum())
        scored += int(fresh.sum())
        last_scored = int(global_idx[-1])
        if start + window >= tokens.size:
            break
        start += stride
    return float(np.exp(total_nll / scored))


def collect_rounds(model: HybridModel, strategy: DraftStrategy, prompts,
                   settings: DecodeSettings) -> list[SpecRoundResult]:
    """Run speculative generation over prompts, pooling per-round results.

    Each prompt gets an independent RNG substream derived from the settings
    seed, so results do not depend on prompt order or concurrency."""
    rounds: list[SpecRoundResult] = []
    for i, prompt in enumerate(prompts):
        per_prompt = DecodeSettings(k=settings.k, temperature=settings.temperature,
                                    max_new_tokens=settings.max_new_tokens,
                                    seed=_prompt_seed(settings.seed, i))
        _, rs = speculative_generate(model, strategy, prompt, per_prompt)
        rounds.extend(rs)
    return rounds


def _prompt_seed(seed: int, index: int) -> int:
    return (seed * 1_000_003 + index) % (2 ** 63)
