"""Analytical layer: expected round yield, speedup, cost ratios, optimal k.

With per-token acceptance probability ``alpha`` and draft length ``k``, a
speculation round yields ``(1 - alpha^(k+1)) / (1 - alpha)`` tokens in
expectation (the k+1 covers the bonus token on full acceptance), and the
speedup over autoregressive decoding is that yield divided by the round cost
``1 + k * c_draft/c_verify``. The cost ratio is estimated by counting the
parameters touched per token under the draft mask versus the full mask, a
proxy that deliberately excludes sequence-length-dependent attention-score
work; an optional linear KV-bandwidth term can model that growth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .engine import DraftStrategy, build_mask
from .model import ComponentMask, ModelConfig, FFN_MULT


@dataclass(frozen=True)
class CostModel:
    cost_ratio: float
    draft_param_fraction: float
    notes: str

    def __post_init__(self):
        if not 0.0 < self.cost_ratio <= 1.0:
            raise ValueError("cost_ratio must be in (0, 1]")


def expected_tokens(alpha: float, k: int) -> float:
    """Expected emitted tokens per round; in [1, k+1]."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must be in [0, 1); the limit at 1 is k+1")
    if k < 1:
        raise ValueError("k must be >= 1")
    if alpha == 0.0:
        return 1.0
    return (1.0 - alpha ** (k + 1)) / (1.0 - alpha)


def speedup(alpha: float, k: int, cost_ratio: float) -> float:
    """Round yield over round cost."""
    if cost_ratio <= 0.0:
        raise ValueError("cost_ratio must be positive")
    return expected_tokens(alpha, k) / (1.0 + k * cost_ratio)


def per_token_from_all_token(alpha_k: float, k: int) -> float:
    """k-th root conversion of an all-token rate alpha(k) to a per-token rate.

    Exact only if positions were independent with equal acceptance
    probability; treat as an approximation.
    """
    if not 0.0 <= alpha_k <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    if k < 1:
        raise ValueError("k must be >= 1")
    return alpha_k ** (1.0 / k)


def params_per_token(cfg: ModelConfig, mask: ComponentMask | None) -> int:
    """Parameters touched to produce one token under a mask.

    Counts projection, recurrence, feed-forward, norm and head parameters of
    active blocks, plus one embedding row and one position row. KV-cache
    reads and attention-score work (which grow with sequence length) are
    deliberately not parameters and not counted.
    """
    if mask is None:
        mask = ComponentMask.full(cfg.n_layers)
    if mask.n_layers != cfg.n_layers:
        raise ValueError("mask length mismatch")
    d, s = cfg.d_model, cfg.d_state
    attn_block = d + 4 * d * d
    ssm_block = d + d * d + 2 * d * s + d + d + d * d
    ffn_block = d + FFN_MULT * d * d * 2
    total = 2 * d  # embedding row + position row
    for i in range(cfg.n_layers):
        if mask.layer_skipped[i]:
            continue
        if cfg.has_attn(i) and mask.attn_enabled[i]:
            total += attn_block
        if cfg.has_alt(i) and mask.alt_enabled[i]:
            total += ssm_block
        total += ffn_block
    total += d + d * cfg.vocab_size  # final norm + head
    return total


def kv_scalars_per_token(cfg: ModelConfig, mask: ComponentMask | None) -> int:
    """KV-cache floats appended per token (2 d per live attention layer)."""
    if mask is None:
        mask = ComponentMask.full(cfg.n_layers)
    n_attn = sum(1 for i in range(cfg.n_layers)
                 if cfg.has_attn(i) and mask.attn_enabled[i]
                 and not mask.layer_skipped[i])
    return 2 * cfg.d_model * n_attn


def flop_ratio(cfg: ModelConfig, strategy: DraftStrategy,
               kv_bandwidth_coeff: float = 0.0,
               context_len: int | None = None) -> CostModel:
    """Draft-to-verify cost ratio for a strategy on a model.

    The base estimate is the parameter-count proxy. With a positive
    ``kv_bandwidth_coeff`` an additive ``coeff * n * kv_floats_per_token``
    term models cache-bandwidth growth at sequence length ``n`` on each side,
    which lowers the ratio for recurrent drafts as context grows.
    """
    draft_mask = build_mask(cfg, strategy)
    draft = params_per_token(cfg, draft_mask)
    full = params_per_token(cfg, None)
    fraction = draft / full
    notes = ("parameter-count proxy; excludes sequence-length-dependent "
             "attention-score compute")
    if kv_bandwidth_coeff > 0.0:
        if context_len is None or context_len < 1:
            raise ValueError("context_len required when modelling KV bandwidth")
        draft_cost = draft + kv_bandwidth_coeff * context_len * \
            kv_scalars_per_token(cfg, draft_mask)
        full_cost = full + kv_bandwidth_coeff * context_len * \
            kv_scalars_per_token(cfg, None)
        notes += (f"; plus KV bandwidth term coeff={kv_bandwidth_coeff} "
                  f"at n={context_len}")
        return CostModel(min(1.0, draft_cost / full_cost), fraction, notes)
    return CostModel(min(1.0, fraction), fraction, notes)


def optimal_k(alpha_per_token: float, cost_ratio: float, k_max: int) -> int:
    """Draft length maximizing the modelled speedup; ties go to smaller k."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if not 0.0 <= alpha_per_token < 1.0:
        raise ValueError("alpha must be in [0, 1)")
    best_k, best_s = 1, -math.inf
    for k in range(1, k_max + 1):
        s = speedup(alpha_per_token, k, cost_ratio)
        if s > best_s:
            best_k, best_s = k, s
    return best_k


def speedup_readings(alpha: float, k: int, cost_ratio: float) -> dict:
    """Both defensible readings of a reported acceptance rate.

    ``direct`` treats ``alpha`` as the per-token probability of the round
    model; ``all_token_converted`` first converts an all-token rate alpha(k)
    to per-token by the k-th root. Reported side by side because published
    summary numbers do not always say which convention they used.
    """
    direct = speedup(alpha, k, cost_ratio)
    converted = speedup(per_token_from_all_token(alpha, k), k, cost_ratio)
    return {
        "alpha_input": alpha,
        "k": k,
        "cost_ratio": cost_ratio,
        "speedup_direct": direct,
        "speedup_all_token_converted": converted,
        "expected_tokens_direct": expected_tokens(alpha, k),
        "expected_tokens_all_token_converted": expected_tokens(
            per_token_from_all_token(alpha, k), k),
    }
