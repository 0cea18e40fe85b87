"""Lossless draft-verify-accept speculative decoding, generic over strategy.

One speculation round drafts ``k`` tokens with a masked sub-model, verifies
them with the full model in one batched forward over the drafted tokens, and
accepts the longest prefix under the standard rejection rule: token ``x`` is
accepted with probability ``min(1, P_H(x)/P_S(x))``; the first rejection is
replaced by a sample from the residual ``norm(max(0, P_H - P_S))``; full
acceptance earns a bonus token from the target distribution. Under greedy
decoding the rule degenerates to per-position argmax agreement. Either way
the emitted stream follows the target distribution exactly.

Draft and verify keep separate decode states (no cache sharing); recurrent
states cannot be rewound, so both sides snapshot per drafted position and
roll back to the accepted prefix before consuming the round's final token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ComponentMask, DecodeState, HybridModel, ModelConfig, SsmSnapshot
from .numerics import RngState, argmax_tiebreak, sample_categorical, softmax

STRATEGY_KINDS = ("component_only", "layer_skip", "early_exit", "identity")


@dataclass(frozen=True)
class DraftStrategy:
    """How the draft sub-model is carved out of the target."""

    kind: str
    skip_fraction: float = 1.0 / 3.0
    exit_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if not 0.0 <= self.skip_fraction < 1.0:
            raise ValueError("skip_fraction must be in [0, 1)")
        if not 0.0 < self.exit_fraction <= 1.0:
            raise ValueError("exit_fraction must be in (0, 1]")

    def label(self) -> str:
        if self.kind == "layer_skip":
            return f"layer_skip_{self.skip_fraction:.2f}"
        if self.kind == "early_exit":
            return f"early_exit_{self.exit_fraction:.2f}"
        return self.kind


@dataclass(frozen=True)
class DecodeSettings:
    k: int = 4
    temperature: float = 0.0
    max_new_tokens: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class DraftSequence:
    """k drafted tokens with the full distribution each was sampled from."""

    tokens: list[int]
    dists: list[np.ndarray]
    base_pos: int

    def __post_init__(self):
        if len(self.tokens) < 1 or len(self.tokens) != len(self.dists):
            raise ValueError("draft needs >= 1 token, one distribution per token")

    @property
    def k(self) -> int:
        return len(self.tokens)

    def draft_prob(self, i: int) -> float:
        return float(self.dists[i][self.tokens[i]])


@dataclass
class SpecRoundResult:
    """Outcome of one speculation round.

    ``emitted_tokens`` holds the accepted prefix plus the correction token
    (on rejection) or the bonus token (on full acceptance), so its length is
    always ``accepted_count + 1``. ``per_position_match`` records greedy
    argmax agreement at every drafted position regardless of the sampled
    accept/reject outcome.
    """

    accepted_count: int
    all_accepted: bool
    emitted_tokens: list[int]
    per_position_match: list[bool]

    def __post_init__(self):
        k = len(self.per_position_match)
        if not 0 <= self.accepted_count <= k:
            raise ValueError("accepted_count out of range")
        if self.all_accepted != (self.accepted_count == k):
            raise ValueError("all_accepted inconsistent with accepted_count")
        if len(self.emitted_tokens) != self.accepted_count + 1:
            raise ValueError("emitted_tokens must hold accepted + 1 tokens")

    @property
    def k(self) -> int:
        return len(self.per_position_match)


def _skip_indices(n_layers: int, n_skip: int) -> list[int]:
    """Evenly spaced interior layers (the first and last are never skipped)."""
    if n_skip == 0:
        return []
    if n_layers < 3 or n_skip > n_layers - 2:
        raise ValueError(
            f"cannot skip {n_skip} of {n_layers} layers while keeping both ends")
    if n_skip == 1:
        return [int((n_layers - 1) / 2 + 0.5)]
    span = n_layers - 3
    return [1 + int(j * span / (n_skip - 1) + 0.5) for j in range(n_skip)]


def build_mask(cfg: ModelConfig, strategy: DraftStrategy) -> ComponentMask:
    """Realize a draft strategy as a per-layer component mask."""
    n = cfg.n_layers
    if strategy.kind == "identity":
        return ComponentMask.full(n)
    if strategy.kind == "component_only":
        if cfg.arch == "transformer":
            raise ValueError(
                "component_only requires a hybrid architecture; a transformer "
                "has no alternative component to isolate")
        if cfg.arch == "parallel_hybrid":
            return ComponentMask((False,) * n, (True,) * n, (False,) * n)
        skipped = tuple(cfg.layer_kind(i) == "attn" for i in range(n))
        keep = tuple(not s for s in skipped)
        return ComponentMask(keep, keep, skipped)
    if strategy.kind == "layer_skip":
        n_skip = math.ceil(strategy.skip_fraction * n)
        chosen = set(_skip_indices(n, n_skip))
        skipped = tuple(i in chosen for i in range(n))
        keep = tuple(not s for s in skipped)
        return ComponentMask(keep, keep, skipped)
    # early_exit
    keep_layers = math.ceil(strategy.exit_fraction * n)
    skipped = tuple(i >= keep_layers for i in range(n))
    keep = tuple(not s for s in skipped)
    return ComponentMask(keep, keep, skipped,
                         max_layer=keep_layers if keep_layers < n else None)


def residual_distribution(p_target: np.ndarray, p_draft: np.ndarray) -> np.ndarray:
    """norm(max(0, P_H - P_S)); the correction distribution on rejection."""
    r = np.maximum(p_target - p_draft, 0.0)
    total = r.sum()
    if total <= 0.0:
        raise ValueError("residual distribution has no mass")
    return r / total


def draft_k(model: HybridModel, mask: ComponentMask, state: DecodeState,
            settings: DecodeSettings, rng: RngState):
    """Draft ``settings.k`` tokens autoregressively from the masked model.

    Returns the draft plus rollback snapshots: ``snaps[j]`` restores the
    state to "prefix plus the first j drafted tokens consumed".
    """
    if state.mask != mask:
        raise ValueError("state was built under a different mask")
    if state.next_logits is None:
        raise ValueError("state has no pending logits; run a prefix pass first")
    k, temp = settings.k, settings.temperature
    tokens: list[int] = []
    dists: list[np.ndarray] = []
    base_pos = state.pos
    snaps: list[SsmSnapshot] = [state.snapshot()]
    dist = softmax(state.next_logits, temp)
    for i in range(k):
        tok = argmax_tiebreak(dist) if temp == 0.0 else sample_categorical(dist, rng)
        tokens.append(tok)
        dists.append(dist)
        if i < k - 1:
            logits, hist = model.forward_chunk(state, [tok], record_states=True)
            snaps.append(hist[0])
            dist = softmax(logits[0], temp)
    return DraftSequence(tokens, dists, base_pos), snaps


def accept_draft(target_dists: list[np.ndarray], draft: DraftSequence,
                 temperature: float, rng: RngState) -> SpecRoundResult:
    """Pure acceptance core over precomputed distributions.

    ``target_dists`` holds k+1 target distributions: one per drafted position
    plus the bonus position. Randomness is consumed only at temperature > 0.
    """
    k = draft.k
    if len(target_dists) != k + 1:
        raise ValueError(f"need {k + 1} target distributions, got {len(target_dists)}")
    matches = [argmax_tiebreak(draft.dists[i]) == argmax_tiebreak(target_dists[i])
               for i in range(k)]
    if temperature == 0.0:
        accepted = 0
        while accepted < k and matches[accepted]:
            accepted += 1
    else:
        accepted = 0
        while accepted < k:
            tok = draft.tokens[accepted]
            p_s = draft.dists[accepted][tok]
            p_h = target_dists[accepted][tok]
            if p_s <= 0.0:
                raise ValueError("drafted token has zero draft probability")
            if rng.uniform() < min(1.0, p_h / p_s):
                accepted += 1
            else:
                break
    if accepted == k:
        bonus_dist = target_dists[k]
        tok = (argmax_tiebreak(bonus_dist) if temperature == 0.0
               else sample_categorical(bonus_dist, rng))
        emitted = list(draft.tokens) + [tok]
    else:
        if temperature == 0.0:
            correction = argmax_tiebreak(target_dists[accepted])
        else:
            res = residual_distribution(target_dists[accepted],
                                        draft.dists[accepted])
            correction = sample_categorical(res, rng)
        emitted = list(draft.tokens[:accepted]) + [correction]
    return SpecRoundResult(accepted, accepted == k, emitted, matches)


def verify_and_accept(model: HybridModel, state: DecodeState,
                      draft: DraftSequence, settings: DecodeSettings,
                      rng: RngState) -> SpecRoundResult:
    """Score a draft with the state's (full-mask) model and accept a prefix.

    All k+1 target distributions come from one batched forward over the
    drafted tokens (the first position's distribution is the state's pending
    logits from the pass that consumed the prefix). On return the state has
    consumed exactly the emitted tokens.
    """
    if state.next_logits is None:
        raise ValueError("verify state has no pending logits; run a prefix pass")
    if draft.base_pos != state.pos:
        raise ValueError(
            f"draft was produced at position {draft.base_pos}, "
            f"verify state is at {state.pos}")
    temp = settings.temperature
    first = softmax(state.next_logits, temp)
    pre = state.snapshot()
    logits, hist = model.forward_chunk(state, draft.tokens, record_states=True)
    target_dists = [first] + [softmax(logits[j], temp) for j in range(draft.k)]
    result = accept_draft(target_dists, draft, temp, rng)
    a = result.accepted_count
    if a == 0:
        state.restore(pre)
    elif a < draft.k:
        state.restore(hist[a - 1])
    model.decode_step(state, result.emitted_tokens[-1])
    return result


def _check_generation_budget(cfg: ModelConfig, prompt, settings: DecodeSettings,
                             lookahead: int):
    if len(prompt) == 0:
        raise ValueError("prompt must be non-empty")
    need = len(prompt) + settings.max_new_tokens + lookahead
    if need > cfg.context_limit:
        raise ValueError(
            f"prompt + max_new_tokens needs {need} positions, "
            f"context_limit is {cfg.context_limit}")


def speculative_generate(model: HybridModel, strategy: DraftStrategy, prompt,
                         settings: DecodeSettings,
                         target_mask: ComponentMask | None = None):
    """Draft-verify loop; returns (generated tokens, per-round results).

    The emitted stream follows the target model's distribution exactly; at
    temperature 0 it is token-identical to autoregressive decoding. Every
    round emits between 1 and k+1 tokens; the final round may overshoot
    ``max_new_tokens``, in which case the output is truncated but the round
    result is kept whole for statistics.
    """
    cfg = model.cfg
    _check_generation_budget(cfg, prompt, settings, settings.k + 1)
    draft_mask = build_mask(cfg, strategy)
    rng = RngState(settings.seed)
    _, vstate = model.forward_prefix(prompt, target_mask)
    _, dstate = model.forward_prefix(prompt, draft_mask)
    out: list[int] = []
    rounds: list[SpecRoundResult] = []
    while len(out) < settings.max_new_tokens:
        draft, snaps = draft_k(model, draft_mask, dstate, settings, rng)
        result = verify_and_accept(model, vstate, draft, settings, rng)
        if result.all_accepted:
            model.decode_step(dstate, draft.tokens[-1])
        else:
            dstate.restore(snaps[result.accepted_count])
        model.decode_step(dstate, result.emitted_tokens[-1])
        out.extend(result.emitted_tokens)
        rounds.append(result)
    return out[:settings.max_new_tokens], rounds


def autoregressive_generate(model: HybridModel, prompt,
                            settings: DecodeSettings,
                            mask: ComponentMask | None = None) -> list[int]:
    """Plain one-token-at-a-time decoding; the speculative baseline."""
    _check_generation_budget(model.cfg, prompt, settings, 0)
    rng = RngState(settings.seed)
    _, state = model.forward_prefix(prompt, mask)
    temp = settings.temperature
    out: list[int] = []
    for _ in range(settings.max_new_tokens):
        dist = softmax(state.next_logits, temp)
        tok = argmax_tiebreak(dist) if temp == 0.0 else sample_categorical(dist, rng)
        out.append(tok)
        if len(out) < settings.max_new_tokens:
            model.decode_step(state, tok)
    return out
