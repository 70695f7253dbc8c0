"""Score + allocate: the full eviction decision for one policy on a prefilled stack."""
from __future__ import annotations

import numpy as np

from .attention import AttentionStack, LayerActivations
from .kvcache import SelectionPlan
from .linalg import ParameterError
from .scoring import PolicyConfig, layer_preference, observation_attention, plan_sllm, score_model
from .selection import (
    BudgetSpec,
    cake_layer_budgets,
    normalize_layer_scores,
    select_adakv,
    select_global,
    select_global_raw,
    select_per_head,
    select_two_stage,
)

NATIVE_ALLOCATION = {
    "laprox": "global",
    "snapkv": "per_head",
    "cake": "cake",
    "adakv": "adakv",
    "criticalkv": "per_head",
}

# Ablation grid: attention-mean vs LaProx score, crossed with uniform vs global budgets.
ABLATION_VARIANTS = {
    "A_L": PolicyConfig("snapkv", allocation="per_head"),
    "A_G": PolicyConfig("snapkv", allocation="global"),
    "L_L": PolicyConfig("laprox", allocation="per_head"),
    "L_G": PolicyConfig("laprox", allocation="global"),
}


def check_budget(cfg: PolicyConfig, budget: int) -> None:
    if cfg.policy == "sllm":
        if budget < cfg.sinks + 1:
            raise ParameterError(f"budget {budget} cannot hold {cfg.sinks} sink tokens plus a recent window")
    else:
        BudgetSpec(budget, cfg.window)


def cake_budgets(cfg: PolicyConfig, stack: AttentionStack, acts: list[LayerActivations], budget: int) -> np.ndarray:
    prefs = [layer_preference(observation_attention(a, stack, cfg.window), cfg.tau1, cfg.tau2) for a in acts]
    n_tokens = acts[0].n_tokens
    per_layer = cake_layer_budgets(prefs, budget * stack.n_heads * stack.n_layers, stack.n_heads,
                                   window=min(cfg.window, n_tokens), n_tokens=max(n_tokens, budget))
    return per_layer // stack.n_heads


def build_plan(cfg: PolicyConfig, stack: AttentionStack, acts: list[LayerActivations], budget: int) -> SelectionPlan:
    """Per-head ``budget`` in tokens (window included); model total is budget * H * L."""
    check_budget(cfg, budget)
    n_tokens = acts[0].n_tokens
    if cfg.policy == "sllm":
        return plan_sllm(n_tokens, cfg, budget, stack.n_layers, stack.n_heads)
    scores = score_model(cfg, acts, stack)
    alloc = cfg.allocation or NATIVE_ALLOCATION[cfg.policy]
    total = budget * stack.n_heads * stack.n_layers
    if alloc == "per_head":
        if cfg.policy == "criticalkv" and cfg.safeguard > 0:
            fallback = score_model(PolicyConfig("snapkv", window=cfg.window, kernel=cfg.kernel), acts, stack)
            return select_two_stage(scores, fallback, budget, cfg.safeguard)
        return select_per_head(scores, budget)
    if alloc == "adakv":
        return select_adakv(scores, budget, cfg.safeguard)
    if alloc == "cake":
        return select_per_head(scores, cake_budgets(cfg, stack, acts, budget))
    if alloc == "global":
        return select_global(normalize_layer_scores(scores), total)
    if alloc == "layer":
        return select_global(normalize_layer_scores(scores), total, scope="layer")
    if alloc == "global_raw":
        return select_global_raw(scores, total)
    raise ParameterError(f"unknown allocation {alloc!r}")


def budget_contract(budget: int, n_tokens: int, n_heads: int, n_layers: int) -> int:
    """Exact number of retained (layer, head, token) entries a plan must have."""
    return min(budget, n_tokens) * n_heads * n_layers
