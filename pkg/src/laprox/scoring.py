"""Eviction scores per (layer, head, token).

Scores only look at the last ``window`` query rows of each attention map. Those
same ``window`` most recent tokens are never evicted; they are tracked with a flag
rather than an infinite score, and their stored score value is 0.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .attention import AttentionStack, LayerActivations
from .kvcache import SelectionPlan
from .linalg import ParameterError, avg_pool_1d, col_l2_norms, matmul, row_l2_norms

POLICIES = ("laprox", "sllm", "snapkv", "cake", "adakv", "criticalkv")
ALLOCATIONS = ("per_head", "adakv", "cake", "layer", "global", "global_raw")


@dataclass(frozen=True)
class PolicyConfig:
    """Policy id plus hyperparameters.

    ``allocation=None`` uses the policy's own budget allocation. The
    gamma/tau/epsilon/safeguard defaults are our choices, not published values.
    """

    policy: str = "laprox"
    window: int = 32
    kernel: int = 7
    sinks: int = 4
    gamma: float = 1.0
    tau1: float = 1.0
    tau2: float = 1.0
    epsilon: float = 0.01
    safeguard: float = 0.2
    allocation: str | None = None
    pool_laprox: bool = False

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ParameterError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.window < 1:
            raise ParameterError(f"window must be >= 1, got {self.window}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ParameterError(f"pooling kernel must be odd and >= 1, got {self.kernel}")
        if not 0.0 <= self.safeguard <= 1.0:
            raise ParameterError(f"safeguard must lie in [0, 1], got {self.safeguard}")
        if self.sinks < 0 or self.epsilon < 0 or self.tau1 <= 0 or self.tau2 <= 0:
            raise ParameterError("sinks and epsilon must be >= 0, tau1 and tau2 > 0")
        if self.allocation is not None and self.allocation not in ALLOCATIONS:
            raise ParameterError(f"unknown allocation {self.allocation!r}; expected one of {ALLOCATIONS}")


@dataclass
class ScoreTensor:
    scores: np.ndarray  # (L, H, T); entries in the window region are 0 and ignored
    window: int         # trailing tokens carrying the never-evict flag

    def __post_init__(self):
        self.window = min(self.window, self.n_tokens)

    @property
    def n_layers(self) -> int:
        return self.scores.shape[0]

    @property
    def n_heads(self) -> int:
        return self.scores.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.scores.shape[2]

    @property
    def n_evictable(self) -> int:
        return self.n_tokens - self.window

    def is_window(self) -> np.ndarray:
        return np.arange(self.n_tokens) >= self.n_evictable

    @classmethod
    def concat(cls, parts: list["ScoreTensor"]) -> "ScoreTensor":
        return cls(np.concatenate([p.scores for p in parts]), parts[0].window)

    def write_csv(self, path) -> None:
        flags = self.is_window()
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["layer", "head", "token", "score", "is_window"])
            for l in range(self.n_layers):
                for h in range(self.n_heads):
                    for t in range(self.n_tokens):
                        score = "inf" if flags[t] else format(self.scores[l, h, t], ".17g")
                        w.writerow([l, h, t, score, int(flags[t])])


def observation_attention(acts: LayerActivations, stack: AttentionStack, window: int) -> np.ndarray:
    """(H, w, T) attention of the last ``window`` queries, averaged within each GQA group."""
    obs = acts.attn[:, -window:, :]
    g = stack.group_size
    if g == 1:
        return obs
    group_mean = obs.reshape(stack.n_kv_heads, g, *obs.shape[1:]).mean(axis=1)
    return np.repeat(group_mean, g, axis=0)


def _finish(raw: np.ndarray, window: int) -> ScoreTensor:
    n_tokens = raw.shape[-1]
    if n_tokens <= window:
        warnings.warn(f"{n_tokens} tokens fit inside the {window}-token window; nothing is evictable")
    out = np.array(raw, dtype=np.float64)
    out[..., max(n_tokens - window, 0):] = 0.0
    return ScoreTensor(out[None], window)


def _pool(v: np.ndarray, cfg: PolicyConfig) -> np.ndarray:
    # Pooling runs over the evictable prefix only, so window columns never leak in.
    n = max(v.shape[-1] - cfg.window, 0)
    out = v.copy()
    if n:
        out[..., :n] = avg_pool_1d(v[..., :n], cfg.kernel)
    return out


def projected_values(acts: LayerActivations, stack: AttentionStack, layer: int, head: int) -> np.ndarray:
    """H = V W_O^h: the head's value rows mapped into model space, (T, D)."""
    return matmul(acts.values[stack.kv_head(head)], stack.o_block(layer, head))


def score_laprox(acts: LayerActivations, stack: AttentionStack, layer: int, cfg: PolicyConfig) -> ScoreTensor:
    obs = observation_attention(acts, stack, cfg.window)
    raw = np.empty((stack.n_heads, acts.n_tokens))
    for h in range(stack.n_heads):
        raw[h] = col_l2_norms(obs[h]) * row_l2_norms(projected_values(acts, stack, layer, h))
    if cfg.pool_laprox:
        raw = _pool(raw, cfg)
    return _finish(raw, cfg.window)


def _mean_attention(acts, stack, cfg) -> np.ndarray:
    return observation_attention(acts, stack, cfg.window).mean(axis=1)


def score_snapkv(acts: LayerActivations, stack: AttentionStack, cfg: PolicyConfig) -> ScoreTensor:
    return _finish(_pool(_mean_attention(acts, stack, cfg), cfg), cfg.window)


def score_cake(acts: LayerActivations, stack: AttentionStack, cfg: PolicyConfig) -> ScoreTensor:
    obs = observation_attention(acts, stack, cfg.window)
    raw = obs.mean(axis=1) + cfg.gamma * obs.var(axis=1)
    return _finish(_pool(raw, cfg), cfg.window)


def score_criticalkv(acts: LayerActivations, stack: AttentionStack, layer: int, cfg: PolicyConfig) -> ScoreTensor:
    mean = _pool(_mean_attention(acts, stack, cfg), cfg)
    raw = np.empty_like(mean)
    for h in range(stack.n_heads):
        raw[h] = (mean[h] + cfg.epsilon) * row_l2_norms(projected_values(acts, stack, layer, h))
    return _finish(raw, cfg.window)


def score_layer(cfg: PolicyConfig, acts: LayerActivations, stack: AttentionStack) -> ScoreTensor:
    layer = acts.layer
    if cfg.policy == "laprox":
        return score_laprox(acts, stack, layer, cfg)
    if cfg.policy in ("snapkv", "adakv"):
        return score_snapkv(acts, stack, cfg)
    if cfg.policy == "cake":
        return score_cake(acts, stack, cfg)
    if cfg.policy == "criticalkv":
        return score_criticalkv(acts, stack, layer, cfg)
    raise ParameterError(f"policy {cfg.policy!r} does not score tokens")


def score_model(cfg: PolicyConfig, acts: list[LayerActivations], stack: AttentionStack) -> ScoreTensor:
    return ScoreTensor.concat([score_layer(cfg, a, stack) for a in acts])


def plan_sllm(n_tokens: int, cfg: PolicyConfig, budget: int, n_layers: int = 1, n_heads: int = 1) -> SelectionPlan:
    """Keep the first ``cfg.sinks`` tokens plus the most recent ``budget - sinks``."""
    if budget < cfg.sinks + 1:
        raise ParameterError(f"budget {budget} cannot hold {cfg.sinks} sink tokens plus a recent window")
    if budget >= n_tokens:
        keep = np.arange(n_tokens)
    else:
        keep = np.concatenate([np.arange(cfg.sinks), np.arange(n_tokens - (budget - cfg.sinks), n_tokens)])
    recent = min(budget - cfg.sinks, n_tokens)
    return SelectionPlan([[keep.copy() for _ in range(n_heads)] for _ in range(n_layers)], n_tokens, recent)


def layer_preference(obs: np.ndarray, tau1: float, tau2: float) -> float:
    """CAKE layer preference Entropy(A)^(1/tau1) * Var(A)^(1/tau2) on (H, w, T) window attention.

    Entropy is the mean row entropy; Var is the mean population variance of each
    column across the window rows.
    """
    p = obs[obs > 0]
    entropy = -(p * np.log(p)).sum() / (obs.shape[0] * obs.shape[1])
    variance = obs.var(axis=1).mean()
    e1 = 0.0 if math.isinf(tau1) else 1.0 / tau1
    e2 = 0.0 if math.isinf(tau2) else 1.0 / tau2
    return float(entropy ** e1 * variance ** e2)
