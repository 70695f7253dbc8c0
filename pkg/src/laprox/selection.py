"""Turn score tensors into selection plans.

Budgets are per-head counts ``B`` that include the observation window: a head
keeping ``B`` entries keeps its ``w`` window tokens plus ``B - w`` chosen by score.
Ties go to the lower (layer, head, token) index.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .kvcache import SelectionPlan
from .linalg import ParameterError
from .scoring import ScoreTensor


@dataclass(frozen=True)
class BudgetSpec:
    per_head: int
    window: int

    def __post_init__(self):
        if self.per_head < 1:
            raise ParameterError(f"budget must be a positive integer, got {self.per_head}")
        if self.per_head < self.window:
            raise ParameterError(f"budget {self.per_head} is smaller than the {self.window}-token window")

    def layer_budget(self, n_heads: int) -> int:
        return self.per_head * n_heads

    def model_budget(self, n_layers: int, n_heads: int) -> int:
        return self.per_head * n_heads * n_layers


def _ranked(values: np.ndarray) -> np.ndarray:
    """Indices by descending value; stable, so ties keep index order."""
    return np.argsort(-values, kind="stable")


def _keep_to_plan(keep: np.ndarray, window: int) -> SelectionPlan:
    return SelectionPlan.from_mask(keep, window)


def _check_window(scores: ScoreTensor, per_head) -> None:
    if np.min(per_head) < scores.window:
        raise ParameterError(f"budget {np.min(per_head)} is smaller than the {scores.window}-token window")


def select_per_head(scores: ScoreTensor, budget) -> SelectionPlan:
    """Independent top-B per head. ``budget`` is an int or a per-layer array of per-head budgets."""
    per_layer = np.broadcast_to(np.asarray(budget, dtype=np.int64), (scores.n_layers,))
    _check_window(scores, per_layer)
    if (per_layer > scores.n_tokens).any():
        warnings.warn(f"budget exceeds the {scores.n_tokens} cached tokens; retaining everything")
    n_ev = scores.n_evictable
    keep = np.zeros(scores.scores.shape, dtype=bool)
    keep[..., n_ev:] = True
    for l in range(scores.n_layers):
        extra = min(int(per_layer[l]), scores.n_tokens) - scores.window
        for h in range(scores.n_heads):
            keep[l, h, _ranked(scores.scores[l, h, :n_ev])[:extra]] = True
    return _keep_to_plan(keep, scores.window)


def select_adakv(scores: ScoreTensor, budget: int, safeguard: float) -> SelectionPlan:
    """Layer-wide top-K over raw head scores with a per-head floor of ceil(safeguard*B) entries."""
    _check_window(scores, budget)
    if budget > scores.n_tokens:
        warnings.warn(f"budget exceeds the {scores.n_tokens} cached tokens; retaining everything")
        budget = scores.n_tokens
    floor = max(math.ceil(round(safeguard * budget, 9)), scores.window)
    n_heads, n_ev = scores.n_heads, scores.n_evictable
    layer_budget = budget * n_heads
    if floor * n_heads > layer_budget:
        raise ParameterError(f"safeguard floor {floor} x {n_heads} heads exceeds layer budget {layer_budget}")
    keep = np.zeros(scores.scores.shape, dtype=bool)
    keep[..., n_ev:] = True
    for l in range(scores.n_layers):
        s = scores.scores[l, :, :n_ev]
        for h in range(n_heads):
            keep[l, h, _ranked(s[h])[:floor - scores.window]] = True
        remaining = layer_budget - int(keep[l].sum())
        free = np.flatnonzero(~keep[l, :, :n_ev].ravel())
        chosen = free[_ranked(s.ravel()[free])[:remaining]]
        sub = keep[l, :, :n_ev].copy()
        sub.reshape(-1)[chosen] = True
        keep[l, :, :n_ev] = sub
    return _keep_to_plan(keep, scores.window)


def select_two_stage(primary: ScoreTensor, fallback: ScoreTensor, budget: int, safeguard: float) -> SelectionPlan:
    """Per head: ceil(safeguard*(B-w)) slots by ``fallback``, the rest by ``primary``.

    This is how the criticalkv policy uses its safeguard: a uniform floor of
    tokens picked by plain mean attention before the value-aware score fills the rest.
    """
    _check_window(primary, budget)
    n_ev, w = primary.n_evictable, primary.window
    free_slots = min(budget, primary.n_tokens) - w
    first = min(math.ceil(round(safeguard * free_slots, 9)), free_slots)
    keep = np.zeros(primary.scores.shape, dtype=bool)
    keep[..., n_ev:] = True
    for l in range(primary.n_layers):
        for h in range(primary.n_heads):
            row = keep[l, h]
            row[_ranked(fallback.scores[l, h, :n_ev])[:first]] = True
            rest = np.flatnonzero(~row[:n_ev])
            row[rest[_ranked(primary.scores[l, h, rest])[:free_slots - first]]] = True
    return _keep_to_plan(keep, w)


def _clipped_shares(weights: np.ndarray, total: int, lo: int, hi: int) -> np.ndarray:
    """Solve sum(clip(s * w, lo, hi)) == total for the real-valued shares.

    Shares are monotone in weight, so the solution pins some of the largest
    weights at ``hi``, some of the smallest at ``lo``, and splits the rest exactly
    in proportion. Trying every (top, bottom) pin count avoids any search over
    ``s``, which tiny weights would push out of floating-point range.
    """
    n = len(weights)
    order = _ranked(weights)
    tol = 1e-9 * max(hi, 1)
    for n_hi in range(n + 1):
        for n_lo in range(n - n_hi + 1):
            mid = order[n_hi:n - n_lo]
            rest = total - n_hi * hi - n_lo * lo
            shares = np.empty(n)
            shares[order[:n_hi]] = hi
            shares[order[n - n_lo:]] = lo
            if len(mid) == 0:
                if rest == 0:
                    return shares
                continue
            w = weights[mid]
            if w.sum() <= 0:
                continue
            frac = w / w.sum()
            q = rest * frac
            if q.min() < lo - tol or q.max() > hi + tol:
                continue
            # pinned entries must sit beyond the bounds at the same scale
            if n_hi and weights[order[n_hi - 1]] * rest < (hi - tol) * w.sum():
                continue
            if n_lo and weights[order[n - n_lo]] * rest > (lo + tol) * w.sum():
                continue
            shares[mid] = np.clip(q, lo, hi)
            return shares
    raise ParameterError(f"no bounded split of {total} found for weights {weights.tolist()}")


def apportion(weights, total: int, lo: int = 0, hi: int | None = None) -> np.ndarray:
    """Integer split of ``total`` proportional to ``weights`` with every share in [lo, hi].

    Real-valued shares are clip(s * w, lo, hi) with the scale ``s`` chosen so they
    sum to ``total``; those are rounded by largest remainder. Zero-weight entries
    stay at ``lo`` unless the positive ones are all at ``hi`` with budget left over.
    """
    weights = np.asarray(weights, dtype=np.float64)
    n = len(weights)
    hi = total if hi is None else hi
    if not n * lo <= total <= n * hi:
        raise ParameterError(f"cannot split {total} into {n} shares within [{lo}, {hi}]")
    pos = weights > 0
    if not pos.any():
        return apportion(np.ones(n), total, lo, hi)
    at_cap = int(pos.sum()) * hi + int((~pos).sum()) * lo
    if at_cap < total:
        out = np.where(pos, hi, 0)
        out[~pos] = apportion(np.ones(int((~pos).sum())), total - int(out.sum()), lo, hi)
        return out

    quotas = _clipped_shares(weights, total, lo, hi)
    base = np.floor(quotas).astype(np.int64)
    short = total - int(base.sum())
    room = np.flatnonzero(base < hi)
    base[room[_ranked((quotas - base)[room])[:short]]] += 1
    return base


def cake_layer_budgets(preferences, total_budget: int, n_heads: int, window: int = 0,
                       n_tokens: int | None = None) -> np.ndarray:
    """Per-layer token budgets proportional to CAKE layer preferences.

    Budgets are multiples of ``n_heads`` so each layer splits evenly across its
    heads; each layer gets at least ``window`` and at most ``n_tokens`` per head.
    """
    prefs = np.asarray(preferences, dtype=np.float64)
    if total_budget % n_heads:
        raise ParameterError(f"total budget {total_budget} is not a multiple of {n_heads} heads")
    if total_budget < len(prefs) * window * n_heads:
        raise ParameterError(f"total budget {total_budget} cannot cover every layer's window")
    if not (prefs > 0).any() or not np.isfinite(prefs).all():
        warnings.warn("degenerate CAKE layer preferences; splitting the budget uniformly")
        prefs = np.ones_like(prefs)
    units = apportion(prefs, total_budget // n_heads, lo=window, hi=n_tokens)
    return units * n_heads


@dataclass
class NormalizedScores:
    values: np.ndarray  # (L, H, T), each layer's non-window entries sum to 1
    window: int

    @property
    def n_evictable(self) -> int:
        return self.values.shape[2] - self.window


def normalize_layer_scores(scores: ScoreTensor) -> NormalizedScores:
    n_ev = scores.n_evictable
    values = np.zeros_like(scores.scores)
    for l in range(scores.n_layers):
        part = scores.scores[l, :, :n_ev]
        total = part.sum()
        if n_ev and not total > 0:
            raise ParameterError(f"layer {l} has no positive evictable score; normalization is undefined")
        if n_ev:
            values[l, :, :n_ev] = part / total
    return NormalizedScores(values, scores.window)


def _select_flat(values: np.ndarray, window: int, k: int) -> SelectionPlan:
    n_layers, n_heads, n_tokens = values.shape
    n_ev = n_tokens - window
    sentinels = n_layers * n_heads * window
    if k < sentinels:
        raise ParameterError(f"budget {k} cannot hold the {sentinels} window entries")
    if k > values.size:
        warnings.warn(f"budget {k} exceeds the {values.size} cached entries; retaining everything")
        k = values.size
    keep = np.zeros(values.shape, dtype=bool)
    keep[..., n_ev:] = True
    flat = values[..., :n_ev].reshape(-1)
    chosen = _ranked(flat)[:k - sentinels]
    sub = np.zeros(flat.shape, dtype=bool)
    sub[chosen] = True
    keep[..., :n_ev] = sub.reshape(n_layers, n_heads, n_ev)
    return _keep_to_plan(keep, window)


def select_global(norm: NormalizedScores, budget: int, scope: str = "model") -> SelectionPlan:
    """One top-K over every (layer, head, token) normalized score.

    ``scope="layer"`` instead splits ``budget`` evenly across layers and runs the
    joint top-K inside each layer (heads flattened, layers kept separate).
    """
    if scope == "model":
        return _select_flat(norm.values, norm.window, budget)
    if scope != "layer":
        raise ParameterError(f"unknown selection scope {scope!r}")
    n_layers = norm.values.shape[0]
    if budget % n_layers:
        raise ParameterError(f"budget {budget} does not split evenly over {n_layers} layers")
    parts = [_select_flat(norm.values[l:l + 1], norm.window, budget // n_layers) for l in range(n_layers)]
    return SelectionPlan([p.indices[0] for p in parts], parts[0].n_tokens, norm.window)


def select_global_raw(scores: ScoreTensor, budget: int) -> SelectionPlan:
    """Model-wide top-K on unnormalized scores. Only meant for ablations."""
    return _select_flat(scores.scores, scores.window, budget)
