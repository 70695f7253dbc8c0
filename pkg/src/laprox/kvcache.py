"""Per-layer, per-KV-head key/value storage and index-based compressed views."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import AttentionStack, LayerActivations


class PlanError(ValueError):
    """A selection plan is inconsistent with the cache it is applied to."""


class ConsistencyError(ValueError):
    pass


@dataclass
class SelectionPlan:
    """Sorted retained token indices for every (layer, query head)."""

    indices: list[list[np.ndarray]]
    n_tokens: int
    window: int = 0

    @property
    def n_layers(self) -> int:
        return len(self.indices)

    @property
    def n_heads(self) -> int:
        return len(self.indices[0])

    def counts(self) -> np.ndarray:
        return np.array([[len(ix) for ix in layer] for layer in self.indices], dtype=np.int64)

    def total(self) -> int:
        return int(self.counts().sum())

    def validate(self) -> None:
        win = np.arange(self.n_tokens - self.window, self.n_tokens)
        for l, layer in enumerate(self.indices):
            for h, ix in enumerate(layer):
                if len(ix) and (ix[0] < 0 or ix[-1] >= self.n_tokens):
                    raise PlanError(f"layer {l} head {h}: index out of range [0, {self.n_tokens})")
                if np.any(np.diff(ix) <= 0):
                    raise PlanError(f"layer {l} head {h}: indices not strictly increasing")
                if not np.isin(win, ix).all():
                    raise PlanError(f"layer {l} head {h}: observation window not fully retained")

    @classmethod
    def full(cls, n_layers: int, n_heads: int, n_tokens: int, window: int = 0) -> "SelectionPlan":
        return cls([[np.arange(n_tokens) for _ in range(n_heads)] for _ in range(n_layers)],
                   n_tokens, window)

    @classmethod
    def from_mask(cls, keep: np.ndarray, window: int = 0) -> "SelectionPlan":
        """Build from a boolean (L, H, T) keep mask."""
        return cls([[np.flatnonzero(keep[l, h]) for h in range(keep.shape[1])]
                    for l in range(keep.shape[0])], keep.shape[2], window)


@dataclass
class KvCache:
    keys: list[list[np.ndarray]]       # [layer][kv_head] -> (n, d_h)
    values: list[list[np.ndarray]]
    positions: list[list[np.ndarray]]  # original token index of every stored row
    group_size: int = 1

    @classmethod
    def from_prefill(cls, stack: AttentionStack, acts: Sequence[LayerActivations]) -> "KvCache":
        lengths = {a.keys.shape[1] for a in acts}
        if len(lengths) != 1:
            raise ConsistencyError(f"layers disagree on token count: {sorted(lengths)}")
        (n_tokens,) = lengths
        keys = [[a.keys[g].copy() for g in range(stack.n_kv_heads)] for a in acts]
        values = [[a.values[g].copy() for g in range(stack.n_kv_heads)] for a in acts]
        positions = [[np.arange(n_tokens) for _ in range(stack.n_kv_heads)] for _ in acts]
        return cls(keys, values, positions, stack.group_size)

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def n_kv_heads(self) -> int:
        return len(self.keys[0])

    def n_entries(self, layer: int, kv_head: int) -> int:
        return len(self.positions[layer][kv_head])

    def head_kv(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
        g = head // self.group_size
        return self.keys[layer][g], self.values[layer][g]

    def append(self, layer: int, kv_head: int, key: np.ndarray, value: np.ndarray, position: int) -> None:
        self.keys[layer][kv_head] = np.vstack([self.keys[layer][kv_head], key.reshape(1, -1)])
        self.values[layer][kv_head] = np.vstack([self.values[layer][kv_head], value.reshape(1, -1)])
        self.positions[layer][kv_head] = np.append(self.positions[layer][kv_head], position)


@dataclass
class CacheView:
    """Read-only view of ``cache`` restricted to ``plan``. Nothing is copied until asked."""

    cache: KvCache
    plan: SelectionPlan
    _rows: dict = field(default_factory=dict, repr=False)

    def rows(self, layer: int, head: int) -> np.ndarray:
        """Storage rows of the KV head backing ``head`` that this query head may attend to."""
        key = (layer, head)
        if key not in self._rows:
            g = head // self.cache.group_size
            pos = self.cache.positions[layer][g]
            want = self.plan.indices[layer][head]
            at = np.searchsorted(pos, want)
            ok = at < len(pos)
            if not ok.all() or not np.array_equal(pos[at], want):
                raise PlanError(f"layer {layer} head {head}: plan names tokens absent from the cache")
            self._rows[key] = at
        return self._rows[key]

    def head_kv(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
        k, v = self.cache.head_kv(layer, head)
        r = self.rows(layer, head)
        if len(r) == len(k):
            return k, v
        return k[r], v[r]

    def positions(self, layer: int, head: int) -> np.ndarray:
        return self.plan.indices[layer][head]

    def physical_indices(self, layer: int, kv_head: int) -> np.ndarray:
        """Union of the retained sets of every query head sharing ``kv_head``."""
        g = self.cache.group_size
        heads = range(kv_head * g, (kv_head + 1) * g)
        return np.unique(np.concatenate([self.plan.indices[layer][h] for h in heads]))

    def materialize(self) -> KvCache:
        keys, values, positions = [], [], []
        for l in range(self.cache.n_layers):
            ks, vs, ps = [], [], []
            for g in range(self.cache.n_kv_heads):
                phys = self.physical_indices(l, g)
                pos = self.cache.positions[l][g]
                r = np.searchsorted(pos, phys)
                ks.append(self.cache.keys[l][g][r].copy())
                vs.append(self.cache.values[l][g][r].copy())
                ps.append(pos[r].copy())
            keys.append(ks)
            values.append(vs)
            positions.append(ps)
        return KvCache(keys, values, positions, self.cache.group_size)


def apply_plan(cache: KvCache, plan: SelectionPlan) -> CacheView:
    if plan.n_layers != cache.n_layers or plan.n_heads != cache.n_kv_heads * cache.group_size:
        raise PlanError("plan shape does not match cache layers/heads")
    plan.validate()
    view = CacheView(cache, plan)
    for l in range(plan.n_layers):
        for h in range(plan.n_heads):
            view.rows(l, h)
    return view


def write_snapshot(path, plan: SelectionPlan) -> None:
    """CSV dump: one row per (token, layer, head) with a 0/1 retained flag."""
    keep = np.zeros((plan.n_layers, plan.n_heads, plan.n_tokens), dtype=bool)
    for l, layer in enumerate(plan.indices):
        for h, ix in enumerate(layer):
            keep[l, h, ix] = True
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["token", "layer", "head", "retained"])
        for l in range(plan.n_layers):
            for h in range(plan.n_heads):
                for t in range(plan.n_tokens):
                    w.writerow([t, l, h, int(keep[l, h, t])])


@dataclass
class RetentionStats:
    counts: np.ndarray        # (L, H)
    layer_totals: np.ndarray  # (L,)
    head_variance: float      # population variance of counts across all (layer, head)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def retention_stats(plan: SelectionPlan) -> RetentionStats:
    counts = plan.counts()
    return RetentionStats(counts, counts.sum(axis=1), float(counts.var()))
