"""Experiments: output fidelity, column-row sampling error, planted needles, retention."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionStack, LayerActivations, build_stack, decode_step, prefill_stack
from .kvcache import KvCache, SelectionPlan, apply_plan, retention_stats
from .linalg import ParameterError, col_l2_norms, cosine, make_rng, matmul, row_l2_norms
from .policies import build_plan
from .scoring import PolicyConfig, score_model


@dataclass
class FidelityReport:
    policy: str
    budget: int
    cosine: np.ndarray    # (L,)
    frob_err: np.ndarray  # (L,) ||o_c - o_f|| / ||o_f||
    plan: SelectionPlan | None = field(default=None, repr=False)

    @property
    def mean_cosine(self) -> float:
        return float(self.cosine.mean())


class FidelityTrial:
    """One prompt pushed through a stack, with the full-cache first decode step precomputed.

    Compressed runs reuse the full run's per-layer decode inputs (teacher forcing),
    so differences never compound across layers.
    """

    def __init__(self, stack: AttentionStack, x: np.ndarray, x_new: np.ndarray):
        self.stack = stack
        self.acts = prefill_stack(stack, x)
        self.cache = KvCache.from_prefill(stack, self.acts)
        self.inputs, self.full_out, self.full_resid = [], [], []
        h = np.asarray(x_new, dtype=np.float64).reshape(1, -1)
        for layer in range(stack.n_layers):
            self.inputs.append(h)
            o = decode_step(stack, layer, h, self.cache)
            self.full_out.append(o.out)
            self.full_resid.append(o.resid)
            h = o.resid

    @classmethod
    def random(cls, stack: AttentionStack, seq_len: int, rng: np.random.Generator) -> "FidelityTrial":
        x = rng.standard_normal((seq_len, stack.model_dim))
        x_new = rng.standard_normal((1, stack.model_dim))
        return cls(stack, x, x_new)

    @property
    def n_tokens(self) -> int:
        return self.acts[0].n_tokens

    def compressed_outputs(self, plan: SelectionPlan, residual: bool = False) -> list[np.ndarray]:
        view = apply_plan(self.cache, plan)
        outs = []
        for layer in range(self.stack.n_layers):
            o = decode_step(self.stack, layer, self.inputs[layer], view)
            outs.append(o.resid if residual else o.out)
        return outs

    def evaluate_plan(self, plan: SelectionPlan, policy: str, budget: int, residual: bool = False) -> FidelityReport:
        ref = self.full_resid if residual else self.full_out
        got = self.compressed_outputs(plan, residual)
        cos = np.array([cosine(a, b) for a, b in zip(ref, got)])
        err = np.array([np.linalg.norm(b - a) / max(np.linalg.norm(a), 1e-300) for a, b in zip(ref, got)])
        return FidelityReport(policy, budget, cos, err, plan)

    def evaluate(self, cfg: PolicyConfig, budget: int, residual: bool = False, name: str | None = None) -> FidelityReport:
        plan = build_plan(cfg, self.stack, self.acts, budget)
        return self.evaluate_plan(plan, name or cfg.policy, budget, residual)


def measure_fidelity(stack: AttentionStack, x: np.ndarray, cfg: PolicyConfig, budget: int,
                     x_new: np.ndarray | None = None, residual: bool = False) -> FidelityReport:
    """Per-layer cosine between full and compressed outputs of the first decode step.

    Without ``x_new`` the decode token repeats the prompt's last embedding.
    """
    if x_new is None:
        x_new = x[-1:]
    return FidelityTrial(stack, x, x_new).evaluate(cfg, budget, residual)


def paired_fidelity(n_layers: int, n_heads: int, n_kv_heads: int, head_dim: int, seq_len: int,
                    seed: int, variants: dict[str, PolicyConfig], budgets: list[int],
                    head_spread: float = 0.0, residual: bool = False) -> list[FidelityReport]:
    """All (variant, budget) reports for one seeded stack and prompt."""
    rng = make_rng(seed)
    stack = build_stack(n_layers, n_heads, n_kv_heads, head_dim, rng, head_spread=head_spread)
    trial = FidelityTrial.random(stack, seq_len, rng)
    return [trial.evaluate(cfg, b, residual, name=name) for b in budgets for name, cfg in variants.items()]


# --- column-row sampling ---------------------------------------------------------

def crs_error(a: np.ndarray, b: np.ndarray, subset) -> float:
    """Frobenius error of approximating ``a @ b`` by the column-row pairs in ``subset``."""
    idx = np.asarray(sorted(set(int(i) for i in subset)), dtype=np.int64)
    if len(idx) and (idx[0] < 0 or idx[-1] >= a.shape[1]):
        raise IndexError(f"subset index outside [0, {a.shape[1]})")
    approx = matmul(a[:, idx], b[idx, :]) if len(idx) else np.zeros((a.shape[0], b.shape[1]))
    return float(np.linalg.norm(matmul(a, b) - approx))


@dataclass
class CrsRanking:
    order: np.ndarray         # indices, best first
    weights: np.ndarray       # ||a[:, i]|| * ||b[i, :]||
    normalizer: float         # sum of weights

    @property
    def probabilities(self) -> np.ndarray:
        return self.weights / self.normalizer if self.normalizer > 0 else np.full(len(self.weights), 1 / len(self.weights))

    def top(self, k: int) -> np.ndarray:
        return np.sort(self.order[:k])


def crs_rank_indices(a: np.ndarray, b: np.ndarray) -> CrsRanking:
    w = col_l2_norms(a) * row_l2_norms(b)
    return CrsRanking(np.argsort(-w, kind="stable"), w, float(w.sum()))


@dataclass
class CrsTrial:
    trial: int
    n: int
    k: int
    norm_error: float
    median_error: float
    random_error: float

    @property
    def beats_median(self) -> bool:
        return self.norm_error <= self.median_error

    @property
    def beats_random(self) -> bool:
        return self.norm_error <= self.random_error


def crs_trial(trial: int, rng: np.random.Generator, n_range=(6, 10), k_range=(1, 3),
              outer_dim: int = 32) -> CrsTrial:
    """Norm-product top-k against every k-subset and one uniformly random k-subset.

    ``a`` is (outer_dim, n) and ``b`` is (n, outer_dim); the default 32 mirrors the
    observation-window rows of an attention map.
    """
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    k = int(rng.integers(k_range[0], k_range[1] + 1))
    a = rng.standard_normal((outer_dim, n))
    b = rng.standard_normal((n, outer_dim))
    ours = crs_error(a, b, crs_rank_indices(a, b).top(k))
    every = [crs_error(a, b, s) for s in itertools.combinations(range(n), k)]
    rand = crs_error(a, b, rng.choice(n, size=k, replace=False))
    return CrsTrial(trial, n, k, ours, float(np.median(every)), rand)


# --- planted needle ---------------------------------------------------------------

@dataclass
class NeedleInstance:
    stack: AttentionStack
    acts: LayerActivations
    needle_pos: int
    budget: int
    window: int
    needle_scale: float
    needle_attention: float

    @property
    def n_tokens(self) -> int:
        return self.acts.n_tokens

    def observation(self) -> tuple[np.ndarray, np.ndarray]:
        """Window attention rows (w, T) and projected values H = V W_O (T, D)."""
        a = self.acts.attn[0, -self.window:, :]
        h = matmul(self.acts.values[0], self.stack.w_o[0])
        return a, h

    def output_error(self, plan: SelectionPlan) -> float:
        a, h = self.observation()
        return crs_error(a, h, plan.indices[0][0])


def plant_needle(n_tokens: int, window: int, needle_pos: int, rng: np.random.Generator,
                 budget: int | None = None, head_dim: int = 8, kernel: int = 7,
                 needle_scale: float | None = None) -> NeedleInstance:
    """Single-layer, single-head activations where one token has tiny attention but a huge value.

    The needle and its pooling neighbourhood get attention ``1e-3`` times the
    typical weight, which drops the needle to the bottom of the mean-attention ranking.
    Its value row is scaled so its LaProx score is 4x the best competitor's
    unless ``needle_scale`` fixes the scale (0 gives a degenerate needle).
    """
    budget = window + 4 if budget is None else budget
    n_ev = n_tokens - window
    if not 0 <= needle_pos < n_ev:
        raise ParameterError(f"needle position {needle_pos} must precede the window at {n_ev}")
    if budget < window or budget - window + kernel >= n_ev:
        raise ParameterError(f"cannot plant a needle with T={n_tokens}, w={window}, B={budget}, kernel={kernel}")

    logits = rng.normal(0.0, 1.0, (n_tokens, n_tokens))
    weights = np.exp(logits)
    lo, hi = max(needle_pos - kernel // 2, 0), min(needle_pos + kernel // 2 + 1, n_ev)
    weights[:, lo:hi] *= 1e-3
    weights[np.triu_indices(n_tokens, 1)] = 0.0
    attn = weights / weights.sum(axis=1, keepdims=True)

    values = rng.normal(0.0, 1.0 / np.sqrt(head_dim), (n_tokens, head_dim))
    values[needle_pos] /= np.linalg.norm(values[needle_pos])
    w_o = np.eye(head_dim)
    col = col_l2_norms(attn[-window:])
    rival = np.delete(col[:n_ev] * row_l2_norms(values[:n_ev]), needle_pos).max()
    if needle_scale is None:
        needle_scale = 4.0 * rival / col[needle_pos]
    values[needle_pos] *= needle_scale

    stack = AttentionStack(1, 1, 1, head_dim, np.zeros((1, head_dim, head_dim)),
                           np.zeros((1, head_dim, head_dim)), np.zeros((1, head_dim, head_dim)),
                           w_o[None])
    av = matmul(attn, values)
    acts = LayerActivations(0, np.zeros((n_tokens, head_dim)), np.zeros((1, n_tokens, head_dim)),
                            np.zeros((1, n_tokens, head_dim)), values[None], attn[None], av, av, av)
    return NeedleInstance(stack, acts, needle_pos, budget, window, float(needle_scale),
                          float(attn[-window:, needle_pos].mean()))


def needle_plans(inst: NeedleInstance, kernel: int = 7) -> dict[str, SelectionPlan]:
    plans = {}
    for policy in ("laprox", "snapkv"):
        cfg = PolicyConfig(policy, window=inst.window, kernel=kernel)
        plans[policy] = build_plan(cfg, inst.stack, [inst.acts], inst.budget)
    return plans


# --- retention distribution -------------------------------------------------------

@dataclass
class RetentionReport:
    counts: np.ndarray        # (inputs, L, H)
    head_mean: np.ndarray     # (L, H) mean retained count across inputs
    head_range: np.ndarray    # (L, H) max - min across inputs
    cross_input_std: np.ndarray  # (L, H) population std across inputs
    cross_head_var: np.ndarray   # (inputs,) variance of counts across heads within each input

    @property
    def max_range(self) -> int:
        return int(self.head_range.max())

    def rows(self):
        for i, c in enumerate(self.counts):
            for l in range(c.shape[0]):
                for h in range(c.shape[1]):
                    yield i, l, h, int(c[l, h])


def retention_report(plans: list[SelectionPlan]) -> RetentionReport:
    if len(plans) < 2:
        raise ParameterError("retention report needs plans from at least two inputs")
    counts = np.stack([retention_stats(p).counts for p in plans])
    return RetentionReport(
        counts,
        counts.mean(axis=0),
        counts.max(axis=0) - counts.min(axis=0),
        counts.std(axis=0),
        np.array([retention_stats(p).head_variance for p in plans]),
    )
