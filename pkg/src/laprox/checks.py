"""End-to-end invariant checks backing ``laprox selftest`` and the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .attention import AttentionStack, LayerActivations, build_stack, head_decomposition_residual, prefill_layer, prefill_stack, token_contribution
from .evaluate import crs_trial, needle_plans, paired_fidelity, plant_needle
from .linalg import make_rng
from .policies import ABLATION_VARIANTS, build_plan, budget_contract
from .scoring import (
    PolicyConfig, ScoreTensor, plan_sllm, score_cake, score_criticalkv, score_model, score_snapkv,
)
from .selection import normalize_layer_scores, select_adakv, select_per_head

# Synthetic stacks used for the fidelity experiments.
FIDELITY_SHAPE = dict(n_layers=4, n_heads=4, n_kv_heads=4, head_dim=16, seq_len=256)
FIDELITY_HEAD_SPREAD = 1.0
SCORING_POLICIES = ("laprox", "sllm", "snapkv", "cake", "adakv", "criticalkv")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    return wrapper


@_timed
def check_decomposition(n_configs: int = 100, seed: int = 1, tol: float = 1e-9) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        h = int(rng.choice([1, 2, 4, 8]))
        s = int(rng.choice([8, 64]))
        d = int(rng.choice([4, 16]))
        stack = build_stack(1, h, h, d, rng)
        acts = prefill_layer(stack, 0, rng.standard_normal((s, stack.model_dim)))
        worst = max(worst, head_decomposition_residual(acts, stack, 0))
    return CheckResult("head decomposition", worst <= tol, f"worst relative residual {worst:.2e} <= {tol:g}")


@_timed
def check_contribution(n_layers: int = 50, seed: int = 2, tol: float = 1e-9) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_layers):
        h = int(rng.choice([1, 2, 4]))
        kv = int(rng.choice([k for k in (1, 2, 4) if h % k == 0]))
        s = int(rng.choice([8, 24]))
        stack = build_stack(1, h, kv, 8, rng)
        acts = prefill_layer(stack, 0, rng.standard_normal((s, stack.model_dim)))
        for i in range(s):
            total = sum(token_contribution(acts, stack, 0, i, j) for j in range(i + 1))
            ref = acts.out[i]
            worst = max(worst, float(np.linalg.norm(total - ref) / np.linalg.norm(ref)))
    return CheckResult("token contribution completeness", worst <= tol,
                       f"worst relative gap {worst:.2e} <= {tol:g}")


def random_score_tensor(rng: np.random.Generator) -> ScoreTensor:
    shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(8, 65)))
    scales = np.exp(rng.normal(0.0, 3.0, (shape[0], 1, 1)))
    return ScoreTensor(rng.random(shape) * scales + 1e-12, int(rng.integers(1, 8)))


@_timed
def check_normalization(n_tensors: int = 100, seed: int = 3) -> CheckResult:
    rng = make_rng(seed)
    bad = 0
    for _ in range(n_tensors):
        st = random_score_tensor(rng)
        norm = normalize_layer_scores(st)
        n_ev = st.n_evictable
        for l in range(st.n_layers):
            before = np.argsort(-st.scores[l, :, :n_ev].ravel(), kind="stable")
            after = np.argsort(-norm.values[l, :, :n_ev].ravel(), kind="stable")
            bad += not np.array_equal(before, after)
    return CheckResult("normalization preserves within-layer ranking", bad == 0,
                       f"{bad} mismatching layers over {n_tensors} tensors")


def _policy_grid(window: int) -> dict[str, PolicyConfig]:
    grid = {p: PolicyConfig(p, window=window, kernel=5) for p in SCORING_POLICIES}
    grid["laprox_layer"] = PolicyConfig("laprox", window=window, kernel=5, allocation="layer")
    grid["laprox_raw"] = PolicyConfig("laprox", window=window, kernel=5, allocation="global_raw")
    grid.update({name: PolicyConfig(c.policy, window=window, kernel=5, allocation=c.allocation)
                 for name, c in ABLATION_VARIANTS.items()})
    return grid


@_timed
def check_budgets(n_configs: int = 50, seed: int = 4) -> CheckResult:
    rng = make_rng(seed)
    violations = []
    for c in range(n_configs):
        layers = int(rng.integers(1, 4))
        heads = int(rng.choice([1, 2, 4]))
        kv = int(rng.choice([k for k in (1, 2, 4) if heads % k == 0]))
        seq = int(rng.integers(40, 97))
        window = int(rng.integers(4, 17))
        budget = int(rng.integers(window + 1, seq + 1))
        stack = build_stack(layers, heads, kv, 8, rng, head_spread=0.5)
        acts = prefill_stack(stack, rng.standard_normal((seq, stack.model_dim)))
        for name, cfg in _policy_grid(window).items():
            plan = build_plan(cfg, stack, acts, budget)
            want = budget_contract(budget, seq, heads, layers)
            if plan.total() != want:
                violations.append(f"config {c} {name}: {plan.total()} != {want}")
            try:
                plan.validate()
            except ValueError as e:
                violations.append(f"config {c} {name}: {e}")
            if cfg.policy != "sllm":
                recent = np.arange(seq - window, seq)
                if not all(np.isin(recent, ix).all() for layer in plan.indices for ix in layer):
                    violations.append(f"config {c} {name}: window token evicted")
    return CheckResult("budget exactness and window safety", not violations,
                       f"{len(violations)} violations over {n_configs} configs" +
                       (f"; first: {violations[0]}" if violations else ""))


@_timed
def check_crs(n_trials: int = 500, seed: int = 6) -> CheckResult:
    rng = make_rng(seed)
    trials = [crs_trial(i, rng) for i in range(n_trials)]
    med = np.mean([t.beats_median for t in trials])
    rnd = np.mean([t.beats_random for t in trials])
    return CheckResult("column-row norm ranking", med >= 0.99 and rnd >= 0.95,
                       f"<= median subset in {med:.1%} (need 99%), <= random subset in {rnd:.1%} (need 95%)")


NEEDLE_SETUP = dict(n_tokens=128, window=16, needle_pos=40, budget=32)
NEEDLE_SEED = 2024


@_timed
def check_needle(seed: int = NEEDLE_SEED) -> CheckResult:
    inst = plant_needle(NEEDLE_SETUP["n_tokens"], NEEDLE_SETUP["window"], NEEDLE_SETUP["needle_pos"],
                        make_rng(seed), budget=NEEDLE_SETUP["budget"])
    plans = needle_plans(inst)
    pos = inst.needle_pos
    kept_l = bool(np.isin(pos, plans["laprox"].indices[0][0]))
    kept_s = bool(np.isin(pos, plans["snapkv"].indices[0][0]))
    err_l, err_s = inst.output_error(plans["laprox"]), inst.output_error(plans["snapkv"])
    ok = kept_l and not kept_s and err_l < err_s
    return CheckResult("planted needle", ok,
                       f"laprox keeps={kept_l} err={err_l:.4f}; snapkv keeps={kept_s} err={err_s:.4f}")


def unit_value_activations(rng: np.random.Generator, n_tokens: int = 48, head_dim: int = 4):
    """One-head activations whose projected values H = V W_O all have norm exactly 1."""
    logits = rng.normal(0.0, 1.0, (n_tokens, n_tokens))
    logits[np.triu_indices(n_tokens, 1)] = -np.inf
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    attn = w / w.sum(axis=1, keepdims=True)
    values = np.eye(head_dim)[rng.integers(0, head_dim, n_tokens)]
    zeros = np.zeros((1, head_dim, head_dim))
    stack = AttentionStack(1, 1, 1, head_dim, zeros, zeros, zeros, np.eye(head_dim)[None])
    av = attn @ values
    acts = LayerActivations(0, np.zeros((n_tokens, head_dim)), np.zeros((1, n_tokens, head_dim)),
                            np.zeros((1, n_tokens, head_dim)), values[None], attn[None], av, av, av)
    return stack, acts


@_timed
def check_baselines(seed: int = 9) -> CheckResult:
    rng = make_rng(seed)
    failures = []

    sllm = plan_sllm(100, PolicyConfig("sllm"), 10)
    if not np.array_equal(sllm.indices[0][0], np.r_[0:4, 94:100]):
        failures.append("sllm sinks + recent")

    stack = build_stack(2, 4, 2, 8, rng)
    acts = prefill_stack(stack, rng.standard_normal((96, stack.model_dim)))
    snap_cfg = PolicyConfig("snapkv", window=16)
    for a in acts:
        snap = score_snapkv(a, stack, snap_cfg)
        cake = score_cake(a, stack, PolicyConfig("cake", window=16, gamma=0.0))
        if not np.array_equal(snap.scores, cake.scores):
            failures.append(f"cake gamma=0 layer {a.layer}")

    ustack, uacts = unit_value_activations(rng)
    cfg = PolicyConfig("criticalkv", window=8, epsilon=0.0)
    crit = score_criticalkv(uacts, ustack, 0, cfg)
    snap = score_snapkv(uacts, ustack, PolicyConfig("snapkv", window=8))
    if not np.array_equal(crit.scores, snap.scores):
        failures.append("criticalkv eps=0 unit H")

    for budget in (16, 24, 40):
        scores = score_model(snap_cfg, acts, stack)
        ada = select_adakv(scores, budget, 1.0)
        per = select_per_head(scores, budget)
        if any(not np.array_equal(x, y) for la, lb in zip(ada.indices, per.indices) for x, y in zip(la, lb)):
            failures.append(f"adakv safeguard=1 budget {budget}")
    return CheckResult("baseline reductions", not failures,
                       "all exact" if not failures else "failed: " + ", ".join(failures))


def fidelity_trials(n_seeds: int, variants: dict[str, PolicyConfig], budget_fraction: float = 0.25,
                    first_seed: int = 0) -> list[dict[str, float]]:
    shape = FIDELITY_SHAPE
    budget = int(shape["seq_len"] * budget_fraction)
    out = []
    for seed in range(first_seed, first_seed + n_seeds):
        reports = paired_fidelity(shape["n_layers"], shape["n_heads"], shape["n_kv_heads"], shape["head_dim"],
                                  shape["seq_len"], seed, variants, [budget], head_spread=FIDELITY_HEAD_SPREAD)
        out.append({r.policy: r.mean_cosine for r in reports})
    return out


@_timed
def check_fidelity_direction(n_seeds: int = 200) -> CheckResult:
    rows = fidelity_trials(n_seeds, {"laprox": PolicyConfig("laprox"), "snapkv": PolicyConfig("snapkv")})
    wins = np.mean([r["laprox"] >= r["snapkv"] for r in rows])
    mean_l = np.mean([r["laprox"] for r in rows])
    mean_s = np.mean([r["snapkv"] for r in rows])
    return CheckResult("fidelity direction", wins >= 0.9 and mean_l > mean_s,
                       f"laprox >= snapkv in {wins:.1%} of {n_seeds} trials (need 90%); "
                       f"mean cosine {mean_l:.4f} vs {mean_s:.4f}")


@_timed
def check_ablation_ordering(n_seeds: int = 100) -> CheckResult:
    rows = fidelity_trials(n_seeds, dict(ABLATION_VARIANTS))
    m = {k: float(np.mean([r[k] for r in rows])) for k in ABLATION_VARIANTS}
    gain_l, gain_a = m["L_G"] - m["L_L"], m["A_G"] - m["A_L"]
    return CheckResult("ablation ordering", m["L_G"] > m["L_L"] and gain_l > gain_a,
                       " ".join(f"{k}={v:.4f}" for k, v in m.items()) +
                       f"; L_G-L_L={gain_l:.4f} vs A_G-A_L={gain_a:.4f}")


SELFTEST_CHECKS = (check_decomposition, check_contribution, check_normalization, check_budgets,
                   check_crs, check_needle, check_baselines)


def run_selftest(echo=print) -> bool:
    ok = True
    for check in SELFTEST_CHECKS:
        res = check()
        echo(res.line())
        ok &= res.passed
    return ok
