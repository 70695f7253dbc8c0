"""Command-line front end.

    laprox <fidelity|crs|needle|retention|ablation> --config CFG.yaml [--out DIR]
           [--seed N] [--jobs N] [--policy NAME ...]
    laprox selftest

Exit codes: 0 success, 1 invariant violation, 2 config or parameter error.
Outputs are written only once every row is computed, then listed in manifest.json.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attention import build_stack, prefill_stack
from .checks import run_selftest
from .config import ConfigError, ExperimentConfig, check_budgets, load_config
from .evaluate import crs_trial, needle_plans, paired_fidelity, plant_needle, retention_report
from .linalg import ParameterError, make_rng
from .policies import budget_contract, build_plan

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2


class InvariantViolation(RuntimeError):
    pass


def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _check_plan(plan, n_tokens, budget, label):
    want = budget_contract(budget, n_tokens, plan.n_heads, plan.n_layers)
    if plan.total() != want:
        raise InvariantViolation(f"{label}: retained {plan.total()} entries, contract is {want}")
    try:
        plan.validate()
    except ValueError as e:
        raise InvariantViolation(f"{label}: {e}") from e


# --- fidelity / ablation --------------------------------------------------------------

def _fidelity_seed(args):
    cfg, seed = args
    m = cfg.model
    reports = paired_fidelity(m.layers, m.heads, m.kv_heads, m.head_dim, cfg.seq_len, seed,
                              cfg.policies, cfg.budgets, head_spread=m.head_spread, residual=cfg.residual)
    rows = []
    for r in reports:
        _check_plan(r.plan, cfg.seq_len, r.budget, f"seed {seed} {r.policy}")
        if not np.all(np.abs(r.cosine) <= 1.0):
            raise InvariantViolation(f"seed {seed} {r.policy}: cosine outside [-1, 1]")
        if r.budget >= cfg.seq_len and not np.all(np.abs(r.cosine - 1.0) <= 1e-9):
            raise InvariantViolation(f"seed {seed} {r.policy}: full budget but cosine {r.cosine.min()} != 1")
        for layer, (c, e) in enumerate(zip(r.cosine, r.frob_err)):
            rows.append((seed, layer, r.policy, r.budget, float(c), float(e)))
    return rows


def run_fidelity(cfg: ExperimentConfig, jobs: int):
    rows = [row for part in _map(_fidelity_seed, [(cfg, s) for s in cfg.seeds], jobs) for row in part]
    summary = {}
    for name in cfg.policies:
        for b in cfg.budgets:
            cos = [r[4] for r in rows if r[2] == name and r[3] == b]
            summary[f"{name}@{b}"] = {"mean_cosine": float(np.mean(cos))}
    files = {"fidelity.csv": csv_text(["seed", "layer", "policy", "budget", "cosine", "frob_err"], rows)}
    return files, summary


def run_ablation(cfg: ExperimentConfig, jobs: int):
    rows = [row for part in _map(_fidelity_seed, [(cfg, s) for s in cfg.seeds], jobs) for row in part]
    table, summary = [], {}
    for b in cfg.budgets:
        means = {}
        for name in cfg.policies:
            per_seed = [np.mean([r[4] for r in rows if r[2] == name and r[3] == b and r[0] == s]) for s in cfg.seeds]
            err = np.mean([r[5] for r in rows if r[2] == name and r[3] == b])
            means[name] = float(np.mean(per_seed))
            table.append((name, b, len(cfg.seeds), means[name], float(err)))
        summary[str(b)] = {
            "mean_cosine": means,
            "global_gain_laprox": means["L_G"] - means["L_L"],
            "global_gain_attention": means["A_G"] - means["A_L"],
            "L_G_beats_L_L": means["L_G"] > means["L_L"],
            "laprox_gain_exceeds_attention_gain": (means["L_G"] - means["L_L"]) > (means["A_G"] - means["A_L"]),
        }
    files = {
        "ablation.csv": csv_text(["seed", "layer", "variant", "budget", "cosine", "frob_err"], rows),
        "ablation_summary.csv": csv_text(["variant", "budget", "n_seeds", "mean_cosine", "mean_frob_err"], table),
    }
    return files, summary


# --- crs / needle / retention -------------------------------------------------------

def run_crs(cfg: ExperimentConfig, jobs: int):
    c = cfg.crs
    rows, trials = [], []
    t = 0
    for seed in cfg.seeds:
        rng = make_rng(seed)
        for _ in range(c.trials):
            tr = crs_trial(t, rng, (c.n_min, c.n_max), (c.k_min, c.k_max), c.outer_dim)
            trials.append(tr)
            rows += [(t, tr.k, "norm_topk", tr.norm_error), (t, tr.k, "exhaustive_median", tr.median_error),
                     (t, tr.k, "uniform_random", tr.random_error)]
            t += 1
    summary = {
        "trials": len(trials),
        "frac_le_median": float(np.mean([x.beats_median for x in trials])),
        "frac_le_random": float(np.mean([x.beats_random for x in trials])),
    }
    return {"crs.csv": csv_text(["trial", "k", "method", "error"], rows)}, summary


def run_needle(cfg: ExperimentConfig, jobs: int):
    n = cfg.needle
    rows, summary = [], {}
    for seed in cfg.seeds:
        inst = plant_needle(n.tokens, n.window, n.position, make_rng(seed), budget=n.budget, kernel=n.kernel)
        plans = needle_plans(inst, kernel=n.kernel)
        kept = {p: bool(np.isin(n.position, plan.indices[0][0])) for p, plan in plans.items()}
        errs = {p: inst.output_error(plan) for p, plan in plans.items()}
        if not (kept["laprox"] and not kept["snapkv"] and errs["laprox"] < errs["snapkv"]):
            raise InvariantViolation(f"seed {seed}: planted needle does not separate the policies")
        for p in plans:
            rows.append((seed, p, n.position, int(kept[p]), errs[p], inst.needle_scale, inst.needle_attention))
        summary[str(seed)] = {"needle_scale": inst.needle_scale, "errors": errs}
    header = ["seed", "policy", "needle_pos", "retained", "output_error", "needle_scale", "needle_attention"]
    return {"needle.csv": csv_text(header, rows)}, summary


def _retention_plans(args):
    cfg, name, budget = args
    m = cfg.model
    model_seed = cfg.seeds[0]
    stack = build_stack(m.layers, m.heads, m.kv_heads, m.head_dim, make_rng(model_seed, 0), head_spread=m.head_spread)
    policy = cfg.policies[name]
    plans = []
    for seed in cfg.seeds:
        x = make_rng(seed, 1).standard_normal((cfg.seq_len, stack.model_dim))
        plan = build_plan(policy, stack, prefill_stack(stack, x), budget)
        _check_plan(plan, cfg.seq_len, budget, f"input {seed} {name}")
        plans.append(plan)
    return plans


def run_retention(cfg: ExperimentConfig, jobs: int):
    keys = [(name, b) for name in cfg.policies for b in cfg.budgets]
    results = _map(_retention_plans, [(cfg, name, b) for name, b in keys], jobs)
    rows, stats, summary = [], [], {}
    for (name, b), plans in zip(keys, results):
        rep = retention_report(plans)
        for i, l, h, count in rep.rows():
            rows.append((cfg.seeds[i], l, h, count, name, b))
        for l in range(rep.head_mean.shape[0]):
            for h in range(rep.head_mean.shape[1]):
                stats.append((name, b, l, h, float(rep.head_mean[l, h]), int(rep.head_range[l, h]),
                              float(rep.cross_input_std[l, h])))
        summary[f"{name}@{b}"] = {
            "max_cross_input_range": rep.max_range,
            "mean_cross_head_variance": float(rep.cross_head_var.mean()),
        }
    files = {
        "retention.csv": csv_text(["input", "layer", "head", "count", "policy", "budget"], rows),
        "retention_summary.csv": csv_text(["policy", "budget", "layer", "head", "mean", "range", "std"], stats),
    }
    return files, summary


RUNNERS = {
    "fidelity": run_fidelity,
    "crs": run_crs,
    "needle": run_needle,
    "retention": run_retention,
    "ablation": run_ablation,
}


def write_outputs(out_dir: Path, cfg: ExperimentConfig, files: dict[str, str], summary: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    listing = []
    for name in sorted(files):
        data = files[name].encode()
        (out_dir / name).write_bytes(data)
        listing.append({"file": name, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
    manifest = {"experiment": cfg.experiment, "config": cfg.resolved(), "files": listing, "summary": summary}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def run(experiment: str, config_path, out: str | None = None, seed: int | None = None, jobs: int = 1,
        policies: list[str] | None = None, echo=print) -> int:
    try:
        cfg = load_config(config_path, experiment)
        if seed is not None:
            cfg.seeds = [seed]
        if out is not None:
            cfg.output_dir = out
        if policies:
            missing = sorted(set(policies) - set(cfg.policies))
            if missing:
                raise ConfigError(f"--policy names unknown policies: {', '.join(missing)}")
            cfg = replace(cfg, policies={k: v for k, v in cfg.policies.items() if k in policies})
        check_budgets(cfg)
    except (ConfigError, ParameterError) as e:
        echo(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        files, summary = RUNNERS[experiment](cfg, jobs)
    except InvariantViolation as e:
        echo(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except ParameterError as e:
        echo(f"parameter error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = write_outputs(Path(cfg.output_dir), cfg, files, summary)
    echo(json.dumps(summary, indent=2, sort_keys=True))
    echo(f"wrote {len(files)} file(s) and {manifest}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="laprox", description="KV-cache eviction experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="run this single seed instead of the configured ones")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for seed fan-out")
        p.add_argument("--policy", action="append", help="only run this policy name (repeatable)")
    sub.add_parser("selftest", help="run the built-in invariant checks")
    args = parser.parse_args(argv)

    if args.command == "selftest":
        return EXIT_OK if run_selftest() else EXIT_INVARIANT
    return run(args.command, args.config, args.out, args.seed, args.jobs, args.policy)


if __name__ == "__main__":
    sys.exit(main())
