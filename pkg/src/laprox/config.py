"""YAML experiment configs (schema version 1). Unknown keys are rejected."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .linalg import ParameterError
from .policies import ABLATION_VARIANTS, check_budget
from .scoring import PolicyConfig

SCHEMA_VERSION = 1
EXPERIMENTS = ("fidelity", "crs", "needle", "retention", "ablation")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelShape:
    layers: int = 4
    heads: int = 4
    kv_heads: int = 4
    head_dim: int = 16
    head_spread: float = 1.0


@dataclass(frozen=True)
class CrsSettings:
    trials: int = 500
    n_min: int = 6
    n_max: int = 10
    k_min: int = 1
    k_max: int = 3
    outer_dim: int = 32


@dataclass(frozen=True)
class NeedleSettings:
    tokens: int = 128
    window: int = 16
    position: int = 40
    budget: int = 32
    kernel: int = 7


@dataclass
class ExperimentConfig:
    experiment: str
    model: ModelShape = field(default_factory=ModelShape)
    seq_len: int = 256
    seeds: list[int] = field(default_factory=lambda: [0])
    policies: dict[str, PolicyConfig] = field(default_factory=dict)
    budgets: list[int] = field(default_factory=list)
    output_dir: str = "out"
    residual: bool = False
    crs: CrsSettings = field(default_factory=CrsSettings)
    needle: NeedleSettings = field(default_factory=NeedleSettings)

    def resolved(self) -> dict:
        """Plain-data view written to the manifest."""
        return {
            "schema_version": SCHEMA_VERSION,
            "experiment": self.experiment,
            "model": _asdict(self.model),
            "seq_len": self.seq_len,
            "seeds": list(self.seeds),
            "policies": {name: _asdict(p) for name, p in self.policies.items()},
            "budgets": list(self.budgets),
            "output_dir": self.output_dir,
            "residual": self.residual,
            "crs": _asdict(self.crs),
            "needle": _asdict(self.needle),
        }


def _asdict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    for key, value in data.items():
        want = known[key].type
        if want in ("int", int) and (not isinstance(value, int) or isinstance(value, bool)):
            raise ConfigError(f"{where}.{key}: expected an integer, got {value!r}")
        if want in ("float", float) and (not isinstance(value, (int, float)) or isinstance(value, bool)):
            raise ConfigError(f"{where}.{key}: expected a number, got {value!r}")
    try:
        return cls(**data)
    except (ParameterError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _int_list(value, where: str) -> list[int]:
    if isinstance(value, dict):
        extra = set(value) - {"start", "count"}
        if extra or "count" not in value:
            raise ConfigError(f"{where}: expected a list or a mapping with 'start' and 'count'")
        return list(range(int(value.get("start", 0)), int(value.get("start", 0)) + int(value["count"])))
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{where}: expected a list of integers")
    return value


def _policies(value, where: str) -> dict[str, PolicyConfig]:
    if not isinstance(value, list):
        raise ConfigError(f"{where}: expected a list of policy mappings")
    out = {}
    for i, item in enumerate(value):
        if not isinstance(item, dict):
            raise ConfigError(f"{where}[{i}]: expected a mapping")
        item = dict(item)
        name = item.pop("name", None)
        cfg = _build(PolicyConfig, item, f"{where}[{i}]")
        name = name or (cfg.policy if cfg.allocation is None else f"{cfg.policy}_{cfg.allocation}")
        if name in out:
            raise ConfigError(f"{where}[{i}]: duplicate policy name {name!r}")
        out[name] = cfg
    return out


TOP_LEVEL = {"schema_version", "experiment", "model", "seq_len", "seeds", "policies", "variants",
             "budgets", "output_dir", "residual", "crs", "needle"}


def parse_config(data, experiment: str | None = None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    unknown = sorted(set(data) - TOP_LEVEL)
    if unknown:
        raise ConfigError(f"config: unknown field(s) {', '.join(unknown)}")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"config.schema_version: expected {SCHEMA_VERSION}, got {data.get('schema_version')!r}")
    exp = data.get("experiment", experiment)
    if exp not in EXPERIMENTS:
        raise ConfigError(f"config.experiment: expected one of {EXPERIMENTS}, got {exp!r}")
    if experiment is not None and exp != experiment:
        raise ConfigError(f"config.experiment is {exp!r} but the {experiment!r} subcommand was run")

    cfg = ExperimentConfig(exp)
    if "model" in data:
        cfg.model = _build(ModelShape, data["model"], "config.model")
    if "seq_len" in data:
        if not isinstance(data["seq_len"], int) or data["seq_len"] < 1:
            raise ConfigError("config.seq_len: expected a positive integer")
        cfg.seq_len = data["seq_len"]
    if "seeds" in data:
        cfg.seeds = _int_list(data["seeds"], "config.seeds")
    if any(s < 0 for s in cfg.seeds):
        raise ConfigError("config.seeds: seeds must be non-negative")
    if "budgets" in data:
        cfg.budgets = _int_list(data["budgets"], "config.budgets")
    if "output_dir" in data:
        cfg.output_dir = str(data["output_dir"])
    if "residual" in data:
        cfg.residual = bool(data["residual"])
    if "crs" in data:
        cfg.crs = _build(CrsSettings, data["crs"], "config.crs")
    if "needle" in data:
        cfg.needle = _build(NeedleSettings, data["needle"], "config.needle")

    if exp == "ablation":
        if "policies" in data:
            raise ConfigError("config.policies: the ablation experiment takes 'variants', not 'policies'")
        variants = data.get("variants", list(ABLATION_VARIANTS))
        if not isinstance(variants, list) or sorted(variants) != sorted(ABLATION_VARIANTS):
            raise ConfigError(f"config.variants: must name exactly {', '.join(ABLATION_VARIANTS)}")
        cfg.policies = {v: ABLATION_VARIANTS[v] for v in ABLATION_VARIANTS}
    else:
        if "variants" in data:
            raise ConfigError("config.variants: only the ablation experiment takes variants")
        if "policies" in data:
            cfg.policies = _policies(data["policies"], "config.policies")
        elif exp in ("fidelity", "retention"):
            cfg.policies = {"laprox": PolicyConfig("laprox")}

    m = cfg.model
    if m.heads % m.kv_heads:
        raise ConfigError(f"config.model: kv_heads ({m.kv_heads}) must divide heads ({m.heads})")
    if exp in ("fidelity", "retention", "ablation"):
        if not cfg.budgets:
            raise ConfigError("config.budgets: at least one per-head budget is required")
        if not cfg.policies:
            raise ConfigError("config.policies: at least one policy is required")
    return cfg


def check_budgets(cfg: ExperimentConfig) -> None:
    """Raise ParameterError naming the first infeasible (policy, budget) pair."""
    for name, policy in cfg.policies.items():
        for b in cfg.budgets:
            try:
                check_budget(policy, b)
            except ParameterError as e:
                raise ParameterError(f"policy {name!r}, budget {b}: {e}") from e
    if cfg.experiment == "retention" and len(cfg.seeds) < 2:
        raise ParameterError("retention needs at least two seeds (inputs)")


def load_config(path, experiment: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{path}: YAML parse error at {where}: {e.problem}") from e
    return parse_config(data, experiment)
