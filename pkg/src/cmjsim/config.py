"""Experiment configuration: parsing, validation, canonical serialization.

Configs are plain key-value trees (YAML).  ``load_config`` validates
every declared parameter against the module preconditions up front and
raises `ConfigError` naming the offending field; ``dump_config``
produces a canonical normalized document, so load -> dump -> load is
the identity and the dump's hash identifies the experiment.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import yaml

from .errors import ConfigError
from .interacting import (
    DEFAULT_EVENT_CAP,
    InteractionRule,
    constant_rule,
    immunity_rule,
    lockdown_rule,
)
from .point_process import (
    BirthProcessSpec,
    FiniteAtoms,
    InitialAgeDensity,
    PoissonIntensity,
    RateDensity,
    Renewal,
    constant_intensity,
    expdecay_intensity,
    exponential_ages,
    exponential_interarrival,
    fixed_interarrival,
    table_ages,
    table_intensity,
    uniform_ages,
    uniform_interarrival,
)

KINDS = ("solve", "simulate", "nonlinear", "couple", "immigration", "chains", "convergence")

_PDE_KINDS = ("solve", "nonlinear", "couple", "chains", "convergence")


def _get(tree: dict, field: str, default=None, required: bool = False):
    node = tree
    for part in field.split("."):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ConfigError("missing required field", field)
            return default
        node = node[part]
    return node


def _build_tau(block: dict) -> RateDensity:
    family = block.get("family")
    if family == "constant":
        return constant_intensity(float(block.get("rate", 1.0)))
    if family == "expdecay":
        return expdecay_intensity(float(block.get("scale", 1.0)), float(block.get("decay", 1.0)))
    if family == "table":
        return table_intensity(block["ages"], block["values"])
    raise ConfigError(f"unknown intensity family {family!r}", "model.tau.family")


def _build_ages(block: dict) -> InitialAgeDensity:
    family = block.get("family")
    if family == "exponential":
        return exponential_ages(float(block.get("rate", 1.0)))
    if family == "uniform":
        return uniform_ages(float(block.get("lo", 0.0)), float(block.get("hi", 1.0)))
    if family == "table":
        return table_ages(block["ages"], block["values"])
    raise ConfigError(f"unknown age-density family {family!r}", "model.g.family")


def _build_rule(block: dict) -> InteractionRule:
    name = block.get("rule")
    if name == "constant":
        rule = constant_rule(float(block.get("c", 1.0)))
    elif name == "immunity":
        rule = immunity_rule(float(block.get("capacity", 10.0)))
    elif name == "lockdown":
        rule = lockdown_rule(
            float(block.get("capacity", 10.0)),
            float(block.get("reduction", 0.5)),
            float(block.get("threshold", 0.5)),
        )
    else:
        raise ConfigError(f"unknown interaction rule {name!r}", "model.interaction.rule")
    if "lipschitz" in block:
        rule = InteractionRule(
            name=rule.name,
            lipschitz=float(block["lipschitz"]),
            evaluate_mass=rule.evaluate_mass,
            evaluate=rule.evaluate,
            params=rule.params,
        )
    return rule


def _build_birth(block: Optional[dict], tau: RateDensity) -> BirthProcessSpec:
    kind = (block or {}).get("kind", "poisson")
    if kind == "poisson":
        return PoissonIntensity(intensity=tau)
    if kind == "renewal":
        ia = block.get("interarrival", {})
        fam = ia.get("family")
        if fam == "exponential":
            inter = exponential_interarrival(float(ia.get("rate", 1.0)))
        elif fam == "uniform":
            inter = uniform_interarrival(float(ia.get("lo", 0.0)), float(ia.get("hi", 1.0)))
        elif fam == "fixed":
            inter = fixed_interarrival(float(ia.get("gap", 1.0)))
        else:
            raise ConfigError(
                f"unknown inter-arrival family {fam!r}", "model.birth_process.interarrival"
            )
        mb = block.get("max_births")
        return Renewal(interarrival=inter, max_births=None if mb is None else int(mb))
    if kind == "finite_atoms":
        return FiniteAtoms(ages=tuple(float(a) for a in block.get("ages", ())))
    raise ConfigError(f"unknown birth process kind {kind!r}", "model.birth_process.kind")


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    kind: str
    tau: RateDensity
    ages: InitialAgeDensity
    rule: InteractionRule
    birth: BirthProcessSpec
    horizon: float
    dt: float
    eps_grid: float
    bin_width: float
    probe_dt: float
    max_events: int
    n_ancestors: tuple
    replicates: int
    master_seed: int
    eta: float
    t_eval: tuple
    epsilon: float
    chain_window: tuple


def load_config(source: Union[str, Path, dict]) -> ExperimentConfig:
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            tree = yaml.safe_load(fh)
    else:
        tree = source
    if not isinstance(tree, dict):
        raise ConfigError("configuration must be a mapping", "<root>")

    kind = _get(tree, "experiment", required=True)
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}", "experiment")

    tau = _build_tau(_get(tree, "model.tau", {"family": "constant", "rate": 1.0}))
    ages = _build_ages(_get(tree, "model.g", {"family": "exponential", "rate": 1.0}))
    rule = _build_rule(_get(tree, "model.interaction", {"rule": "constant", "c": 1.0}))
    birth = _build_birth(_get(tree, "model.birth_process"), tau)

    horizon = float(_get(tree, "numerics.horizon", required=True))
    if not (horizon > 0 and math.isfinite(horizon)):
        raise ConfigError("must be finite and > 0", "numerics.horizon")
    dt = float(_get(tree, "numerics.dt", 1e-3))
    eps_grid = float(_get(tree, "numerics.eps_grid", 1e-3))
    if eps_grid <= 0:
        raise ConfigError("must be > 0", "numerics.eps_grid")
    bin_width = float(_get(tree, "numerics.bin_width", 0.05 * min(1.0, 1.0 / tau.sup_bound) if tau.sup_bound > 0 else 0.05))
    if bin_width <= 0:
        raise ConfigError("must be > 0", "numerics.bin_width")
    probe_dt = float(_get(tree, "numerics.probe_dt", 0.1))
    if probe_dt <= 0:
        raise ConfigError("must be > 0", "numerics.probe_dt")
    max_events = int(_get(tree, "numerics.max_events", DEFAULT_EVENT_CAP))
    if max_events <= 0:
        raise ConfigError("must be > 0", "numerics.max_events")

    if kind in _PDE_KINDS:
        if birth.kind != "poisson":
            raise ConfigError(
                f"experiment kind {kind!r} needs a poisson birth process",
                "model.birth_process.kind",
            )
        sup = tau.sup_bound
        dt_max = 1e-2 * min(1.0, 1.0 / sup) if sup > 0 else 1e-2
        if dt <= 0 or dt > dt_max * (1 + 1e-12):
            raise ConfigError(f"must lie in (0, {dt_max:.3e}]", "numerics.dt")

    n_raw = _get(tree, "run.n_ancestors", [1])
    if isinstance(n_raw, (int, float)):
        n_raw = [n_raw]
    n_ancestors = tuple(int(n) for n in n_raw)
    if not n_ancestors or any(n < 1 for n in n_ancestors):
        raise ConfigError("needs positive ancestor counts", "run.n_ancestors")
    replicates = int(_get(tree, "run.replicates", 1))
    if replicates < 1:
        raise ConfigError("must be >= 1", "run.replicates")
    master_seed = int(_get(tree, "run.master_seed", 0))
    eta = float(_get(tree, "run.eta", 0.2))
    t_eval = tuple(float(t) for t in _get(tree, "run.t_eval", [horizon]))
    if any(t < 0 or t > horizon + 1e-12 for t in t_eval):
        raise ConfigError("evaluation times must lie in [0, horizon]", "run.t_eval")
    epsilon = float(_get(tree, "run.epsilon", 0.5))
    window = _get(tree, "run.chain_window", [max(0.0, horizon - 0.2), horizon])
    chain_window = (float(window[0]), float(window[1]))
    if not (0 <= chain_window[0] < chain_window[1] <= horizon + 1e-12):
        raise ConfigError("window must satisfy 0 <= lo < hi <= horizon", "run.chain_window")

    if kind == "couple" and not (0.0 < eta <= 1.0):
        raise ConfigError("must lie in (0, 1]", "run.eta")
    if kind == "immigration" and not (0.0 <= eta <= 1.0):
        raise ConfigError("must lie in [0, 1]", "run.eta")
    if kind == "convergence":
        if len(n_ancestors) < 3:
            raise ConfigError("convergence needs at least 3 population sizes", "run.n_ancestors")
        if replicates < 30:
            raise ConfigError("convergence needs at least 30 replicates", "run.replicates")

    cfg = ExperimentConfig(
        raw=_normalize(tree),
        kind=kind,
        tau=tau,
        ages=ages,
        rule=rule,
        birth=birth,
        horizon=horizon,
        dt=dt,
        eps_grid=eps_grid,
        bin_width=bin_width,
        probe_dt=probe_dt,
        max_events=max_events,
        n_ancestors=n_ancestors,
        replicates=replicates,
        master_seed=master_seed,
        eta=eta,
        t_eval=t_eval,
        epsilon=epsilon,
        chain_window=chain_window,
    )
    return cfg


def _normalize(tree: dict) -> dict:
    """Deep-copied tree with numeric leaves coerced to plain int/float."""

    def walk(node):
        if isinstance(node, dict):
            return {str(k): walk(v) for k, v in sorted(node.items())}
        if isinstance(node, (list, tuple)):
            return [walk(v) for v in node]
        if isinstance(node, bool) or node is None or isinstance(node, str):
            return node
        if isinstance(node, int):
            return int(node)
        if isinstance(node, float):
            return float(node)
        return node

    return walk(tree)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.raw, sort_keys=True, default_flow_style=False)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()
