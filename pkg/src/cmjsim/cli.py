"""Config-driven experiment runner.

Each experiment kind consumes one config file and writes CSV/JSON
artifacts plus a manifest recording the config hash, the seed and the
library versions.  Outputs are deterministic: the same config and seed
produce byte-identical files.  Replicates can fan out over a process
pool; results are reduced in submission order so the pool size never
changes the artifacts.

Exit codes: 0 success, 2 configuration/validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import functools
import json
import math
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import __version__
from ._rng import replicate_seed
from .ancestry import empirical_chain_measure, kernel_grid, kernel_normalization
from .config import ExperimentConfig, KINDS, config_hash, dump_config, load_config
from .coupling import check_domination, simulate_coupled
from .errors import CmjError, ConfigError
from .forest import write_forest
from .immigration import simulate_immigration, wilson_interval
from .interacting import age_measure_at, simulate_interacting
from .measures import prohorov_upper
from .nonlinear import estimate_mean_age_densities, expected_bin_masses
from .pde import PdeSolution, age_snapshot, save_npz, solve_nonlinear, to_csv as pde_to_csv


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


_CONFIG_REGISTRY: dict = {}


def _register(cfg: ExperimentConfig) -> tuple:
    """(hash, raw-json) handle that reconstructs the config inside pool workers."""
    key = config_hash(cfg)
    raw_json = json.dumps(cfg.raw, sort_keys=True)
    _CONFIG_REGISTRY[key] = raw_json
    return key, raw_json


def _config_from(handle: tuple) -> ExperimentConfig:
    key, raw_json = handle
    _CONFIG_REGISTRY.setdefault(key, raw_json)
    return load_config(json.loads(raw_json))


@functools.lru_cache(maxsize=4)
def _solution_cached(key: str, horizon: float, dt: float) -> PdeSolution:
    cfg = load_config(json.loads(_CONFIG_REGISTRY[key]))
    return solve_nonlinear(cfg.tau, cfg.ages, cfg.rule, horizon, dt)


def _solution_for(handle: tuple, horizon: float, dt: float) -> PdeSolution:
    key, raw_json = handle
    _CONFIG_REGISTRY.setdefault(key, raw_json)
    return _solution_cached(key, horizon, dt)


def _probe_times(cfg: ExperimentConfig) -> np.ndarray:
    n = int(round(cfg.horizon / cfg.probe_dt))
    return np.minimum(cfg.probe_dt * np.arange(n + 1), cfg.horizon)


# ---------------------------------------------------------------------------
# per-replicate workers (top level so they are picklable for the pool)
# ---------------------------------------------------------------------------


def _simulate_task(handle: tuple, n: int, seed: int, probe: tuple) -> tuple:
    cfg = _config_from(handle)
    forest, path = simulate_interacting(
        n, cfg.birth, cfg.ages, cfg.rule, cfg.horizon, seed, max_events=cfg.max_events
    )
    rows = []
    for t in probe:
        m = age_measure_at(path, t)
        ages = np.sort(m.ages())
        qs = (
            tuple(float(np.quantile(ages, q)) for q in (0.25, 0.5, 0.75))
            if ages.size
            else (math.nan,) * 3
        )
        rows.append((float(t), m.mass) + qs)
    return forest, rows


def _convergence_task(handle: tuple, n: int, seed: int, probe: tuple) -> float:
    cfg = _config_from(handle)
    snapshots = _snapshots_for(handle, probe)
    _, path = simulate_interacting(
        n,
        cfg.birth,
        cfg.ages,
        cfg.rule,
        cfg.horizon,
        seed,
        max_events=cfg.max_events,
        record_forest=False,
    )
    worst = 0.0
    for t, snap in zip(probe, snapshots):
        d = prohorov_upper(age_measure_at(path, t), snap, cfg.eps_grid)
        worst = max(worst, d)
    return worst


@functools.lru_cache(maxsize=4)
def _snapshots_cached(key: str, probe: tuple) -> tuple:
    cfg = load_config(json.loads(_CONFIG_REGISTRY[key]))
    sol = _solution_cached(key, cfg.horizon, cfg.dt)
    return tuple(age_snapshot(sol, t, cfg.eps_grid) for t in probe)


def _snapshots_for(handle: tuple, probe: tuple) -> tuple:
    key, raw_json = handle
    _CONFIG_REGISTRY.setdefault(key, raw_json)
    return _snapshots_cached(key, probe)


def _couple_task(handle: tuple, n: int, seed: int) -> tuple:
    cfg = _config_from(handle)
    sol = _solution_for(handle, cfg.horizon, cfg.dt)
    res = simulate_coupled(
        n,
        cfg.birth,
        cfg.ages,
        cfg.rule,
        sol,
        cfg.eta,
        cfg.horizon,
        seed,
        max_events=cfg.max_events,
        record_forests=False,
        record_audit=False,
    )
    report = check_domination(res, sol, cfg.eps_grid)
    return (
        seed,
        report.precondition_lhs,
        int(report.precondition_ok),
        int(report.certified),
        res.imm_count(cfg.horizon),
        res.discrepancy(cfg.horizon),
        res.n_both,
        res.n_only_interacting,
        res.n_only_nonlinear,
        res.n_star,
        res.n_dagger,
        res.tau_stop if res.tau_stop is not None else math.nan,
    )


def _immigration_task(handle: tuple, n: int, seed: int) -> tuple:
    cfg = _config_from(handle)
    res = simulate_immigration(
        n,
        cfg.eta,
        cfg.rule.lipschitz,
        cfg.birth,
        cfg.ages,
        cfg.horizon,
        seed,
        max_events=cfg.max_events,
    )
    t = cfg.horizon
    return seed, res.imm_count(t), res.z_iota(t), int(res.imm_count(t) >= cfg.epsilon * n)


# ---------------------------------------------------------------------------
# experiment runners
# ---------------------------------------------------------------------------


def _run_solve(cfg: ExperimentConfig, out: Path, pool) -> list:
    sol = solve_nonlinear(cfg.tau, cfg.ages, cfg.rule, cfg.horizon, cfg.dt)
    pde_to_csv(sol, out / "solution.csv")
    save_npz(sol, out / "solution.npz")
    return ["solution.csv", "solution.npz"]


def _run_simulate(cfg: ExperimentConfig, out: Path, pool) -> list:
    handle = _register(cfg)
    probe = tuple(float(t) for t in _probe_times(cfg))
    outputs = []
    summary = []
    counter = 0
    tasks = []
    for n in cfg.n_ancestors:
        for r in range(cfg.replicates):
            tasks.append((n, r, replicate_seed(cfg.master_seed, counter)))
            counter += 1
    results = _map(pool, _simulate_task, [(handle, n, s, probe) for (n, r, s) in tasks])
    for (n, r, seed), (forest, rows) in zip(tasks, results):
        rdir = out / f"N{n}_r{r}"
        rdir.mkdir()
        write_forest(forest, rdir / "forest.tsv")
        _write_csv(rdir / "timeseries.csv", ["t", "mass", "age_q25", "age_q50", "age_q75"], rows)
        outputs += [f"N{n}_r{r}/forest.tsv", f"N{n}_r{r}/timeseries.csv"]
        summary.append((n, r, seed, rows[-1][1]))
    _write_csv(out / "summary.csv", ["n_ancestors", "replicate", "seed", "final_mass"], summary)
    return outputs + ["summary.csv"]


def _run_nonlinear(cfg: ExperimentConfig, out: Path, pool) -> list:
    sol = solve_nonlinear(cfg.tau, cfg.ages, cfg.rule, cfg.horizon, cfg.dt)
    estimates = estimate_mean_age_densities(
        cfg.birth,
        cfg.ages,
        cfg.rule,
        sol,
        cfg.t_eval,
        cfg.replicates,
        cfg.bin_width,
        cfg.master_seed,
        max_events=cfg.max_events,
    )
    outputs = []
    summary = []
    for t, est in estimates.items():
        name = f"density_t{t:g}.csv"
        edges = est.bin_edges()
        rows = [
            (float(edges[b]), float(est.values[b]), float(est.se[b]))
            for b in range(est.values.size)
        ]
        _write_csv(out / name, ["age_bin_left", "density", "se"], rows)
        expected = expected_bin_masses(sol, t, est.step, est.values.size)
        l1 = float(np.abs(est.values * est.step - expected).sum())
        summary.append(
            {
                "t": t,
                "l1_distance": l1,
                "se_budget": float(3 * est.se.sum() * est.step + est.step),
                "mass_mean": est.mass_mean,
                "mass_se": est.mass_se,
                "mass_limit": sol.mass_at(t),
            }
        )
        outputs.append(name)
    with open(out / "consistency.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return outputs + ["consistency.json"]


def _run_couple(cfg: ExperimentConfig, out: Path, pool) -> list:
    handle = _register(cfg)
    sol = _solution_for(handle, cfg.horizon, cfg.dt)
    n = cfg.n_ancestors[0]
    seeds = [replicate_seed(cfg.master_seed, r) for r in range(cfg.replicates)]
    # audited reference run (first replicate) for debugging and the audit CSV
    first = simulate_coupled(
        n, cfg.birth, cfg.ages, cfg.rule, sol, cfg.eta, cfg.horizon, seeds[0],
        max_events=cfg.max_events, record_forests=False, record_audit=True,
    )
    _write_csv(
        out / "audit_r0.csv",
        ["t", "parent", "child", "rho", "imm_count", "discrepancy"],
        first.audit,
    )
    rows = _map(pool, _couple_task, [(handle, n, s) for s in seeds])
    _write_csv(
        out / "summary.csv",
        [
            "seed", "lipschitz_dhat", "precondition_ok", "certified",
            "imm_count", "discrepancy", "n_both", "n_only_interacting",
            "n_only_nonlinear", "n_star", "n_dagger", "tau_stop",
        ],
        rows,
    )
    return ["audit_r0.csv", "summary.csv"]


def _run_immigration(cfg: ExperimentConfig, out: Path, pool) -> list:
    handle = _register(cfg)
    n = cfg.n_ancestors[0]
    seeds = [replicate_seed(cfg.master_seed, r) for r in range(cfg.replicates)]
    first = simulate_immigration(
        n, cfg.eta, cfg.rule.lipschitz, cfg.birth, cfg.ages, cfg.horizon,
        seeds[0], max_events=cfg.max_events,
    )
    probe = _probe_times(cfg)
    _write_csv(
        out / "path_r0.csv",
        ["t", "imm_count", "left_count"],
        [(float(t), first.imm_count(t), first.z_iota(t)) for t in probe],
    )
    rows = _map(pool, _immigration_task, [(handle, n, s) for s in seeds])
    i_over_n = [r[1] / n for r in rows]
    k_hat = float(np.mean([r[2] for r in rows])) / n
    hits = sum(r[3] for r in rows)
    lo, hi = wilson_interval(hits, len(rows))
    lip = cfg.rule.lipschitz
    ez_hat = _mean_tree_size(cfg, samples=32)
    summary = {
        "n_ancestors": n,
        "eta": cfg.eta,
        "lipschitz": lip,
        "mean_imm_over_n": float(np.mean(i_over_n)),
        "se_imm_over_n": float(np.std(i_over_n, ddof=1) / math.sqrt(len(i_over_n)))
        if len(i_over_n) > 1
        else 0.0,
        "mean_left_over_n": k_hat,
        "mean_planted_tree_size": ez_hat,
        "tail_threshold": cfg.epsilon,
        "tail_probability": hits / len(rows),
        "tail_wilson": [lo, hi],
    }
    if lip > 0:
        # per-ancestor version of the explicit recursion solution
        summary["mean_bound"] = cfg.eta / lip * (math.exp(lip * ez_hat * k_hat) - 1)
    _write_csv(out / "summary.csv", ["seed", "imm_count", "left_count", "tail_hit"], rows)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return ["path_r0.csv", "summary.csv", "summary.json"]


def _run_chains(cfg: ExperimentConfig, out: Path, pool) -> list:
    sol = solve_nonlinear(cfg.tau, cfg.ages, cfg.rule, cfg.horizon, cfg.dt)
    n = cfg.n_ancestors[0]
    forest, _ = simulate_interacting(
        n, cfg.birth, cfg.ages, cfg.rule, cfg.horizon,
        replicate_seed(cfg.master_seed, 0), max_events=cfg.max_events,
    )
    chains = empirical_chain_measure(forest, cfg.horizon)
    with open(out / "chains.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["weight", "length", "times..."])
        for row in chains.csv_rows():
            writer.writerow([_fmt(v) for v in row])
    outputs = ["chains.csv"]
    norms = []
    for t in cfg.t_eval:
        if t <= 0:
            continue
        ages, vals = kernel_grid(sol, t)
        name = f"kernel_t{t:g}.csv"
        _write_csv(out / name, ["age", "density"], zip(ages.tolist(), vals.tolist()))
        norms.append({"t": t, "integral": kernel_normalization(sol, t)})
        outputs.append(name)
    with open(out / "kernel_normalization.json", "w") as fh:
        json.dump(norms, fh, indent=2, sort_keys=True)
    return outputs + ["kernel_normalization.json"]


def _mean_tree_size(cfg: ExperimentConfig, samples: int) -> float:
    from ._rng import DOMAIN_MISC, master_hash
    from .immigration import _grow_unthinned

    base = master_hash(cfg.master_seed, DOMAIN_MISC)
    budget = [cfg.max_events]
    sizes = [
        len(_grow_unthinned(cfg.birth, base, (k,), 0.0, cfg.horizon, budget))
        for k in range(1, samples + 1)
    ]
    return float(np.mean(sizes))


def _run_convergence(cfg: ExperimentConfig, out: Path, pool) -> list:
    handle = _register(cfg)
    probe = tuple(float(t) for t in _probe_times(cfg))
    tasks = []
    counter = 0
    for n in cfg.n_ancestors:
        for _ in range(cfg.replicates):
            tasks.append((n, replicate_seed(cfg.master_seed, counter)))
            counter += 1
    sups = _map(pool, _convergence_task, [(handle, n, s, probe) for (n, s) in tasks])
    by_n: dict = {n: [] for n in cfg.n_ancestors}
    for (n, _), v in zip(tasks, sups):
        by_n[n].append(v)
    report = convergence_report(by_n)
    _write_csv(
        out / "table.csv",
        ["n_ancestors", "median_sup_dhat", "q25", "q75"],
        report.rows,
    )
    _write_csv(
        out / "runs.csv",
        ["n_ancestors", "sup_dhat"],
        [(n, v) for (n, _), v in zip(tasks, sups)],
    )
    with open(out / "report.json", "w") as fh:
        json.dump({"loglog_slope": report.slope}, fh, indent=2, sort_keys=True)
    return ["table.csv", "runs.csv", "report.json"]


@dataclass(frozen=True)
class ConvergenceReport:
    rows: list  # (N, median, q25, q75), ascending N
    slope: float  # least-squares slope of log(median) against log(N)


def convergence_report(results: dict) -> ConvergenceReport:
    """Median/IQR table of sup-distance values per population size, plus slope."""
    if len(results) < 3:
        raise ConfigError("need at least 3 population sizes", "run.n_ancestors")
    rows = []
    for n in sorted(results):
        vals = np.asarray(results[n], dtype=float)
        if vals.size < 30:
            raise ConfigError("need at least 30 replicates per size", "run.replicates")
        rows.append(
            (
                int(n),
                float(np.median(vals)),
                float(np.quantile(vals, 0.25)),
                float(np.quantile(vals, 0.75)),
            )
        )
    logs = np.log([r[0] for r in rows])
    meds = np.log([r[1] for r in rows])
    slope = float(np.polyfit(logs, meds, 1)[0])
    return ConvergenceReport(rows=rows, slope=slope)


_RUNNERS = {
    "solve": _run_solve,
    "simulate": _run_simulate,
    "nonlinear": _run_nonlinear,
    "couple": _run_couple,
    "immigration": _run_immigration,
    "chains": _run_chains,
    "convergence": _run_convergence,
}


class _SerialPool:
    def map(self, fn, argtuples):
        return [fn(*args) for args in argtuples]


def _map(pool, fn, argtuples):
    if isinstance(pool, _SerialPool):
        return pool.map(fn, argtuples)
    return list(pool.map(fn, *zip(*argtuples))) if argtuples else []


def run(
    config: Union[ExperimentConfig, str, Path, dict],
    out_dir: Union[str, Path],
    seed: Optional[int] = None,
    threads: int = 1,
) -> Path:
    """Execute one experiment; returns the manifest path.

    The output directory must not already contain files; on failure every
    partial output is removed.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    if seed is not None:
        raw = dict(cfg.raw)
        raw.setdefault("run", {})
        raw = json.loads(json.dumps(raw))  # deep copy
        raw["run"]["master_seed"] = int(seed)
        cfg = load_config(raw)
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise ConfigError(f"output directory {out} is not empty", "out")
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    try:
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                outputs = _RUNNERS[cfg.kind](cfg, out, pool)
        else:
            outputs = _RUNNERS[cfg.kind](cfg, out, _SerialPool())
        manifest = {
            "kind": cfg.kind,
            "config_hash": config_hash(cfg),
            "config": cfg.raw,
            "master_seed": cfg.master_seed,
            "outputs": sorted(outputs),
            "versions": {
                "cmjsim": __version__,
                "numpy": np.__version__,
                "python": sys.version.split()[0],
            },
        }
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        return out / "manifest.json"
    except BaseException:
        if created:
            shutil.rmtree(out, ignore_errors=True)
        else:
            for child in out.iterdir():
                if child.is_dir():
                    shutil.rmtree(child, ignore_errors=True)
                else:
                    child.unlink(missing_ok=True)
        raise


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="cmjsim", description=__doc__)
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind!r} experiment")
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", required=True, help="output directory (must be empty)")
        p.add_argument("--seed", type=int, default=None, help="override run.master_seed")
        p.add_argument("--threads", type=int, default=1, help="worker processes")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if cfg.kind != args.kind:
            raise ConfigError(
                f"config declares {cfg.kind!r} but the {args.kind!r} command was invoked",
                "experiment",
            )
        manifest = run(cfg, args.out, seed=args.seed, threads=args.threads)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (CmjError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
