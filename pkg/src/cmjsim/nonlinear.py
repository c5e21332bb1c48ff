"""Single trees thinned by the deterministic limiting age profile.

The event loop is the same as the interacting simulator's, but the keep
probability at a birth time t is C(t, u_t) read from a precomputed
boundary solution instead of the empirical measure.  Averaging the age
measure of many independent replicates must reproduce u_t itself; that
self-consistency is the central statistical check on the whole package
and is exercised by `estimate_mean_age_densities`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from heapq import heappush, heappop
from typing import Optional, Sequence

import numpy as np

from . import _rng
from ._rng import Stream, fold, master_hash, replicate_seed, unit_uniform
from .errors import ConfigError, ContractError, EventCapError
from .forest import Forest
from .interacting import DEFAULT_EVENT_CAP, InteractionRule
from .measures import GriddedDensity
from .pde import PdeSolution, _PdeAgeView, eval_u_values
from .point_process import (
    BirthProcessSpec,
    InitialAgeDensity,
    censor_initial_atoms,
    sample_atoms,
)


class _SolvedProbability:
    """t -> C(t, u_t) evaluated against a boundary solution."""

    def __init__(self, sol: PdeSolution, rule: InteractionRule):
        self._sol = sol
        self._rule = rule
        self._masses = (sol.mass0 + sol.cumulative).tolist()
        self._dt = sol.dt
        self._top = len(self._masses) - 1
        self._em = rule.evaluate_mass

    def __call__(self, t: float) -> float:
        x = t / self._dt
        j = int(x)
        if j >= self._top:
            m = self._masses[self._top]
        else:
            frac = x - j
            m = self._masses[j] * (1.0 - frac) + self._masses[j + 1] * frac
        if self._em is not None:
            p = self._em(t, m)
        else:
            p = self._rule.evaluate(t, _PdeAgeView(self._sol, t, m))
        if not (0.0 <= p <= 1.0):
            raise ContractError(f"interaction rule returned {p} outside [0, 1] at t={t}")
        return p


def simulate_nonlinear_tree(
    spec: BirthProcessSpec,
    ages: InitialAgeDensity,
    rule: InteractionRule,
    sol: PdeSolution,
    horizon: float,
    seed: int,
    *,
    ancestor: int = 1,
    max_events: int = DEFAULT_EVENT_CAP,
    record_forest: bool = True,
) -> tuple[Optional[Forest], list]:
    """One tree thinned by C(t, u_t); returns (forest, kept birth times).

    The solution must cover the requested horizon and should have been
    produced for the same intensity, initial ages and rule.
    """
    if horizon > sol.horizon + 1e-9:
        raise ConfigError(
            f"horizon {horizon} exceeds the solved window {sol.horizon}", "horizon"
        )
    prob = _SolvedProbability(sol, rule)
    base = master_hash(seed, _rng.DOMAIN_FOREST)
    return _grow_thinned_tree(
        spec, ages, prob, horizon, base, ancestor, max_events, record_forest
    )


def _grow_thinned_tree(
    spec, ages, prob, horizon, base, anc, max_events, record_forest
) -> tuple[Optional[Forest], list]:
    forest = Forest(horizon=horizon, n_ancestors=1) if record_forest else None
    heap: list = []
    seq = 0
    root_hash = fold(base, anc)
    a0 = ages.sample(Stream(fold(root_hash, _rng.TAG_INIT)))
    sigma = -a0
    kept_times = [sigma]
    if record_forest:
        forest.add(anc, (), sigma, True)
    raw = sample_atoms(spec, a0 + horizon, Stream(fold(root_hash, _rng.TAG_ATOMS)))
    for k, t in enumerate(censor_initial_atoms(a0, raw, horizon), start=1):
        heappush(heap, (t, seq, (k,), fold(root_hash, k)))
        seq += 1
    events = 0
    while heap:
        t, _, label, node_hash = heappop(heap)
        events += 1
        if events > max_events:
            raise EventCapError(f"event cap {max_events} exceeded at t={t:.6g}")
        w = unit_uniform(fold(node_hash, _rng.TAG_OMEGA))
        kept = w <= prob(t)
        if record_forest:
            forest.add(anc, label, t, kept)
        if kept:
            kept_times.append(t)
            st = Stream(fold(node_hash, _rng.TAG_ATOMS))
            for k, a in enumerate(sample_atoms(spec, horizon - t, st), start=1):
                heappush(heap, (t + a, seq, label + (k,), fold(node_hash, k)))
                seq += 1
    return forest, kept_times


@dataclass(frozen=True)
class AgeDensityEstimate:
    """Monte Carlo mean age density at one time, with per-bin standard errors."""

    time: float
    step: float
    values: np.ndarray  # density estimate per bin
    se: np.ndarray  # standard error of each bin's density
    replicates: int
    mass_mean: float  # mean number of kept individuals
    mass_se: float

    @property
    def density(self) -> GriddedDensity:
        # nodal representation at bin centers' left edges; fine for CSV/plots
        return GriddedDensity(step=self.step, values=self.values)

    def bin_edges(self) -> np.ndarray:
        return self.step * np.arange(self.values.size + 1)


def estimate_mean_age_densities(
    spec: BirthProcessSpec,
    ages: InitialAgeDensity,
    rule: InteractionRule,
    sol: PdeSolution,
    t_values: Sequence[float],
    replicates: int,
    bin_width: float,
    seed: int,
    *,
    max_events: int = DEFAULT_EVENT_CAP,
) -> dict:
    """Histogram estimate of E[age measure of one tree] at each requested time.

    Returns {t: AgeDensityEstimate}.  Replicates are independent trees;
    per-bin standard errors come from the across-replicate variance of
    the bin counts.
    """
    if replicates < 1:
        raise ConfigError("need at least one replicate", "run.replicates")
    if bin_width <= 0:
        raise ConfigError("bin width must be > 0", "numerics.bin_width")
    t_values = sorted(t_values)
    horizon = t_values[-1]
    if horizon > sol.horizon + 1e-9:
        raise ConfigError("largest evaluation time exceeds the solved window", "t")
    prob = _SolvedProbability(sol, rule)
    base_master = seed

    nbins = {t: int(math.ceil((t + ages.a_max) / bin_width)) + 1 for t in t_values}
    sums = {t: np.zeros(nbins[t]) for t in t_values}
    sumsq = {t: np.zeros(nbins[t]) for t in t_values}
    mass_sum = {t: 0.0 for t in t_values}
    mass_sumsq = {t: 0.0 for t in t_values}

    for r in range(1, replicates + 1):
        base = master_hash(replicate_seed(base_master, r), _rng.DOMAIN_FOREST)
        _, kept = _grow_thinned_tree(
            spec, ages, prob, horizon, base, 1, max_events, False
        )
        kept.sort()
        for t in t_values:
            counts: dict = {}
            n_alive = 0
            for s in kept:
                if s > t:
                    break
                b = int((t - s) / bin_width)
                counts[b] = counts.get(b, 0) + 1
                n_alive += 1
            srow = sums[t]
            qrow = sumsq[t]
            for b, c in counts.items():
                srow[b] += c
                qrow[b] += c * c
            mass_sum[t] += n_alive
            mass_sumsq[t] += n_alive * n_alive

    out = {}
    for t in t_values:
        m = replicates
        mean_counts = sums[t] / m
        if m > 1:
            var = np.maximum(sumsq[t] / m - mean_counts**2, 0.0) * m / (m - 1)
            se_counts = np.sqrt(var / m)
            mass_mean = mass_sum[t] / m
            mass_var = max(mass_sumsq[t] / m - mass_mean**2, 0.0) * m / (m - 1)
            mass_se = math.sqrt(mass_var / m)
        else:
            se_counts = np.zeros_like(mean_counts)
            mass_mean = mass_sum[t]
            mass_se = 0.0
        out[t] = AgeDensityEstimate(
            time=t,
            step=bin_width,
            values=mean_counts / bin_width,
            se=se_counts / bin_width,
            replicates=m,
            mass_mean=mass_mean,
            mass_se=mass_se,
        )
    return out


def expected_bin_masses(sol: PdeSolution, t: float, bin_width: float, nbins: int) -> np.ndarray:
    """int of u_t over each histogram bin, by sub-bin trapezoidal quadrature."""
    refine = 8
    edges = bin_width * np.arange(nbins + 1)
    fine = np.linspace(0.0, edges[-1], refine * nbins + 1)
    vals = eval_u_values(sol, t, fine)
    masses = np.empty(nbins)
    for b in range(nbins):
        seg = slice(refine * b, refine * (b + 1) + 1)
        masses[b] = np.trapz(vals[seg], fine[seg])
    return masses
