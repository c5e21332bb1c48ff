"""Backward birth chains and their limiting transition kernel.

Given the solved boundary profile, the time-reversed lineage of an
individual born at time t > 0 jumps to t - a with density

    kernel(t, a) = C(t, u_t) * u_t(a) * tau(a) / u_t(0),

which integrates to one in a -- that is the boundary condition itself.
The joint density of a full chain (t_1 > ... > t_k, t_k <= 0) factors
either as the raw product g(-t_k) * prod C(t_i, u_{t_i}) tau(t_i -
t_{i+1}) or as u_{t_1}(0) times the product of kernel factors; the two
factorizations agree identically and their numerical agreement is used
as an internal cross-check.

Chains extracted from a simulated forest (one per kept node, weighted
1/N) estimate the same objects empirically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _rng
from ._rng import Stream, master_hash
from .errors import AbsorbingStateError, ConfigError, ContractError, EventCapError
from .forest import Forest, birth_chain
from .pde import PdeSolution, eval_u_values
from .nonlinear import _SolvedProbability

_MAX_CHAIN_STEPS = 10**6


@dataclass(frozen=True)
class ChainSample:
    """Strictly decreasing times, exactly one nonpositive element at the end."""

    times: tuple

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", ts)
        if not ts:
            raise ConfigError("a chain has at least one element")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ConfigError("chain times must be strictly decreasing")
        if ts[-1] > 0:
            raise ConfigError("a complete chain ends at a nonpositive time")
        if len(ts) >= 2 and ts[-2] <= 0:
            raise ConfigError("only the final element may be nonpositive")

    def __len__(self) -> int:
        return len(self.times)


def kernel_density(sol: PdeSolution, t: float, a: float) -> float:
    """Transition density, as a function of the backward jump a, at time t > 0."""
    if t <= 0:
        raise ConfigError("the kernel is defined for t > 0")
    u0 = sol.boundary_at(t)
    if u0 <= 0.0:
        raise AbsorbingStateError(f"no births at time {t}: boundary value is 0")
    p = _SolvedProbability(sol, sol.rule)(t)
    ua = float(eval_u_values(sol, t, np.array([a]))[0])
    return p * ua * sol.tau(a) / u0


def kernel_grid(sol: PdeSolution, t: float) -> tuple:
    """(ages, density values) of the kernel on the solution grid."""
    if t <= 0:
        raise ConfigError("the kernel is defined for t > 0")
    u0 = sol.boundary_at(t)
    if u0 <= 0.0:
        raise AbsorbingStateError(f"no births at time {t}: boundary value is 0")
    p = _SolvedProbability(sol, sol.rule)(t)
    ages = np.arange(0.0, t + sol.g.a_max + sol.dt, sol.dt)
    vals = p * eval_u_values(sol, t, ages) * sol.tau.values(ages) / u0
    return ages, vals


def kernel_normalization(sol: PdeSolution, t: float) -> float:
    """Trapezoidal integral of the kernel over its support (should be 1)."""
    ages, vals = kernel_grid(sol, t)
    return float(np.trapz(vals, dx=sol.dt))


def sample_chain(sol: PdeSolution, t1: float, seed: int) -> ChainSample:
    """Backward chain started at t1, iterated until it lands at or below 0.

    Inverse-CDF sampling on the solution age grid (piecewise-uniform
    within one cell, so jumps are strictly positive).
    """
    if t1 <= 0:
        return ChainSample(times=(t1,))
    stream = Stream(master_hash(seed, _rng.DOMAIN_CHAIN))
    times = [t1]
    t = t1
    for _ in range(_MAX_CHAIN_STEPS):
        ages, vals = kernel_grid(sol, t)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * sol.dt * (vals[1:] + vals[:-1]))])
        total = cdf[-1]
        if total <= 0.0:
            raise AbsorbingStateError(f"kernel has no mass at t={t}")
        u = stream.u() * total
        j = int(np.searchsorted(cdf, u, side="right")) - 1
        j = min(j, ages.size - 2)
        seg = cdf[j + 1] - cdf[j]
        frac = (u - cdf[j]) / seg if seg > 0 else 0.5
        a = ages[j] + frac * sol.dt
        if a <= 0.0:
            a = math.nextafter(0.0, 1.0)
        t = t - a
        times.append(t)
        if t <= 0.0:
            return ChainSample(times=tuple(times))
    raise EventCapError(f"chain from t1={t1} did not terminate in {_MAX_CHAIN_STEPS} steps")


def chain_density(
    sol: PdeSolution, chain: ChainSample, g=None
) -> float:
    """Joint density of a complete chain under the limiting law.

    Evaluates the raw product g(-t_k) * prod C(t_i, u_{t_i}) tau(t_i -
    t_{i+1}) and cross-checks it against the kernel-factor form
    u_{t_1}(0) * prod kernel(t_i, t_i - t_{i+1}); the two must agree to
    1e-6 relative.
    """
    gg = sol.g if g is None else g
    ts = chain.times
    k = len(ts)
    terminal = gg.pdf(-ts[-1])
    if k == 1:
        return terminal
    prob = _SolvedProbability(sol, sol.rule)
    raw = terminal
    for i in range(k - 1):
        raw *= prob(ts[i]) * sol.tau(ts[i] - ts[i + 1])
    via_kernel = sol.boundary_at(ts[0])
    for i in range(k - 1):
        via_kernel *= kernel_density(sol, ts[i], ts[i] - ts[i + 1])
    if raw > 0 and abs(via_kernel - raw) > 1e-6 * raw:
        raise ContractError(
            f"chain-density factorizations disagree: product form {raw!r}, "
            f"kernel form {via_kernel!r}"
        )
    return raw


@dataclass(frozen=True)
class EmpiricalChains:
    """One backward chain per kept node, each carrying weight 1/N."""

    weight: float
    chains: list  # list of tuples of times, first element the focal birth

    @property
    def total_weight(self) -> float:
        return self.weight * len(self.chains)

    def csv_rows(self) -> list:
        return [(self.weight, len(c)) + tuple(c) for c in self.chains]


def empirical_chain_measure(forest: Forest, horizon: float) -> EmpiricalChains:
    """Chains of all kept nodes born by `horizon`, weighted 1/N."""
    if horizon > forest.horizon + 1e-9:
        raise ConfigError("requested window exceeds the simulated horizon")
    chains = []
    for anc in sorted(forest.trees):
        tree = forest.trees[anc]
        for label in sorted(tree):
            t, kept = tree[label]
            if kept and t <= horizon:
                chains.append(tuple(birth_chain(forest, anc, label)))
    return EmpiricalChains(weight=1.0 / forest.n_ancestors, chains=chains)
