"""Un-thinned branching forest with state-dependent immigration.

A "left" forest of N independent, rule-free trees supplies potential
immigration times: its strictly positive birth times.  At each such
time s, with probability min(1, eta + L * I(s-)/N) an independent
rule-free tree is planted at s, and I counts every birth inside the
planted trees (roots included).  The process is self-exciting: the more
births on the right, the likelier further immigration.

The mean of the associated dominating Markov chain

    S_{n+1} = S_n + Z_n * 1{omega <= min(1, eta + L S_n / N)},
    Z_n i.i.d. total tree sizes over the full window,

satisfies E[S_n] <= (eta N / L) ((1 + L E[Z]/N)^n - 1); `chain_bound`
evaluates that expression and `simulate_dominating_chain` re-simulates
the chain so the inequality can be checked by Monte Carlo.  With
``with_dominating=True`` the simulation also carries S pathwise on the
same noise, in which case I(t) <= S(t) holds exactly at every
potential immigration time.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _rng
from ._rng import Stream, fold, key_hash, master_hash, replicate_seed, unit_uniform
from .errors import ConfigError, EventCapError
from .interacting import DEFAULT_EVENT_CAP
from .point_process import (
    BirthProcessSpec,
    InitialAgeDensity,
    censor_initial_atoms,
    sample_atoms,
)


def _grow_unthinned(
    spec: BirthProcessSpec,
    base: int,
    root_key: tuple,
    root_time: float,
    horizon: float,
    budget: list,
    *,
    initial_age: Optional[float] = None,
) -> list:
    """Rule-free tree: list of (birth time, node key); births capped by `budget`.

    ``horizon`` is an absolute end time on the same clock as ``root_time``.
    With ``initial_age`` the root is an aged ancestor born at -initial_age
    whose atoms are censored accordingly; otherwise it reproduces from
    age zero at ``root_time``.
    """
    root_hash = base
    for c in root_key:
        root_hash = fold(root_hash, c)
    out = [(root_time, root_key)]
    st = Stream(fold(root_hash, _rng.TAG_ATOMS))
    if initial_age is not None:
        raw = sample_atoms(spec, horizon - root_time, st)
        first = censor_initial_atoms(initial_age, raw, horizon)
    else:
        first = [root_time + a for a in sample_atoms(spec, horizon - root_time, st)]
    stack = []
    for k, t in enumerate(first, start=1):
        node = (t, root_key + (k,), fold(root_hash, k))
        out.append((t, node[1]))
        stack.append(node)
        budget[0] -= 1
        if budget[0] < 0:
            raise EventCapError("immigration run exceeded its event budget")
    while stack:
        s, key, h = stack.pop()
        st = Stream(fold(h, _rng.TAG_ATOMS))
        for k, a in enumerate(sample_atoms(spec, horizon - s, st), start=1):
            child = (s + a, key + (k,), fold(h, k))
            out.append((child[0], child[1]))
            stack.append(child)
            budget[0] -= 1
            if budget[0] < 0:
                raise EventCapError("immigration run exceeded its event budget")
    return out


@dataclass(frozen=True)
class ImmigrationResult:
    horizon: float
    n_ancestors: int
    eta: float
    lipschitz: float
    imm_birth_times: np.ndarray  # sorted times of right-side births (roots included)
    attempt_times: np.ndarray  # positive left birth times, sorted
    attempt_success: np.ndarray  # bool per attempt
    left_birth_times: np.ndarray  # all left births, roots (<= 0) included
    dominating: Optional[np.ndarray]  # S after each attempt, when requested

    def imm_count(self, t: float) -> int:
        """I(t): right-side births up to and including t."""
        return int(np.searchsorted(self.imm_birth_times, t, side="right"))

    def z_iota(self, t: float) -> int:
        """Left-forest birth count up to t (ancestors included)."""
        return int(np.searchsorted(self.left_birth_times, t, side="right"))


def simulate_immigration(
    n_ancestors: int,
    eta: float,
    lipschitz: float,
    spec: BirthProcessSpec,
    ages: InitialAgeDensity,
    horizon: float,
    seed: int,
    *,
    max_events: int = DEFAULT_EVENT_CAP,
    with_dominating: bool = False,
) -> ImmigrationResult:
    """Simulate the process on [0, horizon].

    When ``with_dominating`` is set, planted trees are grown over the full
    window (not just the remaining one) so the dominating variable S can
    reuse the identical tree noise, exactly as in the comparison argument.
    """
    if not (0.0 <= eta <= 1.0):
        raise ConfigError("eta must lie in [0, 1]", "run.eta")
    if lipschitz < 0:
        raise ConfigError("lipschitz must be >= 0", "run.lipschitz")
    if n_ancestors < 1:
        raise ConfigError("need at least one ancestor", "run.n_ancestors")
    base_left = master_hash(seed, _rng.DOMAIN_IMMIGRATION)
    budget = [max_events]

    left: list = []
    for i in range(1, n_ancestors + 1):
        a0 = ages.sample(Stream(key_hash(base_left, (i,), _rng.TAG_INIT)))
        left.extend(
            _grow_unthinned(
                spec, base_left, (i,), -a0, horizon, budget, initial_age=a0
            )
        )

    attempts = sorted(((t, key) for (t, key) in left if t > 0), key=lambda x: (x[0], x[1]))
    left_times = np.sort(np.array([t for (t, _) in left]))

    inv_n = 1.0 / n_ancestors
    imm_birth_times: list = []
    pending: list = []  # min-heap of scheduled right-side birth times
    i_count = 0  # I(t-) maintained along the attempt sweep
    s_value = 0.0
    success = np.zeros(len(attempts), dtype=bool)
    dominating = np.zeros(len(attempts)) if with_dominating else None

    for n, (t, key) in enumerate(attempts):
        while pending and pending[0] < t:
            imm_birth_times.append(heapq.heappop(pending))
            i_count += 1
        w = unit_uniform(key_hash(base_left, key, _rng.TAG_OMEGA))
        ok = w <= min(1.0, eta + lipschitz * i_count * inv_n)
        success[n] = ok
        plant_key = key + (_rng.DAG_MARK,)
        if with_dominating:
            # the dominating variable sees the same uniform with a larger
            # threshold and charges the tree's full-window size up front
            ok_dom = w <= min(1.0, eta + lipschitz * s_value * inv_n)
            if ok and not ok_dom:
                raise AssertionError("dominating success set must contain the real one")
            if ok_dom:
                tree = _grow_unthinned(spec, base_left, plant_key, t, t + horizon, budget)
                s_value += len(tree)
                if ok:
                    for (bt, _) in tree:
                        if bt <= horizon:
                            heapq.heappush(pending, bt)
            dominating[n] = s_value
        elif ok:
            tree = _grow_unthinned(spec, base_left, plant_key, t, horizon, budget)
            for (bt, _) in tree:
                heapq.heappush(pending, bt)

    while pending:
        imm_birth_times.append(heapq.heappop(pending))

    return ImmigrationResult(
        horizon=horizon,
        n_ancestors=n_ancestors,
        eta=eta,
        lipschitz=lipschitz,
        imm_birth_times=np.sort(np.array(imm_birth_times)),
        attempt_times=np.array([t for (t, _) in attempts]),
        attempt_success=success,
        left_birth_times=left_times,
        dominating=dominating,
    )


def chain_bound(eta: float, lipschitz: float, n_ancestors: int, ez: float, n: int) -> float:
    """Closed-form mean bound (eta N / L) ((1 + L*EZ/N)^n - 1); its L -> 0 limit is eta*EZ*n."""
    if min(eta, lipschitz, ez) < 0 or n < 0 or n_ancestors <= 0:
        raise ConfigError("all chain-bound arguments must be nonnegative")
    if lipschitz == 0.0:
        return eta * ez * n
    ratio = lipschitz * ez / n_ancestors
    return eta * n_ancestors / lipschitz * ((1.0 + ratio) ** n - 1.0)


def simulate_dominating_chain(
    n_steps: int,
    eta: float,
    lipschitz: float,
    n_ancestors: int,
    spec: BirthProcessSpec,
    window: float,
    seed: int,
    *,
    max_events: int = DEFAULT_EVENT_CAP,
) -> float:
    """Final value S_n of the dominating chain, with Z drawn as full tree sizes."""
    base = master_hash(seed, _rng.DOMAIN_IMMIGRATION)
    inv_n = 1.0 / n_ancestors
    budget = [max_events]
    s = 0.0
    for k in range(1, n_steps + 1):
        w = unit_uniform(key_hash(base, (k,), _rng.TAG_OMEGA))
        if w <= min(1.0, eta + lipschitz * s * inv_n):
            tree = _grow_unthinned(spec, base, (k, _rng.DAG_MARK), 0.0, window, budget)
            s += len(tree)
    return s


def wilson_interval(successes: int, trials: int, z: float = 1.96) -> tuple:
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        raise ConfigError("need at least one trial")
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclass(frozen=True)
class TailEstimate:
    threshold: float  # epsilon * N
    probability: float
    low: float
    high: float
    replicates: int


def estimate_tail(
    n_ancestors: int,
    eta: float,
    lipschitz: float,
    spec: BirthProcessSpec,
    ages: InitialAgeDensity,
    epsilon: float,
    t: float,
    replicates: int,
    seed: int,
    *,
    max_events: int = DEFAULT_EVENT_CAP,
) -> TailEstimate:
    """Monte Carlo estimate of P(I(t) >= epsilon * N) with a Wilson interval."""
    if replicates < 100:
        raise ConfigError("tail estimation needs at least 100 replicates", "run.replicates")
    hits = 0
    threshold = epsilon * n_ancestors
    for r in range(1, replicates + 1):
        res = simulate_immigration(
            n_ancestors,
            eta,
            lipschitz,
            spec,
            ages,
            t,
            replicate_seed(seed, r),
            max_events=max_events,
        )
        if res.imm_count(t) >= threshold:
            hits += 1
    lo, hi = wilson_interval(hits, replicates)
    return TailEstimate(
        threshold=threshold,
        probability=hits / replicates,
        low=lo,
        high=hi,
        replicates=replicates,
    )
