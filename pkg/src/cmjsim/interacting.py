"""Event-driven simulation of branching forests with mean-field thinning.

Potential births are inspected in increasing (time, insertion sequence)
order.  A potential birth at time t from a kept parent is itself kept
with probability C(t, mu_{t-}), where mu_{t-} is the empirical age
measure of the population just before the event; on keep, the newborn's
own reproduction atoms (censored to the remaining window) are pushed
onto the queue.

The per-node uniforms and reproduction streams are keyed by the node's
label, so runs with the same master seed expose identical noise to
every individual regardless of the thinning rule -- a run thinned by
any rule is pathwise dominated by the rule-free run on the same seed.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from heapq import heappush, heappop
from typing import Callable, Optional

import numpy as np

from . import _rng
from ._rng import Stream, fold, key_hash, master_hash, unit_uniform
from .errors import ConfigError, ContractError, EventCapError
from .forest import Forest
from .measures import EmpiricalAgeMeasure
from .point_process import (
    BirthProcessSpec,
    InitialAgeDensity,
    censor_initial_atoms,
    initial_pair,
    sample_atoms,
)

DEFAULT_EVENT_CAP = 5_000_000


# ---------------------------------------------------------------------------
# interaction rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InteractionRule:
    """Thinning probability C(t, mu) with a declared Lipschitz constant.

    ``evaluate_mass`` is the fast path for rules that depend on the
    measure only through its total mass; rules needing the full measure
    implement ``evaluate`` against a view exposing ``mass()`` and
    ``integrate(phi)``.
    """

    name: str
    lipschitz: float
    evaluate_mass: Optional[Callable[[float, float], float]] = None
    evaluate: Optional[Callable[[float, object], float]] = None
    params: tuple = ()

    def __post_init__(self):
        if self.evaluate_mass is None and self.evaluate is None:
            raise ConfigError("rule needs evaluate_mass or evaluate", "interaction")
        if self.lipschitz < 0 or not math.isfinite(self.lipschitz):
            raise ConfigError("lipschitz constant must be finite and >= 0", "interaction")


def constant_rule(c: float) -> InteractionRule:
    if not 0.0 <= c <= 1.0:
        raise ConfigError("constant rule needs c in [0, 1]", "interaction.c")
    return InteractionRule(
        name="constant", lipschitz=0.0, evaluate_mass=lambda t, m: c, params=(c,)
    )


def immunity_rule(capacity: float) -> InteractionRule:
    """Keep probability 1 - mass/capacity, clipped to [0, 1].

    Total mass moves by at most the Prohorov distance between two finite
    measures, so the rule is 1/capacity-Lipschitz for that metric.
    """
    if capacity <= 0:
        raise ConfigError("capacity must be > 0", "interaction.capacity")
    k = float(capacity)

    def ev(t: float, m: float) -> float:
        p = 1.0 - m / k
        return 0.0 if p < 0.0 else (1.0 if p > 1.0 else p)

    return InteractionRule(name="immunity", lipschitz=1.0 / k, evaluate_mass=ev, params=(k,))


def lockdown_rule(capacity: float, reduction: float, threshold: float) -> InteractionRule:
    """Immunity rule with an extra contact reduction above a mass threshold.

    The indicator term jumps when the mass crosses threshold*capacity, so
    no finite Lipschitz constant is valid across the jump; the declared
    constant covers the smooth factor only.  Suitable for simulation and
    solving, not for the coupled error envelope.
    """
    if capacity <= 0 or not (0 <= reduction <= 1) or threshold < 0:
        raise ConfigError("need capacity > 0, reduction in [0,1], threshold >= 0",
                          "interaction.lockdown")
    k, kap, th = float(capacity), float(reduction), float(threshold)

    def ev(t: float, m: float) -> float:
        p = (1.0 - m / k) * (1.0 - (kap if m > th * k else 0.0))
        return 0.0 if p < 0.0 else (1.0 if p > 1.0 else p)

    return InteractionRule(
        name="lockdown", lipschitz=1.0 / k, evaluate_mass=ev, params=(k, kap, th)
    )


def custom_rule(
    name: str,
    fn: Callable,
    lipschitz: float,
    mass_only: bool = False,
) -> InteractionRule:
    if mass_only:
        return InteractionRule(name=name, lipschitz=lipschitz, evaluate_mass=fn)
    return InteractionRule(name=name, lipschitz=lipschitz, evaluate=fn)


class LiveAgeView:
    """Read-only view of the current population for generic rules."""

    def __init__(self, root_times, kept_times, n_kept_events, t, normalizer):
        self._roots = root_times
        self._kept = kept_times
        self._n = n_kept_events
        self.time = t
        self._norm = normalizer

    def mass(self) -> float:
        return (len(self._roots) + self._n) / self._norm

    def integrate(self, phi) -> float:
        t = self.time
        acc = sum(phi(t - s) for s in self._roots)
        for i in range(self._n):
            acc += phi(t - self._kept[i])
        return acc / self._norm


# ---------------------------------------------------------------------------
# simulation state and outputs
# ---------------------------------------------------------------------------


@dataclass
class SimState:
    """Mutable event-loop state: population, coming generation, clock."""

    heap: list = field(default_factory=list)  # (time, seq, anc, label, node hash)
    seq: int = 0
    kept_times: list = field(default_factory=list)
    kept_count: int = 0
    clock: float = 0.0

    def push(self, time: float, anc: int, label: tuple, node_hash: int) -> None:
        heappush(self.heap, (time, self.seq, anc, label, node_hash))
        self.seq += 1


@dataclass(frozen=True)
class AgeMeasurePath:
    """Right-continuous step path of the empirical age measure."""

    horizon: float
    normalizer: int
    root_times: np.ndarray  # sorted, <= 0
    kept_times: np.ndarray  # positive kept birth times in increasing order

    def measure_at(self, t: float) -> EmpiricalAgeMeasure:
        if t < 0 or t > self.horizon + 1e-9:
            raise ConfigError(f"time {t} outside [0, {self.horizon}]")
        upto = int(np.searchsorted(self.kept_times, t, side="right"))
        births = np.concatenate([self.root_times, self.kept_times[:upto]])
        return EmpiricalAgeMeasure(time=t, birth_times=births, normalizer=self.normalizer)

    def mass_at(self, t: float) -> float:
        upto = np.searchsorted(self.kept_times, t, side="right")
        return (self.root_times.size + float(upto)) / self.normalizer


def age_measure_at(path: AgeMeasurePath, t: float) -> EmpiricalAgeMeasure:
    """The step-function value mu_t (events at exactly t included)."""
    return path.measure_at(t)


# ---------------------------------------------------------------------------
# the simulator
# ---------------------------------------------------------------------------


def simulate_interacting(
    n_ancestors: int,
    spec: BirthProcessSpec,
    ages: InitialAgeDensity,
    rule: InteractionRule,
    horizon: float,
    seed: int,
    *,
    max_events: int = DEFAULT_EVENT_CAP,
    record_forest: bool = True,
) -> tuple[Optional[Forest], AgeMeasurePath]:
    """One forest with mean-field thinning; returns (forest, age-measure path).

    Identical seed and configuration reproduce the forest bit for bit.
    """
    if n_ancestors < 1:
        raise ConfigError("need at least one ancestor", "run.n_ancestors")
    if not (horizon > 0 and math.isfinite(horizon)):
        raise ConfigError("horizon must be finite and > 0", "numerics.horizon")

    base = master_hash(seed, _rng.DOMAIN_FOREST)
    state = SimState()
    forest = Forest(horizon=horizon, n_ancestors=n_ancestors) if record_forest else None
    root_times = np.empty(n_ancestors)

    for i in range(1, n_ancestors + 1):
        root_hash = fold(base, i)  # == key_hash(base, (i,), ...) minus the tag fold
        a0 = ages.sample(Stream(fold(root_hash, _rng.TAG_INIT)))
        sigma = -a0
        root_times[i - 1] = sigma
        if record_forest:
            forest.add(i, (), sigma, True)
        raw = sample_atoms(spec, a0 + horizon, Stream(fold(root_hash, _rng.TAG_ATOMS)))
        for k, t in enumerate(censor_initial_atoms(a0, raw, horizon), start=1):
            state.push(t, i, (k,), fold(root_hash, k))

    root_times.sort()
    inv_n = 1.0 / n_ancestors
    em = rule.evaluate_mass
    events = 0
    heap = state.heap
    kept_times = state.kept_times

    while heap:
        t, _, anc, label, node_hash = heappop(heap)
        events += 1
        if events > max_events:
            raise EventCapError(f"event cap {max_events} exceeded at t={t:.6g}")
        state.clock = t
        if em is not None:
            p = em(t, (n_ancestors + state.kept_count) * inv_n)
        else:
            p = rule.evaluate(
                t, LiveAgeView(root_times, kept_times, state.kept_count, t, n_ancestors)
            )
        if not (0.0 <= p <= 1.0):
            raise ContractError(f"interaction rule returned {p} outside [0, 1] at t={t}")
        w = unit_uniform(fold(node_hash, _rng.TAG_OMEGA))
        kept = w <= p
        if record_forest:
            forest.add(anc, label, t, kept)
        if kept:
            state.kept_count += 1
            kept_times.append(t)
            atom_stream = Stream(fold(node_hash, _rng.TAG_ATOMS))
            for k, a in enumerate(sample_atoms(spec, horizon - t, atom_stream), start=1):
                state.push(t + a, anc, label + (k,), fold(node_hash, k))

    path = AgeMeasurePath(
        horizon=horizon,
        normalizer=n_ancestors,
        root_times=root_times,
        kept_times=np.asarray(kept_times),
    )
    return forest, path
