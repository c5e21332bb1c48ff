"""Five-label coupled construction driven by shared per-node noise.

One event loop simultaneously grows

* the interacting forest (particles whose label has a 1 in the first
  coordinate),
* N independent limit trees (1 in the second coordinate), and
* two families of fictitious particles: ``STAR`` particles completing
  the well-coupled tree to an un-thinned forest, and ``DAGGER``
  particles completing the discrepancy trees likewise.

A newborn of a well-coupled parent receives its label from the maximal
coupling of the two thinning probabilities P1(t) = C(t, mu_{t-}) and
P2(t) = C(t, u_t); a fictitious DAGGER particle is immigrated whenever
the uniform lands between |P1 - P2| and the envelope eta + L*I/N, so
the immigration counter I (births among ONLY_INTERACTING,
ONLY_NONLINEAR and DAGGER particles) dominates the discrepancy count
pathwise as long as |P1 - P2| stays below the envelope.  The first
envelope violation, if any, is recorded as a stopping time.

Real-lineage particles reuse exactly the node-keyed noise of the
standalone simulators; STAR/DAGGER particles draw from disjoint
namespaces, so all three marginal processes have the advertised laws.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from enum import IntEnum
from heapq import heappush, heappop
from typing import Optional

import numpy as np

from . import _rng
from ._rng import Stream, fold, master_hash, unit_uniform
from .errors import ConfigError, ContractError, EventCapError
from .forest import Forest
from .measures import EmpiricalAgeMeasure, prohorov_upper
from .nonlinear import _SolvedProbability
from .pde import PdeSolution, age_snapshot
from .point_process import (
    BirthProcessSpec,
    InitialAgeDensity,
    censor_initial_atoms,
    sample_atoms,
)
from .interacting import DEFAULT_EVENT_CAP, InteractionRule


class CouplingLabel(IntEnum):
    BOTH = 0  # present in the interacting forest and in the limit tree
    ONLY_INTERACTING = 1  # kept by the empirical thinning only
    ONLY_NONLINEAR = 2  # kept by the limit thinning only
    DAGGER = 3  # fictitious completion of a discrepancy tree
    STAR = 4  # fictitious completion of the well-coupled tree
    DISCARDED = 5  # thinned for both procedures; never enters the population


_IMMIGRANT_LABELS = (
    CouplingLabel.ONLY_INTERACTING,
    CouplingLabel.ONLY_NONLINEAR,
    CouplingLabel.DAGGER,
)


def assign_offspring_label(p1: float, p2: float, w: float) -> CouplingLabel:
    """Label of a newborn from a well-coupled parent.

    Marginals: the first coordinate is 1 with probability p1, the second
    with probability p2, and the overlap min(p1, p2) is maximal.
    Threshold conventions (strict versus non-strict) are kept exactly as
    in the construction; they matter only on null events.
    """
    if not (0.0 <= p1 <= 1.0 and 0.0 <= p2 <= 1.0):
        raise ConfigError("probabilities must lie in [0, 1]")
    if not (0.0 < w < 1.0):
        raise ConfigError("the uniform draw must lie strictly inside (0, 1)")
    d = p1 - p2
    if w <= d:
        return CouplingLabel.ONLY_INTERACTING
    if w <= -d:
        return CouplingLabel.ONLY_NONLINEAR
    if abs(d) < w < max(p1, p2):
        return CouplingLabel.BOTH
    return CouplingLabel.DISCARDED


@dataclass(frozen=True)
class CoupledResult:
    n_ancestors: int
    horizon: float
    eta: float
    lipschitz: float
    interacting_forest: Optional[Forest]
    nonlinear_forests: Optional[list]
    mu_times: np.ndarray  # interacting birth times (roots included), sorted
    mubar_times: np.ndarray  # limit-tree birth times (roots included), sorted
    imm_times: np.ndarray  # times of immigration-counter increments
    disc_times: np.ndarray  # times of discrepancy births
    n_both: int
    n_only_interacting: int
    n_only_nonlinear: int
    n_star: int
    n_dagger: int
    tau_stop: Optional[float]  # time of the first envelope violation, None if none
    audit: Optional[list]

    def imm_count(self, t: float) -> int:
        return int(np.searchsorted(self.imm_times, t, side="right"))

    def discrepancy(self, t: float) -> int:
        return int(np.searchsorted(self.disc_times, t, side="right"))

    def interacting_measure(self, t: float) -> EmpiricalAgeMeasure:
        upto = np.searchsorted(self.mu_times, t, side="right")
        return EmpiricalAgeMeasure(t, self.mu_times[:upto], self.n_ancestors)

    def nonlinear_measure(self, t: float) -> EmpiricalAgeMeasure:
        upto = np.searchsorted(self.mubar_times, t, side="right")
        return EmpiricalAgeMeasure(t, self.mubar_times[:upto], self.n_ancestors)


def simulate_coupled(
    n_ancestors: int,
    spec: BirthProcessSpec,
    ages: InitialAgeDensity,
    rule: InteractionRule,
    sol: PdeSolution,
    eta: float,
    horizon: float,
    seed: int,
    *,
    max_events: int = DEFAULT_EVENT_CAP,
    record_forests: bool = True,
    record_audit: bool = True,
) -> CoupledResult:
    """Run the coupled construction; envelope violations are reported, not raised."""
    if not (0.0 < eta <= 1.0):
        raise ConfigError("eta must lie in (0, 1]", "run.eta")
    if horizon > sol.horizon + 1e-9:
        raise ConfigError("horizon exceeds the solved window", "horizon")
    if n_ancestors < 1:
        raise ConfigError("need at least one ancestor", "run.n_ancestors")

    lip = rule.lipschitz
    p2_of = _SolvedProbability(sol, rule)
    em = rule.evaluate_mass
    if em is None:
        raise ConfigError(
            "the coupled loop requires a mass-evaluable rule", "interaction"
        )
    base = master_hash(seed, _rng.DOMAIN_FOREST)
    inv_n = 1.0 / n_ancestors

    inter_forest = Forest(horizon=horizon, n_ancestors=n_ancestors) if record_forests else None
    nl_forests = (
        {i: Forest(horizon=horizon, n_ancestors=1) for i in range(1, n_ancestors + 1)}
        if record_forests
        else None
    )

    heap: list = []
    seq = 0

    def push(time: float, parent_label: CouplingLabel, identity: tuple, node_hash: int) -> None:
        nonlocal seq
        heappush(heap, (time, seq, int(parent_label), identity, node_hash))
        seq += 1

    mu_times: list = []
    mubar_times: list = []
    for i in range(1, n_ancestors + 1):
        root_hash = fold(base, i)
        a0 = ages.sample(Stream(fold(root_hash, _rng.TAG_INIT)))
        sigma = -a0
        mu_times.append(sigma)
        mubar_times.append(sigma)
        if record_forests:
            inter_forest.add(i, (), sigma, True)
            nl_forests[i].add(i, (), sigma, True)
        raw = sample_atoms(spec, a0 + horizon, Stream(fold(root_hash, _rng.TAG_ATOMS)))
        for k, t in enumerate(censor_initial_atoms(a0, raw, horizon), start=1):
            push(t, CouplingLabel.BOTH, (i, k), fold(root_hash, k))

    mu_count = n_ancestors
    mubar_count = n_ancestors
    n_both = n_ancestors
    n_only_int = 0
    n_only_nl = 0
    n_star = 0
    n_dag = 0
    imm_times: list = []
    disc_times: list = []
    tau_stop: Optional[float] = None
    audit: Optional[list] = [] if record_audit else None
    events = 0

    BOTH = CouplingLabel.BOTH
    ONLY_I = CouplingLabel.ONLY_INTERACTING
    ONLY_N = CouplingLabel.ONLY_NONLINEAR
    DAG = CouplingLabel.DAGGER
    STAR = CouplingLabel.STAR
    DISC = CouplingLabel.DISCARDED

    while heap:
        t, _, plab_i, identity, node_hash = heappop(heap)
        plab = CouplingLabel(plab_i)
        events += 1
        if events > max_events:
            raise EventCapError(f"event cap {max_events} exceeded at t={t:.6g}")

        p1 = em(t, mu_count * inv_n)
        if not (0.0 <= p1 <= 1.0):
            raise ContractError(f"interaction rule returned {p1} outside [0, 1]")
        p2 = p2_of(t)
        i_before = n_only_int + n_only_nl + n_dag
        envelope = eta + lip * i_before * inv_n
        if tau_stop is None and abs(p1 - p2) > envelope:
            tau_stop = t

        w = unit_uniform(fold(node_hash, _rng.TAG_OMEGA))
        rho = False
        anc = identity[0]

        if plab is BOTH:
            child = assign_offspring_label(p1, p2, w)
            rho = abs(p1 - p2) < w <= envelope
            if child is not DISC:
                if child is BOTH:
                    n_both += 1
                    mu_count += 1
                    mubar_count += 1
                    mu_times.append(t)
                    mubar_times.append(t)
                elif child is ONLY_I:
                    n_only_int += 1
                    mu_count += 1
                    mu_times.append(t)
                    disc_times.append(t)
                    imm_times.append(t)
                else:  # ONLY_NONLINEAR
                    n_only_nl += 1
                    mubar_count += 1
                    mubar_times.append(t)
                    disc_times.append(t)
                    imm_times.append(t)
                _spawn_as(push, spec, horizon, child, identity, node_hash, t)
            if child is not BOTH:
                n_star += 1
                _spawn_as(push, spec, horizon, STAR, identity + (_rng.STAR_MARK,),
                          fold(node_hash, _rng.STAR_MARK), t)
            if rho:
                n_dag += 1
                imm_times.append(t)
                _spawn_as(push, spec, horizon, DAG, identity + (_rng.DAG_MARK,),
                          fold(node_hash, _rng.DAG_MARK), t)
            if record_forests:
                inter_forest.add(anc, identity[1:], t, child in (BOTH, ONLY_I))
                nl_forests[anc].add(anc, identity[1:], t, child in (BOTH, ONLY_N))
            if audit is not None:
                audit.append(
                    (t, plab.name, child.name, int(rho),
                     n_only_int + n_only_nl + n_dag, len(disc_times))
                )
            continue

        if plab is STAR:
            rho = w <= envelope
            n_star += 1
            _spawn_as(push, spec, horizon, STAR, identity, node_hash, t)
            if rho:
                n_dag += 1
                imm_times.append(t)
                _spawn_as(push, spec, horizon, DAG, identity + (_rng.DAG_MARK,),
                          fold(node_hash, _rng.DAG_MARK), t)
            if audit is not None:
                audit.append(
                    (t, plab.name, STAR.name, int(rho),
                     n_only_int + n_only_nl + n_dag, len(disc_times))
                )
            continue

        # parents carrying exactly one process: ONLY_I / ONLY_N / DAGGER
        if plab is ONLY_I:
            keep_prob = p1
        elif plab is ONLY_N:
            keep_prob = p2
        else:
            keep_prob = 1.0
        child = plab if w <= keep_prob else DAG
        if child is ONLY_I:
            n_only_int += 1
            mu_count += 1
            mu_times.append(t)
            disc_times.append(t)
        elif child is ONLY_N:
            n_only_nl += 1
            mubar_count += 1
            mubar_times.append(t)
            disc_times.append(t)
        else:
            n_dag += 1
        imm_times.append(t)
        _spawn_as(push, spec, horizon, child, identity, node_hash, t)
        if record_forests and plab is ONLY_I:
            inter_forest.add(anc, identity[1:], t, child is ONLY_I)
        if record_forests and plab is ONLY_N:
            nl_forests[anc].add(anc, identity[1:], t, child is ONLY_N)
        if audit is not None:
            audit.append(
                (t, plab.name, child.name, 0,
                 n_only_int + n_only_nl + n_dag, len(disc_times))
            )

    return CoupledResult(
        n_ancestors=n_ancestors,
        horizon=horizon,
        eta=eta,
        lipschitz=lip,
        interacting_forest=inter_forest,
        nonlinear_forests=sorted(nl_forests.values(), key=lambda f: min(f.trees))
        if record_forests
        else None,
        mu_times=np.asarray(sorted(mu_times)),
        mubar_times=np.asarray(sorted(mubar_times)),
        imm_times=np.asarray(imm_times),
        disc_times=np.asarray(disc_times),
        n_both=n_both,
        n_only_interacting=n_only_int,
        n_only_nonlinear=n_only_nl,
        n_star=n_star,
        n_dagger=n_dag,
        tau_stop=tau_stop,
        audit=audit,
    )


def _spawn_as(push, spec, horizon, label: CouplingLabel, identity: tuple,
              node_hash: int, born: float):
    """Push the newborn particle's own offspring atoms under its identity."""
    st = Stream(fold(node_hash, _rng.TAG_ATOMS))
    for k, a in enumerate(sample_atoms(spec, horizon - born, st), start=1):
        push(born + a, label, identity + (k,), fold(node_hash, k))


@dataclass(frozen=True)
class DominationReport:
    precondition_lhs: float  # L * certified Prohorov bound at the horizon
    eta: float
    precondition_ok: bool
    first_violation: Optional[float]  # event time of the first disc > imm, if any
    checked_events: int

    @property
    def certified(self) -> bool:
        return self.first_violation is None


def check_domination(
    result: CoupledResult, sol: PdeSolution, eps_grid: float = 1e-3
) -> DominationReport:
    """Scan every event time for discrepancy(t) <= I(t); verify the precondition.

    The precondition uses the certified upper bound on the Prohorov
    distance, which makes the reported event conservative: whenever
    `precondition_ok` is true the exact condition holds as well.
    """
    snapshot = age_snapshot(sol, result.horizon)
    dhat = prohorov_upper(result.nonlinear_measure(result.horizon), snapshot, eps_grid)
    lhs = result.lipschitz * dhat
    first_violation = None
    if result.disc_times.size:
        i_counts = np.searchsorted(result.imm_times, result.disc_times, side="right")
        d_counts = np.arange(1, result.disc_times.size + 1)
        bad = np.nonzero(d_counts > i_counts)[0]
        if bad.size:
            first_violation = float(result.disc_times[bad[0]])
    return DominationReport(
        precondition_lhs=lhs,
        eta=result.eta,
        precondition_ok=lhs < result.eta,
        first_violation=first_violation,
        checked_events=int(result.disc_times.size),
    )
