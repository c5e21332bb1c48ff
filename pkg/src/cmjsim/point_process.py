"""Reproduction point processes and initial-age machinery.

A birth process describes the random ages at which one individual
produces offspring.  Three families are supported:

* ``PoissonIntensity`` -- Poisson process with a bounded rate density,
  sampled by thinning a homogeneous process at the stated sup bound;
* ``Renewal`` -- partial sums of i.i.d. positive inter-arrival times,
  optionally capped at a maximum offspring count;
* ``FiniteAtoms`` -- a fixed, strictly increasing list of ages.

Initial individuals are aged: an ancestor with sampled age ``A`` has
birth time ``-A`` and keeps only those reproduction atoms with age at
least ``A``, re-expressed as absolute (non-negative) calendar times.

All sampling takes an explicit seeded stream, so every operation is a
pure function of (spec, window, stream).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._rng import Stream
from .errors import ConfigError, ContractError, EventCapError

_ATOM_HARD_CAP = 10**7  # guards pathological renewal specs


def _strictify(atoms: list[float]) -> list[float]:
    """Break floating-point ties by nudging the later atom upward."""
    for i in range(1, len(atoms)):
        if atoms[i] <= atoms[i - 1]:
            atoms[i] = math.nextafter(atoms[i - 1], math.inf)
    return atoms


# ---------------------------------------------------------------------------
# rate densities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateDensity:
    """Bounded intensity density ``a -> tau(a)`` with a declared sup bound."""

    fn: Callable[[float], float]
    sup_bound: float
    vfn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "custom"
    constant_rate: Optional[float] = None  # set when tau is identically constant

    def __post_init__(self):
        if not math.isfinite(self.sup_bound) or self.sup_bound < 0:
            raise ConfigError("sup bound must be finite and >= 0", "tau.sup_bound")

    def __call__(self, a: float) -> float:
        return self.fn(a)

    def values(self, ages: np.ndarray) -> np.ndarray:
        if self.vfn is not None:
            return self.vfn(ages)
        return np.array([self.fn(float(a)) for a in ages], dtype=float)


def constant_intensity(rate: float) -> RateDensity:
    if rate < 0:
        raise ConfigError("rate must be >= 0", "tau.rate")
    r = float(rate)
    return RateDensity(
        fn=lambda a: r,
        vfn=lambda ages: np.full_like(np.asarray(ages, dtype=float), r),
        sup_bound=r,
        name="constant",
        constant_rate=r,
    )


def expdecay_intensity(scale: float, decay: float) -> RateDensity:
    """tau(a) = scale * exp(-decay * a); bounded by `scale`."""
    if scale < 0 or decay < 0:
        raise ConfigError("scale and decay must be >= 0", "tau")
    s, d = float(scale), float(decay)
    return RateDensity(
        fn=lambda a: s * math.exp(-d * a),
        vfn=lambda ages: s * np.exp(-d * np.asarray(ages, dtype=float)),
        sup_bound=s,
        name="expdecay",
    )


def table_intensity(ages: Sequence[float], values: Sequence[float]) -> RateDensity:
    """Piecewise-linear density through (age, value) points, zero beyond the last knot."""
    xs = np.asarray(ages, dtype=float)
    ys = np.asarray(values, dtype=float)
    if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2:
        raise ConfigError("table needs matching 1-d age/value columns", "tau.table")
    if np.any(np.diff(xs) <= 0):
        raise ConfigError("table ages must be strictly increasing", "tau.table")
    if np.any(ys < 0):
        raise ConfigError("table values must be >= 0", "tau.table")
    sup = float(ys.max())

    def fn(a: float) -> float:
        return float(np.interp(a, xs, ys, left=ys[0], right=0.0))

    def vfn(a: np.ndarray) -> np.ndarray:
        arr = np.asarray(a, dtype=float)
        out = np.interp(arr, xs, ys, left=ys[0], right=0.0)
        return out

    return RateDensity(fn=fn, vfn=vfn, sup_bound=sup, name="table")


# ---------------------------------------------------------------------------
# initial-age densities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InitialAgeDensity:
    """Probability density of ancestor ages on [0, a_max].

    ``mass`` is the exact integral of ``pdf`` over the support; it must
    equal 1 within 1e-8 (families are built so that any truncation tail
    is far below that tolerance).
    """

    pdf: Callable[[float], float]
    ppf: Callable[[float], float]
    a_max: float
    mass: float = 1.0
    name: str = "custom"
    vpdf: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if not (self.a_max > 0 and math.isfinite(self.a_max)):
            raise ConfigError("support bound must be finite and > 0", "g.a_max")
        if abs(self.mass - 1.0) > 1e-8:
            raise ConfigError(
                f"density integrates to {self.mass!r}, not 1 within 1e-8", "g"
            )

    def sample(self, stream: Stream) -> float:
        a = self.ppf(stream.u())
        if a < 0:
            raise ContractError(f"initial-age sampler returned negative age {a}")
        return a

    def pdf_values(self, ages: np.ndarray) -> np.ndarray:
        if self.vpdf is not None:
            return self.vpdf(ages)
        return np.array([self.pdf(float(a)) for a in ages], dtype=float)


def exponential_ages(rate: float = 1.0, tail_mass: float = 1e-9) -> InitialAgeDensity:
    """Exponential(rate) ages, truncated where the tail mass drops to `tail_mass`."""
    if rate <= 0:
        raise ConfigError("rate must be > 0", "g.rate")
    a_max = -math.log(tail_mass) / rate

    def ppf(u: float) -> float:
        return min(-math.log1p(-u) / rate, a_max)

    return InitialAgeDensity(
        pdf=lambda a: rate * math.exp(-rate * a) if 0 <= a <= a_max else 0.0,
        vpdf=lambda ages: np.where(
            (ages >= 0) & (ages <= a_max),
            rate * np.exp(-rate * np.asarray(ages, dtype=float)),
            0.0,
        ),
        ppf=ppf,
        a_max=a_max,
        mass=1.0 - tail_mass,
        name="exponential",
    )


def uniform_ages(lo: float, hi: float) -> InitialAgeDensity:
    if not (0 <= lo < hi):
        raise ConfigError("need 0 <= lo < hi", "g.uniform")
    h = 1.0 / (hi - lo)
    return InitialAgeDensity(
        pdf=lambda a: h if lo <= a <= hi else 0.0,
        vpdf=lambda ages: np.where(
            (np.asarray(ages) >= lo) & (np.asarray(ages) <= hi), h, 0.0
        ),
        ppf=lambda u: lo + (hi - lo) * u,
        a_max=hi,
        mass=1.0,
        name="uniform",
    )


def table_ages(ages: Sequence[float], values: Sequence[float]) -> InitialAgeDensity:
    """Piecewise-linear density from (age, value) points, normalized to mass 1.

    Sampling inverts a refined piecewise-linear CDF, so draws are exact up
    to a sub-knot interpolation error.
    """
    xs = np.asarray(ages, dtype=float)
    ys = np.asarray(values, dtype=float)
    if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2:
        raise ConfigError("table needs matching 1-d age/value columns", "g.table")
    if xs[0] < 0 or np.any(np.diff(xs) <= 0):
        raise ConfigError("table ages must be >= 0 and strictly increasing", "g.table")
    if np.any(ys < 0) or ys.max() <= 0:
        raise ConfigError("table values must be >= 0 with positive mass", "g.table")
    total = float(np.trapz(ys, xs))
    ys = ys / total
    # refined grid for CDF inversion
    fine = np.unique(np.concatenate([np.linspace(xs[0], xs[-1], 8 * xs.size), xs]))
    fvals = np.interp(fine, xs, ys)
    cdf = np.concatenate([[0.0], np.cumsum(np.diff(fine) * 0.5 * (fvals[1:] + fvals[:-1]))])
    cdf /= cdf[-1]

    def ppf(u: float) -> float:
        return float(np.interp(u, cdf, fine))

    return InitialAgeDensity(
        pdf=lambda a: float(np.interp(a, xs, ys, left=0.0, right=0.0)),
        vpdf=lambda a: np.interp(np.asarray(a, dtype=float), xs, ys, left=0.0, right=0.0),
        ppf=ppf,
        a_max=float(xs[-1]),
        mass=1.0,
        name="table",
    )


# ---------------------------------------------------------------------------
# inter-arrival distributions (renewal specs)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InterArrival:
    """Positive inter-arrival law given by its quantile function."""

    ppf: Callable[[float], float]
    name: str = "custom"


def exponential_interarrival(rate: float) -> InterArrival:
    if rate <= 0:
        raise ConfigError("rate must be > 0", "interarrival.rate")
    return InterArrival(ppf=lambda u: -math.log1p(-u) / rate, name="exponential")


def uniform_interarrival(lo: float, hi: float) -> InterArrival:
    if not (0 <= lo < hi):
        raise ConfigError("need 0 <= lo < hi", "interarrival.uniform")
    return InterArrival(ppf=lambda u: lo + (hi - lo) * u, name="uniform")


def fixed_interarrival(gap: float) -> InterArrival:
    if gap <= 0:
        raise ConfigError("gap must be > 0", "interarrival.gap")
    return InterArrival(ppf=lambda u: gap, name="fixed")


# ---------------------------------------------------------------------------
# birth process specs
# ---------------------------------------------------------------------------


class BirthProcessSpec:
    """Base class; see the three concrete families below."""

    kind = "abstract"

    @property
    def sup_bound(self) -> float:
        raise NotImplementedError


@dataclass(frozen=True)
class PoissonIntensity(BirthProcessSpec):
    intensity: RateDensity

    kind = "poisson"

    def __post_init__(self):
        # a zero sup bound is only consistent with a vanishing density
        if self.intensity.sup_bound == 0.0:
            probe = np.linspace(0.0, 64.0, 257)
            if np.any(self.intensity.values(probe) > 0):
                raise ConfigError(
                    "sup_bound is 0 but the intensity is not identically 0",
                    "birth_process.poisson",
                )

    @property
    def sup_bound(self) -> float:
        return self.intensity.sup_bound


@dataclass(frozen=True)
class Renewal(BirthProcessSpec):
    interarrival: InterArrival
    max_births: Optional[int] = None
    declared_sup: float = math.nan  # renewal density bound, when the caller knows it

    kind = "renewal"

    def __post_init__(self):
        if self.max_births is not None and self.max_births < 0:
            raise ConfigError("max_births must be >= 0", "birth_process.renewal")

    @property
    def sup_bound(self) -> float:
        return self.declared_sup


@dataclass(frozen=True)
class FiniteAtoms(BirthProcessSpec):
    ages: tuple[float, ...]

    kind = "finite_atoms"

    def __post_init__(self):
        arr = np.asarray(self.ages, dtype=float)
        if arr.size and (np.any(arr <= 0) or np.any(np.diff(arr) <= 0)):
            raise ConfigError(
                "atom ages must be positive and strictly increasing",
                "birth_process.finite_atoms",
            )

    @property
    def sup_bound(self) -> float:
        return 0.0


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_atoms(spec: BirthProcessSpec, horizon: float, stream: Stream) -> list[float]:
    """One realization of the reproduction ages restricted to [0, horizon).

    The returned list is strictly increasing; exact float ties (probability
    zero in the model) are broken by a one-ulp nudge of the later atom.
    """
    if not math.isfinite(horizon):
        raise ConfigError("sampling window must be finite", "horizon")
    if horizon <= 0:
        return []
    if isinstance(spec, FiniteAtoms):
        return [a for a in spec.ages if a < horizon]
    if isinstance(spec, Renewal):
        return _renewal_atoms(spec, horizon, stream)
    if isinstance(spec, PoissonIntensity):
        return _poisson_atoms(spec.intensity, horizon, stream)
    raise ConfigError(f"unknown birth process {type(spec).__name__}", "birth_process")


def _renewal_atoms(spec: Renewal, horizon: float, stream: Stream) -> list[float]:
    atoms: list[float] = []
    s = 0.0
    limit = spec.max_births if spec.max_births is not None else _ATOM_HARD_CAP
    while len(atoms) < limit:
        s += spec.interarrival.ppf(stream.u())
        if s >= horizon:
            break
        atoms.append(s)
        if len(atoms) >= _ATOM_HARD_CAP:
            raise EventCapError(
                f"renewal spec produced more than {_ATOM_HARD_CAP} atoms in one window"
            )
    return _strictify(atoms)


def _poisson_atoms(intensity: RateDensity, horizon: float, stream: Stream) -> list[float]:
    """Thinning against the homogeneous envelope at rate `sup_bound`."""
    sup = intensity.sup_bound
    if sup == 0.0:
        return []
    if sup * horizon > _ATOM_HARD_CAP:
        raise ConfigError(
            "expected atom count exceeds the hard cap; reduce window or rate",
            "birth_process.poisson",
        )
    no_thinning = intensity.constant_rate is not None and intensity.constant_rate == sup
    atoms: list[float] = []
    chunk = 16.0 / sup  # keeps each Poisson mean small for the exact sampler
    start = 0.0
    fn = intensity.fn
    while start < horizon:
        end = min(horizon, start + chunk)
        width = end - start
        n = stream.poisson(sup * width)
        for _ in range(n):
            x = start + width * stream.u()
            if no_thinning:
                atoms.append(x)
                continue
            v = fn(x)
            if v < 0 or v > sup * (1 + 1e-12):
                raise ContractError(
                    f"intensity value {v} at age {x} escapes [0, sup_bound={sup}]"
                )
            if stream.u() * sup <= v:
                atoms.append(x)
        start = end
    atoms.sort()
    return _strictify(atoms)


def censor_initial_atoms(age: float, atoms: Sequence[float], horizon: float) -> list[float]:
    """Atoms surviving the initial-age censoring, as absolute times.

    Keeps ``a - age`` for every atom ``a >= age`` with ``a - age < horizon``;
    atoms earlier than the sampled age would correspond to births before
    time zero and are removed.
    """
    out = [a - age for a in atoms if a >= age and a - age < horizon]
    return _strictify(out)


def initial_pair(
    ages: InitialAgeDensity,
    spec: BirthProcessSpec,
    horizon: float,
    stream: Stream,
) -> tuple[float, list[float]]:
    """Sample one ancestor: (birth time <= 0, censored atoms at absolute times)."""
    if not (horizon > 0 and math.isfinite(horizon)):
        raise ConfigError("horizon must be finite and > 0", "horizon")
    a0 = ages.sample(stream)
    raw = sample_atoms(spec, a0 + horizon, stream)
    return -a0, censor_initial_atoms(a0, raw, horizon)
