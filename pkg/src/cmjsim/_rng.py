"""Counter-based random streams keyed by tree-node labels.

Every individual in a simulated forest owns independent uniform streams
derived by hashing (master seed, node label, stream tag).  Because the
noise is addressed by *who* uses it rather than by draw order, two
simulations driven by the same master seed see identical per-node
randomness even when they inspect events in different orders.  This is
what makes pathwise domination checks and shared-noise couplings exact.

The generator is a splitmix64 counter stream: cheap to fork (one hash
per label component), no state to carry around, and statistically solid
for the moment/χ² style checks used in the test-suite.
"""

from __future__ import annotations

import math

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# stream tags: which purpose a node's sub-stream serves
TAG_OMEGA = 1  # the node's thinning / immigration uniform
TAG_ATOMS = 2  # the node's reproduction point-process stream
TAG_INIT = 3  # initial-age draw (roots only)

# namespace components for particles outside the plain forest skeleton
STAR_MARK = -101
DAG_MARK = -102
DOMAIN_FOREST = 11
DOMAIN_IMMIGRATION = 12
DOMAIN_CHAIN = 13
DOMAIN_MISC = 14


def _mix(z: int) -> int:
    """splitmix64 finalizer (64-bit avalanche)."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def fold(h: int, component: int) -> int:
    """Absorb one integer component into a running key hash."""
    return _mix(h ^ ((component & _MASK) * _GOLDEN & _MASK))


def master_hash(seed: int, domain: int = DOMAIN_FOREST) -> int:
    """Root hash for one simulation; `domain` separates module namespaces."""
    return fold(_mix((seed & _MASK) ^ 0x6A09E667F3BCC908), domain)


def replicate_seed(master_seed: int, replicate: int) -> int:
    """Per-replicate seed derived from a master seed (counter scheme)."""
    return fold(_mix((master_seed & _MASK) ^ 0xBB67AE8584CAA73B), replicate)


def key_hash(base: int, path: tuple, tag: int) -> int:
    """Hash of one node's sub-stream: base hash + label path + tag."""
    h = base
    for c in path:
        h = fold(h, c)
    return fold(h, tag)


_INV53 = 1.0 / 9007199254740992.0  # 2^-53


def unit_uniform(h: int) -> float:
    """Single uniform in the open interval (0, 1) for a key hash."""
    return ((_mix((h + _GOLDEN) & _MASK) >> 11) + 0.5) * _INV53


class Stream:
    """Deterministic uniform stream for one key hash."""

    __slots__ = ("_h", "_n")

    def __init__(self, h: int):
        self._h = h & _MASK
        self._n = 0

    def u(self) -> float:
        """Next uniform in (0, 1)."""
        self._n += 1
        z = _mix((self._h + self._n * _GOLDEN) & _MASK)
        return ((z >> 11) + 0.5) * _INV53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.u()

    def exponential(self, rate: float) -> float:
        return -math.log(self.u()) / rate

    def poisson(self, mean: float) -> int:
        """Exact Poisson count (Knuth product method, chunked for large means)."""
        n = 0
        while mean > 16.0:
            n += self._poisson_small(16.0)
            mean -= 16.0
        return n + self._poisson_small(mean)

    def _poisson_small(self, mean: float) -> int:
        if mean <= 0.0:
            return 0
        limit = math.exp(-mean)
        k = 0
        p = self.u()
        while p > limit:
            p *= self.u()
            k += 1
        return k
