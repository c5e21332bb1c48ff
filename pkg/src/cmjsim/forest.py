"""Labeled forests: birth times indexed by integer-word genealogy labels.

A node is addressed by (ancestor index, label), where the label is a
tuple of positive child indices relative to that ancestor -- the empty
tuple is the ancestor itself and prefixes are ancestors.  Children are
numbered in increasing order of birth time among the inspected
potential births, so the numbering is stable across runs driven by the
same noise.

Potential births that were thinned stay in the structure with status
``pruned`` and their inspection time; on export the canonical "removed
means infinite birth time" view is written alongside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

Label = tuple  # tuple[int, ...]; empty = the ancestor


@dataclass
class Forest:
    horizon: float
    n_ancestors: int
    trees: dict = field(default_factory=dict)  # anc -> {label: (time, kept)}

    def ensure_tree(self, anc: int) -> dict:
        tree = self.trees.get(anc)
        if tree is None:
            tree = {}
            self.trees[anc] = tree
        return tree

    def add(self, anc: int, label: Label, time: float, kept: bool) -> None:
        self.ensure_tree(anc)[label] = (time, kept)

    def node(self, anc: int, label: Label) -> tuple:
        return self.trees[anc][label]

    def has(self, anc: int, label: Label) -> bool:
        return anc in self.trees and label in self.trees[anc]

    def iter_nodes(self) -> Iterator[tuple]:
        for anc in sorted(self.trees):
            tree = self.trees[anc]
            for label in sorted(tree):
                t, kept = tree[label]
                yield anc, label, t, kept

    @property
    def n_nodes(self) -> int:
        return sum(len(t) for t in self.trees.values())

    def kept_birth_times(self) -> list:
        return sorted(t for tree in self.trees.values() for (t, kept) in tree.values() if kept)

    def kept_count(self, t: float | None = None) -> int:
        if t is None:
            return sum(1 for tree in self.trees.values() for (_, kept) in tree.values() if kept)
        return sum(
            1
            for tree in self.trees.values()
            for (tt, kept) in tree.values()
            if kept and tt <= t
        )


def truncate(forest: Forest, generations: int, time_bound: float) -> Forest:
    """Restrict to labels of generation <= `generations` and birth time <= `time_bound`.

    The ancestor has generation 0.  Deterministic, idempotent, and
    commuting in its two arguments.
    """
    out = Forest(horizon=min(forest.horizon, time_bound), n_ancestors=forest.n_ancestors)
    for anc, tree in forest.trees.items():
        dst = out.ensure_tree(anc)
        for label, (t, kept) in tree.items():
            if len(label) <= generations and t <= time_bound:
                dst[label] = (t, kept)
    return out


def birth_chain(forest: Forest, anc: int, label: Label) -> list:
    """Birth times from the node back to its ancestor (last element <= 0).

    Only defined for kept nodes; every prefix of a kept node is kept.
    """
    if not forest.has(anc, label):
        raise KeyError(f"node {anc}:{label} not present")
    t, kept = forest.node(anc, label)
    if not kept:
        raise KeyError(f"node {anc}:{label} was pruned")
    times = []
    for k in range(len(label), -1, -1):
        tt, kk = forest.node(anc, label[:k])
        if not kk:
            raise KeyError(f"ancestor {anc}:{label[:k]} of a kept node is pruned")
        times.append(tt)
    return times


def local_distance(tree1: Forest, tree2: Forest, generations: int, time_bound: float) -> bool:
    """Exact equality of the two single trees after truncation.

    True means the truncations agree node-for-node, including times and
    statuses; ancestor indices are ignored (each tree is re-rooted).
    """
    for f in (tree1, tree2):
        if len(f.trees) != 1:
            raise ValueError("local comparison expects single-ancestor forests")
    d1 = _rerooted(truncate(tree1, generations, time_bound))
    d2 = _rerooted(truncate(tree2, generations, time_bound))
    return d1 == d2


def _rerooted(forest: Forest) -> dict:
    (tree,) = forest.trees.values()
    return dict(tree)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_HEADER = "ancestor\tpath\tsigma\tstatus\tinspected"


def write_forest(forest: Forest, path) -> None:
    """Newline-delimited node rows.

    Columns: ancestor index, dot-separated label path (empty for the
    ancestor), birth time with pruned nodes shown as "inf", status, and
    the inspection time (equal to sigma for kept nodes; kept so a
    read-back reproduces the structure exactly).
    """
    with open(path, "w") as fh:
        fh.write(f"# horizon={forest.horizon!r} n_ancestors={forest.n_ancestors}\n")
        fh.write(_HEADER + "\n")
        for anc, label, t, kept in forest.iter_nodes():
            p = ".".join(str(c) for c in label)
            sigma = repr(float(t)) if kept else "inf"
            status = "kept" if kept else "pruned"
            fh.write(f"{anc}\t{p}\t{sigma}\t{status}\t{float(t)!r}\n")


def read_forest(path) -> Forest:
    with open(path) as fh:
        meta = fh.readline().strip()
        if not meta.startswith("#"):
            raise ValueError("missing forest header line")
        parts = dict(kv.split("=") for kv in meta[1:].split())
        horizon = float(parts["horizon"])
        n_anc = int(parts["n_ancestors"])
        header = fh.readline().strip()
        if header != _HEADER:
            raise ValueError("unexpected column header")
        out = Forest(horizon=horizon, n_ancestors=n_anc)
        for line in fh:
            anc_s, p, sigma, status, inspected = line.rstrip("\n").split("\t")
            label = tuple(int(c) for c in p.split(".")) if p else ()
            out.add(int(anc_s), label, float(inspected), status == "kept")
    return out
