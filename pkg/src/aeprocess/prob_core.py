"""Finite filtered probability spaces represented as outcome trees.

A tree of depth ``T`` carries the filtration: the information available at
time ``n`` is the identity of the level-``n`` node on the realised path.
Level 0 may hold several nodes, which gives a non-trivial initial
sigma-algebra (needed for processes whose first value is already random).

Measures are branch-probability assignments on one shared topology, so
stopping times and adaptedness do not depend on the measure.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

ATOL = 1e-12
DEFAULT_ENUMERATION_CAP = 10**6


class MalformedTreeError(ValueError):
    pass


class MeasureError(ValueError):
    pass


class EnumerationLimitError(RuntimeError):
    pass


class OutcomeTree:
    """Immutable level-ordered tree (or forest of level-0 roots).

    ``children[i]`` lists the ids of the children of node ``i``. Ids must be
    assigned level by level; every leaf sits at the last level.
    """

    def __init__(self, children: Sequence[Sequence[int]]):
        kids = tuple(tuple(int(c) for c in ch) for ch in children)
        n_nodes = len(kids)
        if n_nodes == 0:
            raise MalformedTreeError("tree has no nodes")
        parent = np.full(n_nodes, -1, dtype=np.int64)
        for i, ch in enumerate(kids):
            for c in ch:
                if not 0 <= c < n_nodes:
                    raise MalformedTreeError(f"node {i} has out-of-range child {c}")
                if c <= i:
                    raise MalformedTreeError(f"child {c} of node {i} is not level-ordered")
                if parent[c] != -1:
                    raise MalformedTreeError(f"node {c} has two parents ({parent[c]} and {i})")
                parent[c] = i
        roots = np.flatnonzero(parent == -1)
        if not np.array_equal(roots, np.arange(len(roots))):
            raise MalformedTreeError("root nodes must carry the smallest ids")

        level = np.zeros(n_nodes, dtype=np.int64)
        for i in range(len(roots), n_nodes):
            level[i] = level[parent[i]] + 1
        if np.any(np.diff(level) < 0):
            raise MalformedTreeError("node ids are not level-ordered")
        depth = int(level[-1])
        for i, ch in enumerate(kids):
            if not ch and level[i] != depth:
                raise MalformedTreeError(f"leaf {i} at level {level[i]} < depth {depth}")

        self.children = kids
        self.parent = parent
        self.level = level
        self.depth = depth
        self.n_nodes = n_nodes
        bounds = np.searchsorted(level, np.arange(depth + 2))
        self._slices = tuple(slice(int(bounds[n]), int(bounds[n + 1])) for n in range(depth + 1))
        self.parent.setflags(write=False)
        self.level.setflags(write=False)

    def __repr__(self) -> str:
        sizes = [s.stop - s.start for s in self._slices]
        return f"OutcomeTree(depth={self.depth}, level_sizes={sizes})"

    @property
    def roots(self) -> range:
        return range(self._slices[0].stop)

    def level_slice(self, n: int) -> slice:
        if not 0 <= n <= self.depth:
            raise IndexError(f"level {n} outside 0..{self.depth}")
        return self._slices[n]

    def level_nodes(self, n: int) -> np.ndarray:
        s = self.level_slice(n)
        return np.arange(s.start, s.stop)

    def level_size(self, n: int) -> int:
        s = self.level_slice(n)
        return s.stop - s.start

    def ancestor(self, node: int, n: int) -> int:
        """Ancestor of ``node`` at level ``n`` (the node itself if on level n)."""
        if n > self.level[node]:
            raise ValueError(f"level {n} is below node {node}")
        while self.level[node] > n:
            node = int(self.parent[node])
        return node

    def ancestor_map(self, n: int, k: int) -> np.ndarray:
        """For each level-``k`` node, the index (within level ``n``) of its ancestor."""
        if n > k:
            raise ValueError("ancestor level must not exceed descendant level")
        idx = self.level_nodes(k)
        for _ in range(k - n):
            idx = self.parent[idx]
        return idx - self.level_slice(n).start

    def parent_index(self, n: int) -> np.ndarray:
        """Index within level ``n`` of the parent of every level ``n+1`` node."""
        return self.ancestor_map(n, n + 1)

    def path(self, node: int) -> list[int]:
        out = [int(node)]
        while self.parent[out[-1]] != -1:
            out.append(int(self.parent[out[-1]]))
        return out[::-1]

    def to_children_lists(self) -> list[list[int]]:
        return [list(ch) for ch in self.children]


def build_tree(branching: Sequence[int] | Sequence[Sequence[int]], roots: int = 1) -> OutcomeTree:
    """Build a tree from per-level child counts or from explicit child lists.

    ``build_tree([2, 2])`` is a binary tree of depth 2. A list of lists is
    taken as explicit children per node id.
    """
    branching = list(branching)
    if branching and isinstance(branching[0], (list, tuple)):
        return OutcomeTree(branching)
    if roots < 1:
        raise MalformedTreeError("need at least one root")
    children: list[list[int]] = [[] for _ in range(roots)]
    frontier = list(range(roots))
    next_id = roots
    for n, count in enumerate(branching):
        if int(count) < 1:
            raise MalformedTreeError(f"level {n} has child count {count}")
        new_frontier = []
        for node in frontier:
            ids = list(range(next_id, next_id + int(count)))
            next_id += int(count)
            children[node] = ids
            children.extend([] for _ in ids)
            new_frontier.extend(ids)
        frontier = new_frontier
    return OutcomeTree(children)


class MeasureFamily:
    """Finite family of measures on one tree.

    ``probs[j, i]`` is the probability under measure ``j`` of moving from the
    parent of node ``i`` to ``i``; for level-0 nodes it is the initial mass.
    A node the measure never reaches may have all-zero outgoing branches.
    """

    def __init__(self, tree: OutcomeTree, probs, labels: Sequence[str] | None = None):
        probs = np.atleast_2d(np.asarray(probs, dtype=float))
        if probs.shape[1] != tree.n_nodes:
            raise MeasureError(f"expected {tree.n_nodes} probabilities per measure, got {probs.shape[1]}")
        if labels is None:
            labels = [f"P{j}" for j in range(probs.shape[0])]
        labels = tuple(str(x) for x in labels)
        if len(labels) != probs.shape[0]:
            raise MeasureError("one label per measure required")
        if np.any(~np.isfinite(probs)) or np.any(probs < 0):
            raise MeasureError("branch probabilities must be finite and nonnegative")
        for j in range(probs.shape[0]):
            root_mass = probs[j, tree.level_slice(0)].sum()
            if abs(root_mass - 1.0) > ATOL:
                raise MeasureError(f"measure {labels[j]}: initial masses sum to {root_mass!r}")
            reach = probs[j].copy()
            for i, ch in enumerate(tree.children):
                if ch:
                    reach[list(ch)] *= reach[i]
                    s = probs[j, list(ch)].sum()
                    if s == 0.0 and reach[i] == 0.0:
                        continue
                    if abs(s - 1.0) > ATOL:
                        raise MeasureError(f"measure {labels[j]}: branches out of node {i} sum to {s!r}")
        self.tree = tree
        self.probs = probs
        self.probs.setflags(write=False)
        self.labels = labels
        self._path = self._path_probabilities()

    @classmethod
    def uniform(cls, tree: OutcomeTree, label: str = "uniform") -> "MeasureFamily":
        probs = np.zeros(tree.n_nodes)
        probs[tree.level_slice(0)] = 1.0 / tree.level_size(0)
        for ch in tree.children:
            if ch:
                probs[list(ch)] = 1.0 / len(ch)
        return cls(tree, probs[None, :], [label])

    def __len__(self) -> int:
        return self.probs.shape[0]

    def _path_probabilities(self) -> np.ndarray:
        tree = self.tree
        pp = np.array(self.probs, dtype=float)
        for n in range(tree.depth):
            s = tree.level_slice(n + 1)
            pp[:, s] = pp[:, tree.parent[s.start:s.stop]] * self.probs[:, s]
        pp.setflags(write=False)
        return pp

    def path_probabilities(self, j: int) -> np.ndarray:
        """Probability of reaching every node under measure ``j``."""
        return self._path[j]

    def index(self, measure: int | str) -> int:
        if isinstance(measure, str):
            return self.labels.index(measure)
        if not 0 <= measure < len(self):
            raise IndexError(f"measure index {measure} out of range")
        return int(measure)


@dataclass(frozen=True, eq=False)
class TreeProcess:
    """One real value per node: an adapted process on ``tree``."""

    tree: OutcomeTree
    values: np.ndarray
    nonnegative: bool = False
    name: str = ""

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        if vals.shape[0] != self.tree.n_nodes:
            raise ValueError(f"process has {vals.shape[0]} values for {self.tree.n_nodes} nodes")
        if np.any(np.isnan(vals)):
            raise ValueError("process values must not be NaN")
        if self.nonnegative and np.any(vals < 0):
            bad = int(np.flatnonzero(vals < 0)[0])
            raise ValueError(f"negative value {vals[bad]} at node {bad} in a nonnegative process")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_levels(cls, tree: OutcomeTree, levels: Sequence[Sequence[float]], **kw) -> "TreeProcess":
        if len(levels) != tree.depth + 1:
            raise ValueError(f"expected {tree.depth + 1} levels, got {len(levels)}")
        vals = np.empty(tree.n_nodes)
        for n, row in enumerate(levels):
            row = np.asarray(row, dtype=float)
            if row.shape != (tree.level_size(n),):
                raise ValueError(f"level {n}: expected {tree.level_size(n)} values, got {row.shape}")
            vals[tree.level_slice(n)] = row
        return cls(tree, vals, **kw)

    @classmethod
    def constant(cls, tree: OutcomeTree, c: float, **kw) -> "TreeProcess":
        return cls(tree, np.full(tree.n_nodes, float(c)), **kw)

    @property
    def depth(self) -> int:
        return self.tree.depth

    def level(self, n: int) -> np.ndarray:
        return self.values[self.tree.level_slice(n)]

    def levels(self) -> list[list[float]]:
        return [self.level(n).tolist() for n in range(self.depth + 1)]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


@dataclass(frozen=True)
class HorizonSequence:
    """Extended-integer horizons ``r_m``; ``math.inf`` marks an unbounded horizon."""

    ms: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.ms) != len(self.values):
            raise ValueError("ms and values differ in length")
        for r in self.values:
            if not (r == math.inf or (float(r).is_integer() and r >= 0)):
                raise ValueError(f"horizon entry {r!r} is not an extended nonnegative integer")

    def __getitem__(self, m: int) -> float:
        return self.values[self.ms.index(m)]

    def finite(self, m: int, depth: int) -> int:
        """Horizon for row ``m`` on a tree of the given depth (inf maps to the depth)."""
        r = self[m]
        return depth if r == math.inf else int(r)


@dataclass(frozen=True)
class DriftSequence:
    ms: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.ms) != len(self.values):
            raise ValueError("ms and values differ in length")
        if any(not v >= 0 for v in self.values):
            raise ValueError("drift entries must be nonnegative")

    @classmethod
    def from_rule(cls, ms: Iterable[int], rule) -> "DriftSequence":
        ms = tuple(int(m) for m in ms)
        return cls(ms, tuple(float(rule(m)) for m in ms))

    def __getitem__(self, m: int) -> float:
        return self.values[self.ms.index(m)]


@dataclass(frozen=True, eq=False)
class BiProcess:
    """Rows ``E_{m,.}`` with the measure family each row lives on.

    ``ms`` labels the rows (contiguous from 0 unless given explicitly).
    """

    rows: tuple[TreeProcess, ...]
    families: tuple[MeasureFamily, ...]
    ms: tuple[int, ...] = ()
    drift: DriftSequence | None = None
    horizon: HorizonSequence | None = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        object.__setattr__(self, "families", tuple(self.families))
        if len(self.rows) != len(self.families):
            raise ValueError("one measure family per row required")
        if not self.ms:
            object.__setattr__(self, "ms", tuple(range(len(self.rows))))
        if len(self.ms) != len(self.rows):
            raise ValueError("one m label per row required")
        for row, fam in zip(self.rows, self.families):
            if row.tree is not fam.tree:
                raise ValueError("row and measure family must share a tree")
        if self.horizon is not None:
            for m, row in zip(self.ms, self.rows):
                r = self.horizon[m]
                if r != math.inf and r > row.depth:
                    raise ValueError(f"horizon r_{m}={r} exceeds row depth {row.depth}")

    def __len__(self) -> int:
        return len(self.rows)

    def row(self, m: int) -> tuple[TreeProcess, MeasureFamily]:
        i = self.ms.index(m)
        return self.rows[i], self.families[i]


@dataclass(frozen=True)
class StoppingTime:
    """Prefix-free, exhaustive set of stop nodes, all at level <= ``horizon``."""

    stops: frozenset
    horizon: int

    def validate(self, tree: OutcomeTree) -> None:
        if self.horizon > tree.depth:
            raise ValueError(f"horizon {self.horizon} exceeds tree depth {tree.depth}")
        for node in self.stops:
            if tree.level[node] > self.horizon:
                raise ValueError(f"stop node {node} lies beyond horizon {self.horizon}")
        for leaf in tree.level_nodes(self.horizon):
            hits = [v for v in tree.path(int(leaf)) if v in self.stops]
            if len(hits) != 1:
                raise ValueError(f"path to node {leaf} meets {len(hits)} stop nodes")

    def value_at(self, tree: OutcomeTree, node: int) -> int:
        """Stopping level on the path through ``node`` (at level >= horizon)."""
        for v in tree.path(tree.ancestor(node, min(self.horizon, int(tree.level[node])))):
            if v in self.stops:
                return int(tree.level[v])
        raise ValueError("stopping time does not cover this path")

    def to_json(self) -> dict:
        return {"horizon": self.horizon, "stops": sorted(int(s) for s in self.stops)}

    @classmethod
    def constant(cls, tree: OutcomeTree, n: int) -> "StoppingTime":
        return cls(frozenset(int(v) for v in tree.level_nodes(n)), n)


def _check_level(tree: OutcomeTree, n: int) -> None:
    if not 0 <= n <= tree.depth:
        raise IndexError(f"level {n} outside 0..{tree.depth}")


def expectation(family: MeasureFamily, measure: int | str, X: TreeProcess, n: int) -> float:
    """``E_P[X_n]``: path-probability weighted sum over level ``n``."""
    _check_level(family.tree, n)
    j = family.index(measure)
    s = family.tree.level_slice(n)
    pp = family.path_probabilities(j)[s]
    x = X.level(n)
    mask = pp > 0
    return float(np.dot(pp[mask], x[mask]))


def conditional_expectation(family: MeasureFamily, measure: int | str, X: TreeProcess, n: int,
                            with_flags: bool = False):
    """``E_P[X_{n+1} | F_n]`` as values on the level-``n`` nodes.

    Nodes whose outgoing branches all carry zero mass get the plain average
    of their children; ``with_flags=True`` also returns a mask of those nodes.
    """
    tree = family.tree
    if not 0 <= n < tree.depth:
        raise IndexError(f"conditioning level {n} outside 0..{tree.depth - 1}")
    j = family.index(measure)
    s1 = tree.level_slice(n + 1)
    w = family.probs[j, s1]
    x = X.level(n + 1)
    pidx = tree.parent_index(n)
    size = tree.level_size(n)
    mass = np.bincount(pidx, weights=w, minlength=size)
    # zero-probability children never contribute, even when infinite
    wx = np.where(w > 0, w * np.where(w > 0, x, 0.0), 0.0)
    num = np.bincount(pidx, weights=wx, minlength=size)
    degenerate = mass <= 0
    out = np.empty(size)
    out[~degenerate] = num[~degenerate] / mass[~degenerate]
    if np.any(degenerate):
        counts = np.bincount(pidx, minlength=size)
        plain = np.bincount(pidx, weights=x, minlength=size)
        out[degenerate] = plain[degenerate] / counts[degenerate]
    if with_flags:
        return out, degenerate
    return out


def count_stopping_times(tree: OutcomeTree, rho: int) -> int:
    """Number of stopping times bounded by ``rho``: N = 1 + prod N(child)."""
    if not 0 <= rho <= tree.depth:
        raise ValueError(f"horizon {rho} outside 0..{tree.depth}")
    counts = {int(v): 1 for v in tree.level_nodes(rho)}
    for n in range(rho - 1, -1, -1):
        for v in tree.level_nodes(n):
            counts[int(v)] = 1 + math.prod(counts[c] for c in tree.children[v])
    return math.prod(counts[r] for r in tree.roots)


def iter_stopping_times(tree: OutcomeTree, rho: int) -> Iterator[StoppingTime]:
    if not 0 <= rho <= tree.depth:
        raise ValueError(f"horizon {rho} outside 0..{tree.depth}")

    def options(v: int) -> list[tuple[int, ...]]:
        if tree.level[v] == rho:
            return [(v,)]
        out = [(v,)]
        for combo in itertools.product(*(options(c) for c in tree.children[v])):
            out.append(tuple(itertools.chain.from_iterable(combo)))
        return out

    for combo in itertools.product(*(options(r) for r in tree.roots)):
        yield StoppingTime(frozenset(itertools.chain.from_iterable(combo)), rho)


def enumerate_stopping_times(tree: OutcomeTree, rho: int,
                             cap: int = DEFAULT_ENUMERATION_CAP) -> list[StoppingTime]:
    """Every stopping time with values in ``0..rho``, each exactly once."""
    total = count_stopping_times(tree, rho)
    if total > cap:
        raise EnumerationLimitError(f"{total} stopping times exceed the enumeration cap {cap}")
    return list(iter_stopping_times(tree, rho))


def stopping_matrix(tree: OutcomeTree, taus: Sequence[StoppingTime]) -> np.ndarray:
    """0/1 matrix with one row per stopping time marking its stop nodes."""
    S = np.zeros((len(taus), tree.n_nodes))
    for k, tau in enumerate(taus):
        S[k, list(tau.stops)] = 1.0
    return S


def stopped_expectation(family: MeasureFamily, measure: int | str, X: TreeProcess,
                        tau: StoppingTime) -> float:
    """``E_P[X_tau]``."""
    if tau.horizon > X.depth:
        raise ValueError(f"stopping horizon {tau.horizon} exceeds process depth {X.depth}")
    j = family.index(measure)
    idx = np.fromiter(tau.stops, dtype=np.int64)
    if np.any(family.tree.level[idx] > X.depth):
        raise ValueError("stop node beyond process depth")
    pp = family.path_probabilities(j)[idx]
    x = X.values[idx]
    mask = pp > 0
    return float(np.dot(pp[mask], x[mask]))


def stopped_expectations(family: MeasureFamily, X: TreeProcess, taus: Sequence[StoppingTime],
                         S: np.ndarray | None = None) -> np.ndarray:
    """Matrix of ``E_P[X_tau]`` with shape (measures, stopping times)."""
    if S is None:
        S = stopping_matrix(family.tree, taus)
    out = np.empty((len(family), S.shape[0]))
    for j in range(len(family)):
        pp = family.path_probabilities(j)
        mask = pp > 0
        contrib = np.zeros(family.tree.n_nodes)
        contrib[mask] = pp[mask] * X.values[mask]
        if np.any(np.isinf(contrib)):
            hit = S[:, np.isinf(contrib)].any(axis=1)
            finite = np.where(np.isinf(contrib), 0.0, contrib)
            out[j] = S @ finite
            out[j, hit] = math.inf
        else:
            out[j] = S @ contrib
    return out


# --- JSON bundle -----------------------------------------------------------

@dataclass
class Bundle:
    tree: OutcomeTree
    family: MeasureFamily
    processes: dict[str, TreeProcess]
    extra: dict = field(default_factory=dict)


def bundle_to_dict(bundle: Bundle) -> dict:
    doc = {
        "depth": bundle.tree.depth,
        "children": bundle.tree.to_children_lists(),
        "measures": [{"label": lab, "probs": bundle.family.probs[j].tolist()}
                     for j, lab in enumerate(bundle.family.labels)],
        "processes": [{"name": name, "values": p.levels()} for name, p in bundle.processes.items()],
    }
    doc.update(bundle.extra)
    return doc


def bundle_from_dict(doc: dict) -> Bundle:
    tree = OutcomeTree(doc["children"])
    if "depth" in doc and int(doc["depth"]) != tree.depth:
        raise MalformedTreeError(f"declared depth {doc['depth']} but children give {tree.depth}")
    measures = doc.get("measures") or []
    if measures:
        family = MeasureFamily(tree, [m["probs"] for m in measures], [m["label"] for m in measures])
    else:
        family = MeasureFamily.uniform(tree)
    procs = {}
    for k, p in enumerate(doc.get("processes", [])):
        name = p.get("name", f"X{k}")
        procs[name] = TreeProcess.from_levels(tree, p["values"], name=name)
    extra = {k: v for k, v in doc.items() if k not in ("depth", "children", "measures", "processes")}
    return Bundle(tree, family, procs, extra)


def write_bundle(bundle: Bundle, path: str | Path) -> None:
    Path(path).write_text(json.dumps(bundle_to_dict(bundle), indent=1) + "\n")


def read_bundle(path: str | Path) -> Bundle:
    return bundle_from_dict(json.loads(Path(path).read_text()))


def l1_distance(family: MeasureFamily, measure: int | str, X: TreeProcess, Y: TreeProcess, n: int) -> float:
    """``E_P|X_n - Y_n|`` for two processes on the same tree."""
    if X.tree is not Y.tree:
        raise ValueError("processes live on different trees")
    diff = TreeProcess(X.tree, np.abs(X.values - Y.values))
    return expectation(family, measure, diff, n)
