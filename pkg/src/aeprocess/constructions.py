"""Builders for candidate asymptotic e-processes.

Cumulative products, the diagonal product, time mixtures, horizons chosen
from a drift bound, and the calibration of anytime p-values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .prob_core import (
    ATOL,
    BiProcess,
    DriftSequence,
    HorizonSequence,
    MeasureFamily,
    OutcomeTree,
    TreeProcess,
    conditional_expectation,
    expectation,
)
from .verifier import trend_verdict


class WeightError(ValueError):
    pass


# --- products ---------------------------------------------------------------

def cumulative_product(factors: TreeProcess) -> TreeProcess:
    """``E_n = e_0 * ... * e_n`` along every path."""
    if np.any(factors.values < 0):
        bad = int(np.flatnonzero(factors.values < 0)[0])
        raise ValueError(f"negative factor {factors.values[bad]} at node {bad}")
    tree = factors.tree
    E = np.array(factors.values, dtype=float)
    for n in range(tree.depth):
        s1 = tree.level_slice(n + 1)
        E[s1] = E[tree.parent[s1.start:s1.stop]] * factors.values[s1]
    return TreeProcess(tree, E, nonnegative=True, name="cumprod")


def factor_excess(family: MeasureFamily, measure, factors: TreeProcess, n: int) -> np.ndarray:
    """``E_P[e_{n+1} | F_n] - 1`` on the level-``n`` nodes."""
    return conditional_expectation(family, measure, factors, n) - 1.0


def diagonal_product(diag: Sequence[float] | np.ndarray, m: int, n: int) -> np.ndarray | float:
    """``prod_{i <= max(m, n)} e_{i,i}``; the last axis of ``diag`` indexes ``i``."""
    diag = np.asarray(diag, dtype=float)
    k = max(m, n)
    if diag.shape[-1] <= k:
        raise ValueError(f"need diagonal factors up to index {k}")
    if np.any(diag < 0):
        raise ValueError("diagonal factors must be nonnegative")
    out = np.prod(diag[..., : k + 1], axis=-1)
    return float(out) if out.ndim == 0 else out


def diagonal_row(m: int, depth: int, d: float = 0.1, spread: float = 0.5,
                 first: tuple[float, float] = (1.5, 0.5)) -> tuple[MeasureFamily, TreeProcess]:
    """Row ``m`` of the diagonal product on its generated filtration.

    The diagonal factors are independent fair two-point variables:
    ``e_{0,0}`` takes the values ``first`` and every later ``e_{i,i}`` takes
    ``1 + d +/- spread``. ``E_{m,0}`` already involves ``e_{0,0}..e_{m,m}``,
    so level 0 holds one node per (value of ``e_{0,0}``, number of high
    draws among ``e_{1,1}..e_{m,m}``) with binomial masses. Levels
    ``1..min(m, depth)`` only repeat the value; later levels branch on
    ``e_{n,n}``.
    """
    hi, lo = 1.0 + d + spread, 1.0 + d - spread
    if lo < 0:
        raise ValueError("spread too large: factors would be negative")
    roots = []
    for a, val0 in enumerate(first):
        for k in range(m + 1):
            mass = 0.5 * math.comb(m, k) * 0.5**m
            roots.append((val0 * hi**k * lo ** (m - k), mass))
    children: list[list[int]] = [[] for _ in roots]
    values = [v for v, _ in roots]
    probs = [p for _, p in roots]
    frontier = list(range(len(roots)))
    for n in range(1, depth + 1):
        new = []
        for v in frontier:
            if n <= m:
                branches = [(1.0, 1.0)]
            else:
                branches = [(hi, 0.5), (lo, 0.5)]
            for factor, p in branches:
                children[v].append(len(values))
                children.append([])
                values.append(values[v] * factor)
                probs.append(p)
                new.append(len(values) - 1)
        frontier = new
    tree = OutcomeTree(children)
    fam = MeasureFamily(tree, [probs], ["P"])
    return fam, TreeProcess(tree, values, nonnegative=True, name=f"diag_{m}")


def diagonal_biprocess(ms: Sequence[int], depth: int, d: float = 0.1, spread: float = 0.5) -> BiProcess:
    rows, fams = [], []
    for m in ms:
        fam, row = diagonal_row(m, depth, d, spread)
        rows.append(row)
        fams.append(fam)
    return BiProcess(tuple(rows), tuple(fams), tuple(ms))


# --- horizons -------------------------------------------------------------------

@dataclass(frozen=True)
class HorizonReport:
    horizon: HorizonSequence
    products: tuple[float, ...]
    decays: bool


def power_rule(c: float = 4.0, p: float = 0.5) -> Callable[[int], int]:
    if not 0 < p < 1:
        raise ValueError(f"exponent p={p} must lie in (0, 1)")
    return lambda m: max(1, math.floor(c * m**p))


def horizon_from_drift(d: DriftSequence, c: float = 4.0, p: float = 0.5,
                       rule: Callable[[int], int] | None = None) -> HorizonReport:
    """Pick ``r_m = floor(c * m**p)`` (at least 1) and report ``r_m * d_m``.

    ``decays`` is true when the products are nonincreasing over the given m
    grid.
    """
    if rule is None:
        rule = power_rule(c, p)
    r = tuple(float(rule(m)) for m in d.ms)
    prods = tuple(rm * dm for rm, dm in zip(r, d.values))
    decays = all(b <= a + ATOL for a, b in zip(prods, prods[1:]))
    return HorizonReport(HorizonSequence(d.ms, r), prods, decays)


def product_slack_bound(e0_mean: float, d: float, r: int) -> float:
    """``E[E_0] * ((1 + d)**r - 1)``: the drift budget of a cumulative product up to ``r``."""
    return e0_mean * ((1.0 + d) ** r - 1.0)


# --- time mixture -----------------------------------------------------------------

@dataclass(frozen=True)
class WeightArray:
    """Nonnegative weights ``w[m][i]``; each row must sum to at most one."""

    weights: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        rows = tuple(tuple(float(x) for x in row) for row in self.weights)
        object.__setattr__(self, "weights", rows)
        for m, row in enumerate(rows):
            if any(w < 0 for w in row):
                raise WeightError(f"row {m} has a negative weight")
            if sum(row) > 1 + ATOL:
                raise WeightError(f"row {m} weights sum to {sum(row)} > 1")

    def row(self, m: int) -> tuple[float, ...]:
        return self.weights[m]


def time_mixture(weights: Sequence[float], factors: TreeProcess) -> TreeProcess:
    """``E_n = sum_{i <= n} w_i e_i`` along every path."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise WeightError("weights must be nonnegative")
    if w.sum() > 1 + ATOL:
        raise WeightError(f"weights sum to {w.sum()} > 1")
    tree = factors.tree
    if w.shape[0] < tree.depth + 1:
        w = np.concatenate([w, np.zeros(tree.depth + 1 - w.shape[0])])
    E = np.empty(tree.n_nodes)
    s0 = tree.level_slice(0)
    E[s0] = w[0] * factors.values[s0]
    for n in range(tree.depth):
        s1 = tree.level_slice(n + 1)
        E[s1] = E[tree.parent[s1.start:s1.stop]] + w[n + 1] * factors.values[s1]
    return TreeProcess(tree, E, nonnegative=bool(np.all(factors.values >= 0)), name="mixture")


def mixture_bound(family: MeasureFamily, measure, weights: Sequence[float], factors: TreeProcess,
                  rho: int) -> float:
    """``1 + sum_{i <= rho} w_i * eps_i`` with ``eps_i = E_P[e_i] - 1``."""
    w = np.asarray(weights, dtype=float)
    total = 1.0
    for i in range(min(rho, factors.depth, len(w) - 1) + 1):
        total += w[i] * (expectation(family, measure, factors, i) - 1.0)
    return total


# --- calibration --------------------------------------------------------------------

@dataclass(frozen=True)
class CalibratorSpec:
    """Power calibrator ``kappa * p**(kappa - 1)``, optionally capped at ``cap``."""

    kappa: float = 0.5
    cap: float | None = None

    def __post_init__(self):
        if not 0 < self.kappa < 1:
            raise ValueError(f"kappa={self.kappa} must lie in (0, 1)")
        if self.cap is not None and not self.cap > 0:
            raise ValueError("cap must be positive")

    @property
    def family(self) -> str:
        return "power" if self.cap is None else "truncated-power"

    @property
    def bounded(self) -> bool:
        return self.cap is not None

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        out = np.zeros_like(p)
        inside = p <= 1
        with np.errstate(divide="ignore"):
            out[inside] = self.kappa * np.power(p[inside], self.kappa - 1.0)
        if self.cap is not None:
            out = np.minimum(out, self.cap)
        return out if out.ndim else float(out)

    def integral(self, n_grid: int = 100_000) -> float:
        """Midpoint quadrature of the calibrator over ``[0, 1]``."""
        mids = (np.arange(n_grid) + 0.5) / n_grid
        return float(np.mean(self(mids)))

    def admissible(self, n_grid: int = 100_000, tol: float = 1e-6) -> bool:
        grid = np.linspace(0.0, 2.0, 2001)[1:]
        vals = self(grid)
        nonincreasing = bool(np.all(np.diff(vals) <= 0))
        return nonincreasing and bool(np.all(vals[grid > 1] == 0)) and self.integral(n_grid) <= 1 + tol


@dataclass(frozen=True, eq=False)
class PArray:
    """Rows ``p_{m, m+n}`` stored as processes on per-row trees (level n)."""

    rows: tuple[TreeProcess, ...]
    families: tuple[MeasureFamily, ...]
    ms: tuple[int, ...]

    def __post_init__(self):
        for row in self.rows:
            if np.any(row.values < 0) or not row.is_finite():
                raise ValueError("p-values must be finite and nonnegative")

    def row(self, m: int) -> tuple[TreeProcess, MeasureFamily]:
        i = self.ms.index(m)
        return self.rows[i], self.families[i]

    def q(self, m: int, mode: str = "sup") -> tuple[np.ndarray, np.ndarray]:
        """Leaf values of ``q_m`` and the leaf probabilities per measure.

        ``mode="sup"`` caps the running maximum of the row at 2;
        ``mode="inf"`` uses the running minimum instead, which is the event
        ``{exists k: p_{m,k} <= alpha}`` behind anytime validity.
        """
        if mode not in ("sup", "inf"):
            raise ValueError(f"unknown mode {mode!r}")
        pick = np.maximum if mode == "sup" else np.minimum
        row, fam = self.row(m)
        tree = row.tree
        running = np.array(row.values)
        for n in range(tree.depth):
            s1 = tree.level_slice(n + 1)
            running[s1] = pick(running[tree.parent[s1.start:s1.stop]], row.values[s1])
        leaves = tree.level_slice(tree.depth)
        q = np.minimum(running[leaves], Q_CAP)
        weights = np.stack([fam.path_probabilities(j)[leaves] for j in range(len(fam))])
        return q, weights


Q_CAP = 2.0


def supremum_p(row: Sequence[float] | np.ndarray) -> float | np.ndarray:
    """``q = min(max_k p_k, 2)`` over the last axis."""
    arr = np.asarray(row, dtype=float)
    if arr.size == 0 or arr.shape[-1] == 0:
        raise ValueError("empty p-value row")
    out = np.minimum(np.max(arr, axis=-1), Q_CAP)
    return float(out) if np.ndim(out) == 0 else out


def infimum_p(row: Sequence[float] | np.ndarray) -> float | np.ndarray:
    """``min(min_k p_k, 2)``: small exactly when some ``p_k`` is small."""
    arr = np.asarray(row, dtype=float)
    if arr.size == 0 or arr.shape[-1] == 0:
        raise ValueError("empty p-value row")
    out = np.minimum(np.min(arr, axis=-1), Q_CAP)
    return float(out) if np.ndim(out) == 0 else out


def calibrate(p: PArray, f: CalibratorSpec) -> BiProcess:
    """``E_{m,n} = f(p_{m,m+n})`` row by row.

    Rows containing an infinite value under positive mass are recorded in
    ``flags["non_integrable"]``.
    """
    rows = []
    non_integrable = []
    for m, row, fam in zip(p.ms, p.rows, p.families):
        E = TreeProcess(row.tree, f(row.values), nonnegative=True, name=f"calibrated_{m}")
        rows.append(E)
        inf_nodes = np.isinf(E.values)
        if any(np.any(fam.path_probabilities(j)[inf_nodes] > 0) for j in range(len(fam))):
            non_integrable.append(m)
    return BiProcess(tuple(rows), p.families, p.ms, flags={"non_integrable": tuple(non_integrable)})


@dataclass(frozen=True)
class StrongPReport:
    ms: tuple[int, ...]
    alphas: tuple[float, ...]
    cdf: tuple[tuple[float, ...], ...]
    strong_ratio: tuple[float, ...]
    weak_excess: tuple[tuple[float, ...], ...]
    strong_passes: bool
    weak_passes: dict = field(default_factory=dict)


def _cdf(values: np.ndarray, weights: np.ndarray | None, alphas: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if weights is None:
        weights = np.full(values.shape, 1.0 / values.size)
    order = np.argsort(values, kind="stable")
    v, w = values[order], np.asarray(weights, dtype=float)[order]
    cum = np.concatenate([[0.0], np.cumsum(w)])
    return cum[np.searchsorted(v, alphas, side="right")]


def check_strong_p(samples: dict, alphas: Sequence[float], schedule=None,
                   min_tail: int | None = None) -> StrongPReport:
    """Empirical strong and weak asymptotic p-variable checks.

    ``samples[m]`` is either an array of draws of ``q_m`` or a pair
    ``(values, weights)`` describing an exact discrete law. The strong
    statistic is ``max_alpha P[q_m <= alpha] / alpha``; the weak one is
    ``P[q_m <= alpha] - alpha`` per ``alpha``. Each passes when it sits
    within the tolerance schedule ``t_m`` (default ``1/m``) on a tail of
    the grid.
    """
    a = np.asarray(alphas, dtype=float)
    if np.any((a <= 0) | (a >= 1)):
        raise ValueError("alpha grid must lie in (0, 1)")
    ms = tuple(sorted(samples))
    if schedule is None:
        schedule = lambda m: 1.0 / max(m, 1)  # noqa: E731
    tol = [float(schedule(m)) for m in ms]
    cdfs, ratios, excess = [], [], []
    for m in ms:
        s = samples[m]
        vals, w = (s if isinstance(s, tuple) else (s, None))
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite q sample for m={m}")
        F = _cdf(vals, w, a)
        cdfs.append(tuple(F))
        ratios.append(float(np.max(F / a)))
        excess.append(tuple(F - a))
    _, _, strong = trend_verdict(ms, [r - 1.0 for r in ratios], tol, min_tail)
    weak = {}
    for k, alpha in enumerate(a):
        _, _, ok = trend_verdict(ms, [e[k] for e in excess], tol, min_tail)
        weak[float(alpha)] = ok
    return StrongPReport(ms, tuple(float(x) for x in a), tuple(cdfs), tuple(ratios),
                         tuple(excess), strong, weak)


def atom_p_array(ms: Sequence[int], depth: int = 2, k_grid: int = 20,
                 atom: Callable[[int], float] = lambda m: 1.0 / m) -> PArray:
    """Synthetic anytime p-array with an atom at zero.

    Row ``m``: ``p_{m,m}`` is 0 with probability ``delta_m`` and otherwise
    uniform on ``{1/K, ..., 1}``; each later step keeps the value or doubles
    it (capped at 1) with equal probability, so the running minimum is the
    first value.
    """
    rows, fams = [], []
    for m in ms:
        delta = float(atom(m))
        if not 0 <= delta < 1:
            raise ValueError(f"atom mass {delta} outside [0, 1)")
        values = [0.0] + [(k + 1) / k_grid for k in range(k_grid)]
        probs = [delta] + [(1 - delta) / k_grid] * k_grid
        children: list[list[int]] = [[] for _ in values]
        frontier = list(range(len(values)))
        for _ in range(depth):
            new = []
            for v in frontier:
                for nxt in (values[v], min(1.0, 2 * values[v])):
                    children[v].append(len(values))
                    children.append([])
                    values.append(nxt)
                    probs.append(0.5)
                    new.append(len(values) - 1)
            frontier = new
        tree = OutcomeTree(children)
        fams.append(MeasureFamily(tree, [probs], ["P"]))
        rows.append(TreeProcess(tree, values, nonnegative=True, name=f"p_{m}"))
    return PArray(tuple(rows), tuple(fams), tuple(ms))
