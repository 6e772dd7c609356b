"""Exact certificates for asymptotic e-process properties on finite trees."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .prob_core import (
    ATOL,
    DEFAULT_ENUMERATION_CAP,
    BiProcess,
    HorizonSequence,
    MeasureFamily,
    StoppingTime,
    TreeProcess,
    count_stopping_times,
    enumerate_stopping_times,
    expectation,
    stopped_expectations,
)


class PreconditionError(ValueError):
    pass


class VilleViolation(AssertionError):
    pass


def _cond_level(family: MeasureFamily, j: int, next_values: np.ndarray, n: int) -> np.ndarray:
    """Conditional expectation of level-(n+1) values given level n (raw arrays)."""
    tree = family.tree
    s1 = tree.level_slice(n + 1)
    w = family.probs[j, s1]
    pidx = tree.parent_index(n)
    size = tree.level_size(n)
    mass = np.bincount(pidx, weights=w, minlength=size)
    pos = w > 0
    wx = np.zeros_like(w)
    wx[pos] = w[pos] * next_values[pos]
    num = np.bincount(pidx, weights=wx, minlength=size)
    out = np.empty(size)
    ok = mass > 0
    out[ok] = num[ok] / mass[ok]
    if not np.all(ok):
        counts = np.bincount(pidx, minlength=size)
        plain = np.bincount(pidx, weights=next_values, minlength=size)
        out[~ok] = plain[~ok] / counts[~ok]
    return out


def _lift(tree, level_values: np.ndarray, n: int, k: int) -> np.ndarray:
    """Level-n values broadcast onto the level-k descendants."""
    return level_values[tree.ancestor_map(n, k)]


# --- drift and Doob decomposition -------------------------------------------

def drift_delta(family: MeasureFamily, measure, E: TreeProcess, n: int) -> np.ndarray:
    """One-step drift ``E[E_{n+1} | F_n] - E_n`` on the level-``n`` nodes.

    When ``E_{n+1}`` is not integrable under the measure the drift is
    ``inf`` everywhere.
    """
    tree = family.tree
    if not 0 <= n < tree.depth:
        raise IndexError(f"drift level {n} outside 0..{tree.depth - 1}")
    j = family.index(measure)
    if not math.isfinite(expectation(family, j, E, n + 1)):
        return np.full(tree.level_size(n), math.inf)
    cur = E.level(n)
    nxt = _cond_level(family, j, E.level(n + 1), n)
    with np.errstate(invalid="ignore"):
        d = nxt - cur
    # a node carrying an infinite current value has no meaningful drift
    d[np.isnan(d)] = 0.0
    return d


def asp_excess(bi: BiProcess, n: int) -> np.ndarray:
    """Per row, ``max_P E_P[delta_{m,n}^+]`` (``inf`` for non-integrable rows)."""
    out = np.empty(len(bi))
    for i, (row, fam) in enumerate(zip(bi.rows, bi.families)):
        worst = 0.0
        for j in range(len(fam)):
            d = drift_delta(fam, j, row, n)
            if np.any(np.isinf(d)):
                worst = math.inf
                break
            pp = fam.path_probabilities(j)[fam.tree.level_slice(n)]
            worst = max(worst, float(np.dot(pp, np.maximum(d, 0.0))))
        out[i] = worst
    return out


@dataclass(frozen=True, eq=False)
class DoobParts:
    M: TreeProcess
    A: TreeProcess
    delta: tuple[np.ndarray, ...]
    delta_plus_sum: TreeProcess

    def reconstruction_error(self, E: TreeProcess) -> float:
        return float(np.max(np.abs(self.M.values + self.A.values - E.values)))


def doob_decompose(family: MeasureFamily, measure, E: TreeProcess) -> DoobParts:
    """Split ``E`` into a martingale ``M`` and a predictable part ``A``.

    ``A_0 = 0`` and ``A_{n+1} = A_n + delta_n`` evaluated at the parent, so
    ``A`` is constant across siblings. ``delta_plus_sum`` accumulates the
    positive parts of the drift instead.
    """
    if not E.is_finite():
        raise PreconditionError("Doob decomposition needs finite process values")
    tree = family.tree
    j = family.index(measure)
    deltas = []
    A = np.zeros(tree.n_nodes)
    D = np.zeros(tree.n_nodes)
    for n in range(tree.depth):
        d = _cond_level(family, j, E.level(n + 1), n) - E.level(n)
        deltas.append(d)
        pidx = tree.parent_index(n)
        s, s1 = tree.level_slice(n), tree.level_slice(n + 1)
        A[s1] = A[s][pidx] + d[pidx]
        D[s1] = D[s][pidx] + np.maximum(d, 0.0)[pidx]
    M = E.values - A
    return DoobParts(
        M=TreeProcess(tree, M, name="M"),
        A=TreeProcess(tree, A, name="A"),
        delta=tuple(deltas),
        delta_plus_sum=TreeProcess(tree, D, nonnegative=True, name="Delta"),
    )


def martingale_defect(family: MeasureFamily, measure, X: TreeProcess, supermartingale: bool = False) -> float:
    """Largest violation of the (super)martingale property on reachable nodes."""
    j = family.index(measure)
    tree = family.tree
    pp = family.path_probabilities(j)
    worst = 0.0
    for n in range(tree.depth):
        d = _cond_level(family, j, X.level(n + 1), n) - X.level(n)
        live = pp[tree.level_slice(n)] > 0
        if not np.any(live):
            continue
        viol = d[live] if supermartingale else np.abs(d[live])
        worst = max(worst, float(np.max(viol)))
    return worst


# --- Snell envelope and certificates ------------------------------------------

def snell_envelope_bounded(family: MeasureFamily, measure, E: TreeProcess, r: int) -> TreeProcess:
    """Backward-induction envelope with stopping restricted to levels ``<= r``.

    Levels beyond ``r`` copy ``E``.
    """
    tree = family.tree
    if not 0 <= r <= tree.depth:
        raise ValueError(f"horizon {r} outside 0..{tree.depth}")
    j = family.index(measure)
    L = np.array(E.values, dtype=float)
    for n in range(r - 1, -1, -1):
        s = tree.level_slice(n)
        cont = _cond_level(family, j, L[tree.level_slice(n + 1)], n)
        L[s] = np.maximum(E.level(n), cont)
    return TreeProcess(tree, L, name="L")


def optimal_stopping_time(family: MeasureFamily, measure, E: TreeProcess, r: int) -> StoppingTime:
    """Stop at the first node where ``E`` is at least the continuation value."""
    tree = family.tree
    j = family.index(measure)
    L = snell_envelope_bounded(family, j, E, r)
    stop_here = np.zeros(tree.n_nodes, dtype=bool)
    s = tree.level_slice(r)
    stop_here[s] = True
    for n in range(r):
        cont = _cond_level(family, j, L.level(n + 1), n)
        stop_here[tree.level_slice(n)] = E.level(n) >= cont
    stops = []
    frontier = list(tree.roots)
    while frontier:
        v = frontier.pop()
        if stop_here[v]:
            stops.append(v)
        else:
            frontier.extend(tree.children[v])
    return StoppingTime(frozenset(stops), r)


@dataclass(frozen=True, eq=False)
class Certificate:
    m: int
    horizon: float
    max_stopped_expectation: float
    worst_measure: str
    argmax_stopping_time: StoppingTime
    expectations: dict = field(default_factory=dict)
    n_stopping_times: int | None = None
    method: str = "enumerate"

    @property
    def slack(self) -> float:
        return self.max_stopped_expectation - 1.0

    @property
    def integrable(self) -> bool:
        return math.isfinite(self.max_stopped_expectation)

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "horizon": None if self.horizon == math.inf else int(self.horizon),
            "max": self.max_stopped_expectation,
            "tau": self.argmax_stopping_time.to_json(),
            "measure": self.worst_measure,
            "method": self.method,
        }


def _expectation_table(family: MeasureFamily, E: TreeProcess) -> dict:
    return {lab: [expectation(family, j, E, n) for n in range(E.depth + 1)]
            for j, lab in enumerate(family.labels)}


def certify_row(family: MeasureFamily, E: TreeProcess, rho: float, m: int = 0,
                method: str = "enumerate", cap: int = DEFAULT_ENUMERATION_CAP) -> Certificate:
    """``max_{tau <= rho} max_P E_P[E_tau]`` with the maximising pair.

    ``method="enumerate"`` checks every stopping time; ``"envelope"`` uses
    backward induction, which gives the same maximum on a finite tree.
    ``"auto"`` enumerates when the count fits under ``cap`` and otherwise
    falls back to the envelope.
    """
    depth = family.tree.depth
    r = depth if rho == math.inf else int(rho)
    if not 0 <= r <= depth:
        raise ValueError(f"horizon {rho} outside 0..{depth}")
    table = _expectation_table(family, E)
    if method == "auto":
        method = "enumerate" if count_stopping_times(family.tree, r) <= cap else "envelope"
    if method == "enumerate":
        taus = enumerate_stopping_times(family.tree, r, cap=cap)
        vals = stopped_expectations(family, E, taus)
        flat = int(np.argmax(vals))
        j, k = divmod(flat, vals.shape[1])
        return Certificate(m, rho, float(vals[j, k]), family.labels[j], taus[k], table, len(taus), method)
    if method == "envelope":
        best, best_j = -math.inf, 0
        for j in range(len(family)):
            L = snell_envelope_bounded(family, j, E, r)
            v = expectation(family, j, L, 0)
            if v > best:
                best, best_j = v, j
        tau = optimal_stopping_time(family, best_j, E, r)
        return Certificate(m, rho, best, family.labels[best_j], tau, table, None, method)
    raise ValueError(f"unknown certification method {method!r}")


@dataclass(frozen=True, eq=False)
class TrendReport:
    ms: tuple[int, ...]
    certificates: tuple[Certificate, ...]
    tolerances: tuple[float, ...]
    slack: tuple[float, ...]
    passes: tuple[bool, ...]
    m0: int | None
    verdict: bool

    def to_json(self) -> dict:
        return {
            "per_m": [c.to_json() for c in self.certificates],
            "slack": [s if math.isfinite(s) else None for s in self.slack],
            "tolerance": list(self.tolerances),
            "verdict": self.verdict,
            "m0": self.m0,
        }


def _schedule_values(schedule, ms: Sequence[int]) -> list[float]:
    if callable(schedule):
        return [float(schedule(m)) for m in ms]
    vals = [float(t) for t in schedule]
    if len(vals) != len(ms):
        raise ValueError("tolerance schedule length must match the number of rows")
    return vals


def trend_verdict(ms: Sequence[int], slack: Sequence[float], tolerances: Sequence[float],
                  min_tail: int | None = None) -> tuple[tuple[bool, ...], int | None, bool]:
    """Smallest ``m0`` with ``slack_m <= t_m`` for every ``m >= m0``.

    The verdict also requires the passing tail to hold at least ``min_tail``
    rows (default: half the grid, rounded up).
    """
    passes = tuple(bool(s <= t + ATOL) for s, t in zip(slack, tolerances))
    if min_tail is None:
        min_tail = max(1, math.ceil(len(ms) / 2))
    start = len(ms)
    while start > 0 and passes[start - 1]:
        start -= 1
    if start == len(ms):
        return passes, None, False
    return passes, int(ms[start]), (len(ms) - start) >= min_tail


def certify_asymptotic(bi: BiProcess, schedule: Callable[[int], float] | Sequence[float],
                       horizon: HorizonSequence | None = None, method: str = "enumerate",
                       cap: int = DEFAULT_ENUMERATION_CAP, min_tail: int | None = None) -> TrendReport:
    """Finite-range check that ``max_tau max_P E[E_{m,tau}] <= 1 + t_m`` eventually."""
    horizon = horizon if horizon is not None else bi.horizon
    certs = []
    for m, row, fam in zip(bi.ms, bi.rows, bi.families):
        rho = math.inf if horizon is None else horizon[m]
        certs.append(certify_row(fam, row, rho, m=m, method=method, cap=cap))
    tol = _schedule_values(schedule, bi.ms)
    slack = tuple(c.slack for c in certs)
    passes, m0, verdict = trend_verdict(bi.ms, slack, tol, min_tail)
    return TrendReport(tuple(bi.ms), tuple(certs), tuple(tol), slack, passes, m0, verdict)


def certificate_table(bi: BiProcess, max_n: int, method: str = "envelope") -> np.ndarray:
    """``x[n, i] = max_{tau <= n} max_P E[E_{m_i, tau}]`` for ``n <= max_n``."""
    x = np.full((max_n + 1, len(bi)), np.nan)
    for i, (row, fam) in enumerate(zip(bi.rows, bi.families)):
        for n in range(min(max_n, row.depth) + 1):
            x[n, i] = certify_row(fam, row, n, method=method).max_stopped_expectation
    return x


# --- optional sampling and Ville ----------------------------------------------

@dataclass(frozen=True, eq=False)
class OptionalSamplingReport:
    max_difference: float
    worst_measure: str
    worst_stopping_time: StoppingTime
    n_stopping_times: int
    violations: int


def optional_sampling_check(family: MeasureFamily, S: TreeProcess, horizon: int | None = None,
                            cap: int = DEFAULT_ENUMERATION_CAP) -> OptionalSamplingReport:
    """Worst ``E[S_tau] - E[S_0]`` over every stopping time and measure."""
    tree = family.tree
    rho = tree.depth if horizon is None else int(horizon)
    if np.any(S.values < 0):
        raise PreconditionError("process is not nonnegative")
    for j in range(len(family)):
        pp = family.path_probabilities(j)
        for n in range(tree.depth):
            d = _cond_level(family, j, S.level(n + 1), n) - S.level(n)
            live = pp[tree.level_slice(n)] > 0
            bad = np.flatnonzero(live & (d > ATOL))
            if bad.size:
                node = int(tree.level_slice(n).start + bad[0])
                raise PreconditionError(
                    f"not a supermartingale under {family.labels[j]}: drift {d[bad[0]]:.3g} at node {node}")
    taus = enumerate_stopping_times(tree, rho, cap=cap)
    vals = stopped_expectations(family, S, taus)
    base = np.array([expectation(family, j, S, 0) for j in range(len(family))])
    diff = vals - base[:, None]
    flat = int(np.argmax(diff))
    j, k = divmod(flat, diff.shape[1])
    return OptionalSamplingReport(float(diff[j, k]), family.labels[j], taus[k], len(taus),
                                  int(np.sum(diff > ATOL)))


def first_crossing_time(E: TreeProcess, rho: int, threshold: float) -> StoppingTime:
    tree = E.tree
    stops = []
    frontier = list(tree.roots)
    while frontier:
        v = frontier.pop()
        if E.values[v] >= threshold or tree.level[v] == rho:
            stops.append(v)
        else:
            frontier.extend(tree.children[v])
    return StoppingTime(frozenset(stops), rho)


def ville_bound_exact(family: MeasureFamily, E: TreeProcess, rho: int, alpha: float,
                      measure=0, check: bool = True) -> tuple[float, float]:
    """``P[max_{n<=rho} E_n >= 1/alpha]`` against ``alpha * E[E_tau]``.

    ``tau`` is the first crossing of ``1/alpha`` (or ``rho``). Raises
    :class:`VilleViolation` if the Markov bound fails.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if not 0 <= rho <= family.tree.depth:
        raise ValueError(f"horizon {rho} outside 0..{family.tree.depth}")
    j = family.index(measure)
    tau = first_crossing_time(E, rho, 1.0 / alpha)
    idx = np.fromiter(tau.stops, dtype=np.int64)
    pp = family.path_probabilities(j)[idx]
    vals = E.values[idx]
    live = pp > 0
    lhs = float(np.sum(pp[live & (vals >= 1.0 / alpha)]))
    rhs = alpha * float(np.dot(pp[live], vals[live]))
    if check and lhs > rhs + ATOL:
        raise VilleViolation(f"crossing probability {lhs} exceeds alpha*E[E_tau] = {rhs}")
    return lhs, rhs


# --- diagonal horizon ------------------------------------------------------

def select_thresholds(x: np.ndarray, n_max: int | None = None) -> list[int]:
    """Strictly increasing ``N_n`` with ``x[n, m] <= 1 + 1/n`` for all ``m >= N_n``.

    Stops at the first ``n`` that has no admissible threshold inside the range.
    """
    n_rows, n_cols = x.shape
    n_max = n_rows - 1 if n_max is None else min(n_max, n_rows - 1)
    out: list[int] = []
    for n in range(1, n_max + 1):
        ok = x[n] <= 1 + 1 / n
        bad = np.flatnonzero(~ok)
        N = 0 if bad.size == 0 else int(bad[-1]) + 1
        if out:
            N = max(N, out[-1] + 1)
        if N >= n_cols:
            break
        out.append(N)
    return out


def diagonal_horizon(x: np.ndarray, thresholds: Sequence[int]) -> np.ndarray:
    """Nondecreasing horizon ``r_m`` from thresholds ``N_1 < N_2 < ...``.

    ``x[n, m]`` must satisfy ``x[n, m] <= 1 + 1/n`` whenever ``m >= N_n``;
    ``thresholds[k]`` is ``N_{k+1}``. Then ``r_m = 1`` below ``N_1`` and
    ``r_m = n`` on ``N_n <= m < N_{n+1}``.
    """
    x = np.asarray(x, dtype=float)
    N = [int(t) for t in thresholds]
    if not N:
        raise PreconditionError("no thresholds given")
    if any(b <= a for a, b in zip(N, N[1:])):
        raise PreconditionError("thresholds must be strictly increasing")
    n_rows, n_cols = x.shape
    if len(N) > n_rows - 1:
        raise PreconditionError(f"threshold N_{len(N)} has no row in the array (rows 0..{n_rows - 1})")
    for n, Nn in enumerate(N, start=1):
        for m in range(max(Nn, 0), n_cols):
            if not x[n, m] <= 1 + 1 / n:
                raise PreconditionError(f"x[{n}, {m}] = {x[n, m]} exceeds 1 + 1/{n} although m >= N_{n} = {Nn}")
    r = np.ones(n_cols, dtype=np.int64)
    for n, Nn in enumerate(N, start=1):
        r[Nn:] = n
    return r
