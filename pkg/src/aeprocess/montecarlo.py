"""Seeded simulation of cumulative-product e-processes and excursion estimates.

Each trajectory draws its factors ``e_n = U_n + G_n`` (``U_n`` uniform on
``[1/2, 3/2]``, ``G_n`` a lower-truncated normal with mean ``d_m``) from a
Philox stream keyed only by ``(seed, m, trajectory)``. Results therefore do
not depend on how trajectories are distributed over worker processes, and
every horizon exponent ``p`` is evaluated on the same trajectories.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, special

log = logging.getLogger(__name__)

DEFAULT_M_GRID = (32, 64, 128, 256, 512, 2048, 4096)
CSV_HEADER = ("m", "p_exp", "r_m", "alpha", "n_traj", "n_cross", "p_hat", "ci_lo", "ci_hi", "seed")
Z95 = 1.959963984540054
MIN_FACTOR = 1e-6


class InfeasibleMomentsError(ValueError):
    pass


class HorizonTruncationWarning(UserWarning):
    pass


# --- truncated normal ----------------------------------------------------------

def _hazard(beta):
    """Standard normal hazard ``phi(beta) / (1 - Phi(beta))``, stable in both tails."""
    return np.sqrt(2.0 / np.pi) / special.erfcx(np.asarray(beta) / np.sqrt(2.0))


def truncated_moments(mu: float, s: float, b: float) -> tuple[float, float]:
    """Mean and variance of ``N(mu, s^2)`` conditioned on ``X >= b``."""
    beta = (b - mu) / s
    lam = float(_hazard(beta))
    return mu + s * lam, s * s * (1.0 + beta * lam - lam * lam)


@dataclass(frozen=True)
class TruncNormalParams:
    mu0: float
    s0: float
    b: float
    mean: float
    var: float
    iterations: int = 0

    @property
    def beta(self) -> float:
        return (self.b - self.mu0) / self.s0


def _residual(x, d, var, b):
    mean, v = truncated_moments(x[0], x[1], b)
    return np.array([mean - d, v - var])


def _jacobian(mu, s, b):
    beta = (b - mu) / s
    lam = float(_hazard(beta))
    dlam = lam * (lam - beta)
    g = 1.0 + beta * lam - lam * lam
    dg = lam + beta * dlam - 2.0 * lam * dlam
    return np.array([
        [1.0 - dlam, lam - beta * dlam],
        [-s * dg, 2.0 * s * g - s * beta * dg],
    ])


def _newton(d, var, b, tol, max_iter):
    x = np.array([d, math.sqrt(var)])
    for it in range(max_iter):
        F = _residual(x, d, var, b)
        if np.max(np.abs(F)) <= tol:
            return x, it
        try:
            step = np.linalg.solve(_jacobian(x[0], x[1], b), -F)
        except np.linalg.LinAlgError:
            return None, it
        t = 1.0
        base = np.max(np.abs(F))
        while t > 1e-8:
            trial = x + t * step
            if trial[1] > 0:
                Ft = _residual(trial, d, var, b)
                if np.all(np.isfinite(Ft)) and np.max(np.abs(Ft)) < base:
                    break
            t *= 0.5
        else:
            return None, it
        x = trial
    return None, max_iter


def _nested_bisection(d, var, b, tol):
    """Fallback: for each parent mean solve the variance equation in ``s``, then match the mean."""
    def s_for(mu):
        hi = math.sqrt(var)
        while truncated_moments(mu, hi, b)[1] < var:
            hi *= 2.0
            if hi > 1e6:
                raise InfeasibleMomentsError("variance target unreachable")
        return optimize.brentq(lambda s: truncated_moments(mu, s, b)[1] - var, 1e-12, hi, xtol=1e-15)

    def mean_gap(mu):
        return truncated_moments(mu, s_for(mu), b)[0] - d

    lo, hi = d - 1.0, d + 1.0
    while mean_gap(lo) > 0:
        lo -= 2 * (hi - lo)
        if lo < d - 1e4:
            raise InfeasibleMomentsError("mean target unreachable")
    mu = optimize.brentq(mean_gap, lo, hi, xtol=1e-15)
    return np.array([mu, s_for(mu)])


def trunc_normal_params(d: float, var: float, b: float, tol: float = 1e-9, max_iter: int = 100) -> TruncNormalParams:
    """Parent ``(mu0, s0)`` whose truncation at ``b`` has mean ``d`` and variance ``var``."""
    if var <= 0:
        raise InfeasibleMomentsError("target variance must be positive")
    if d <= b:
        raise InfeasibleMomentsError(f"target mean {d} must exceed the truncation point {b}")
    # truncated variance stays below (d - b)^2, approached only as mu0 -> -inf
    if math.sqrt(var) >= d - b:
        raise InfeasibleMomentsError(
            f"std {math.sqrt(var)} not attainable: lower truncation at {b} caps it below {d - b}")
    x, iters = _newton(d, var, b, tol * 1e-3, max_iter)
    if x is None:
        log.debug("Newton failed for d=%s var=%s b=%s; using nested bisection", d, var, b)
        x = _nested_bisection(d, var, b, tol)
    res = _residual(x, d, var, b)
    if not np.all(np.abs(res) <= tol):
        raise InfeasibleMomentsError(f"moment matching did not converge; residuals {res.tolist()}")
    mean, v = truncated_moments(x[0], x[1], b)
    return TruncNormalParams(float(x[0]), float(x[1]), float(b), mean, v, iters)


def sample_trunc_normal(params: TruncNormalParams, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draws from the truncated law by rejection.

    Plain normal rejection when the truncation point is at or left of the
    parent mean; otherwise a translated-exponential proposal in the tail.
    """
    beta = params.beta
    out = np.empty(size)
    filled = 0
    if beta <= 0:
        accept_rate = 0.5 * special.erfc(beta / math.sqrt(2.0))
        while filled < size:
            need = size - filled
            z = rng.standard_normal(int(need / accept_rate * 1.1) + 8)
            z = z[z >= beta][:need]
            out[filled:filled + z.size] = z
            filled += z.size
    else:
        lam = 0.5 * (beta + math.sqrt(beta * beta + 4.0))
        while filled < size:
            need = size - filled
            k = 2 * need + 8
            z = beta + rng.exponential(1.0 / lam, k)
            u = rng.random(k)
            z = z[u <= np.exp(-0.5 * (z - lam) ** 2)][:need]
            out[filled:filled + z.size] = z
            filled += z.size
    return np.maximum(params.mu0 + params.s0 * out, params.b)


# --- configuration ----------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    m_grid: tuple[int, ...] = DEFAULT_M_GRID
    a: float = 4.0
    sigma: float = 0.35
    b: float = -0.5 + 1e-6
    c: float = 4.0
    p_exp: tuple[float, ...] = (0.5,)
    alpha: float = 0.05
    n_traj: int = 10_000
    n_end: int = 500
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "m_grid", tuple(int(m) for m in self.m_grid))
        object.__setattr__(self, "p_exp", tuple(float(p) for p in self.p_exp))
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha={self.alpha} must lie in (0, 1)")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.m_grid or any(m < 1 for m in self.m_grid):
            raise ValueError("m_grid must hold positive integers")
        if any(not 0 < p < 1 for p in self.p_exp):
            raise ValueError("every p_exp must lie in (0, 1)")
        if self.n_traj < 1 or self.n_end < 1:
            raise ValueError("n_traj and n_end must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.a < 0 or self.c <= 0:
            raise ValueError("a must be nonnegative and c positive")

    def drift(self, m: int) -> float:
        return self.a / m

    def horizon(self, m: int, p: float) -> int:
        return max(1, math.floor(self.c * m**p))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["m_grid"] = list(self.m_grid)
        d["p_exp"] = list(self.p_exp)
        return d


# --- simulation ---------------------------------------------------------------------

def substream(seed: int, m: int, traj: int) -> np.random.Generator:
    """Philox generator keyed by a hash of ``(seed, m, traj)``."""
    key = np.random.SeedSequence([seed, m, traj]).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def simulate_trajectory(params: TruncNormalParams, n_end: int, rng: np.random.Generator,
                        u_bounds: tuple[float, float] = (0.5, 1.5)) -> np.ndarray:
    """Path ``E_0 = 1, E_n = E_{n-1} * (U_n + G_n)`` for ``n <= n_end``."""
    u = rng.uniform(u_bounds[0], u_bounds[1], n_end)
    g = sample_trunc_normal(params, rng, n_end)
    e = np.maximum(u + g, MIN_FACTOR)
    path = np.empty(n_end + 1)
    path[0] = 1.0
    np.cumprod(e, out=path[1:])
    return path


def first_crossing(path: np.ndarray, threshold: float) -> int:
    """First index with ``path >= threshold``, or -1."""
    hit = np.flatnonzero(path >= threshold)
    return int(hit[0]) if hit.size else -1


def _simulate_chunk(args):
    params, n_end, threshold, seed, m, start, stop, keep = args
    taus = np.empty(stop - start, dtype=np.int64)
    paths = {}
    for t in range(start, stop):
        path = simulate_trajectory(params, n_end, substream(seed, m, t))
        taus[t - start] = first_crossing(path, threshold)
        if t in keep:
            paths[t] = path
    return taus, paths


@dataclass
class RowResult:
    m: int
    taus: np.ndarray
    paths: dict = field(default_factory=dict)
    params: TruncNormalParams | None = None

    def crossed_before(self, r: int) -> np.ndarray:
        return (self.taus >= 0) & (self.taus < r)


def _chunks(n: int, k: int) -> list[tuple[int, int]]:
    size = max(1, math.ceil(n / k))
    return [(s, min(n, s + size)) for s in range(0, n, size)]


def simulate_row(m: int, config: SimConfig, workers: int = 1, keep_paths: int = 0,
                 executor: ProcessPoolExecutor | None = None) -> RowResult:
    """First crossing times of ``1/alpha`` for ``n_traj`` trajectories of row ``m``."""
    params = trunc_normal_params(config.drift(m), config.sigma**2, config.b)
    keep = set(np.linspace(0, config.n_traj - 1, keep_paths).round().astype(int).tolist()) if keep_paths else set()
    threshold = 1.0 / config.alpha
    n_parts = max(1, workers) * 4 if workers > 1 else 1
    jobs = [(params, config.n_end, threshold, config.seed, m, s, e, keep)
            for s, e in _chunks(config.n_traj, n_parts)]
    if executor is not None:
        parts = list(executor.map(_simulate_chunk, jobs))
    else:
        parts = [_simulate_chunk(j) for j in jobs]
    taus = np.concatenate([p[0] for p in parts])
    paths = {}
    for _, pth in parts:
        paths.update(pth)
    return RowResult(m, taus, dict(sorted(paths.items())), params)


def wilson_interval(count: int, n: int, z: float = Z95) -> tuple[float, float]:
    if n < 1:
        raise ValueError("need at least one trial")
    p = count / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z / denom * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return max(0.0, min(p, centre - half)), min(1.0, max(p, centre + half))


def excursion_estimate(flags, n_traj: int | None = None) -> tuple[float, float, float]:
    """``(p_hat, lo, hi)`` from crossing indicators (or a count with ``n_traj``)."""
    if np.ndim(flags) == 0:
        count = int(flags)
        if n_traj is None:
            raise ValueError("n_traj required with a bare count")
    else:
        flags = np.asarray(flags, dtype=bool)
        count = int(flags.sum())
        n_traj = flags.size if n_traj is None else n_traj
    lo, hi = wilson_interval(count, n_traj)
    return count / n_traj, lo, hi


@dataclass(frozen=True)
class ExcursionRow:
    m: int
    p_exp: float
    r_m: int
    alpha: float
    n_traj: int
    n_cross: int
    p_hat: float
    ci_lo: float
    ci_hi: float
    seed: int
    n_cross_any: int
    horizon_truncated: bool

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci_hi - self.ci_lo)


@dataclass
class ExcursionReport:
    config: SimConfig
    rows: list[ExcursionRow]
    paths: dict = field(default_factory=dict)

    def select(self, p: float) -> list[ExcursionRow]:
        return [r for r in self.rows if r.p_exp == p]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.m, repr(r.p_exp), r.r_m, repr(r.alpha), r.n_traj, r.n_cross,
                        repr(r.p_hat), repr(r.ci_lo), repr(r.ci_hi), r.seed])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    def write_paths(self, directory: str | Path) -> list[Path]:
        out = []
        directory = Path(directory)
        for (m, p), paths in self.paths.items():
            target = directory / f"paths_{m}_{p}.csv"
            with target.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("traj", "n", "value"))
                for t, path in paths.items():
                    for n, v in enumerate(path):
                        w.writerow((t, n, repr(float(v))))
            out.append(target)
        return out


def experiment_grid(config: SimConfig, workers: int = 1, keep_paths: int = 0) -> ExcursionReport:
    """One report row per ``(m, p)``; all ``p`` share the row's trajectories."""
    max_r = max(config.horizon(m, p) for m in config.m_grid for p in config.p_exp)
    if max_r > config.n_end:
        warnings.warn(f"largest horizon {max_r} exceeds n_end={config.n_end}; "
                      "crossings are only observed up to n_end", HorizonTruncationWarning, stacklevel=2)
    rows, paths = [], {}
    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for m in config.m_grid:
            res = simulate_row(m, config, workers, keep_paths, executor)
            any_cross = int(np.sum(res.taus >= 0))
            for p in config.p_exp:
                r = config.horizon(m, p)
                flags = res.crossed_before(r)
                p_hat, lo, hi = excursion_estimate(flags)
                rows.append(ExcursionRow(m, p, r, config.alpha, config.n_traj, int(flags.sum()), p_hat,
                                         lo, hi, config.seed, any_cross, r > config.n_end))
                if keep_paths:
                    paths[(m, p)] = res.paths
    finally:
        if executor is not None:
            executor.shutdown()
    return ExcursionReport(config, rows, paths)


def nonincreasing_within(values: Sequence[float], slack: Sequence[float]) -> bool:
    """``values[j+1] <= values[j] + slack[j+1]`` for every consecutive pair."""
    return all(b <= a + s for a, b, s in zip(values, values[1:], slack[1:]))
