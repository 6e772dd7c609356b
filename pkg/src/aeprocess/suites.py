"""Seeded randomized verification suites on small trees.

Each suite returns a JSON-ready dict with ``instances``, ``violations``,
``max_error`` and ``verdict``. Instance ``k`` draws from
``SeedSequence([seed, k])`` so suites are reproducible one instance at a time.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .constructions import (
    CalibratorSpec,
    atom_p_array,
    calibrate,
    check_strong_p,
    cumulative_product,
    diagonal_biprocess,
    horizon_from_drift,
    mixture_bound,
    product_slack_bound,
    time_mixture,
)
from .prob_core import (
    ATOL,
    DriftSequence,
    MeasureFamily,
    OutcomeTree,
    TreeProcess,
    build_tree,
    enumerate_stopping_times,
    expectation,
    stopped_expectations,
)
from .verifier import (
    certify_asymptotic,
    certify_row,
    diagonal_horizon,
    doob_decompose,
    drift_delta,
    martingale_defect,
    optional_sampling_check,
    ville_bound_exact,
)

TOL = 1e-12


def instance_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, k])))


# --- random instances ------------------------------------------------------------

def random_tree(rng: np.random.Generator, depth: int, max_branch: int | None = None,
                full_depth: bool = False) -> OutcomeTree:
    """Single-root tree with depth ``depth`` (or a random depth up to it)."""
    if max_branch is None:
        max_branch = 3 if depth <= 3 else 2
    T = depth if full_depth else int(rng.integers(1, depth + 1))
    children: list[list[int]] = [[]]
    frontier = [0]
    for _ in range(T):
        new = []
        for v in frontier:
            for _ in range(int(rng.integers(1, max_branch + 1))):
                children[v].append(len(children))
                children.append([])
                new.append(len(children) - 1)
        frontier = new
    return OutcomeTree(children)


def random_family(rng: np.random.Generator, tree: OutcomeTree, k: int = 2) -> MeasureFamily:
    probs = np.zeros((k, tree.n_nodes))
    for j in range(k):
        probs[j, list(tree.roots)] = rng.dirichlet(np.ones(len(tree.roots)))
        for v, ch in enumerate(tree.children):
            if ch:
                probs[j, list(ch)] = rng.dirichlet(np.ones(len(ch)))
    return MeasureFamily(tree, probs, [f"P{j}" for j in range(k)])


def random_process(rng: np.random.Generator, tree: OutcomeTree, scale: float = 2.0) -> TreeProcess:
    return TreeProcess(tree, rng.uniform(0.0, scale, tree.n_nodes), nonnegative=True)


def random_supermartingale(rng: np.random.Generator, family: MeasureFamily) -> TreeProcess:
    """Nonnegative supermartingale under every measure of ``family``."""
    tree = family.tree
    S = np.zeros(tree.n_nodes)
    S[list(tree.roots)] = rng.uniform(0.5, 2.0, len(tree.roots))
    for v, ch in enumerate(tree.children):
        if not ch:
            continue
        ch = list(ch)
        u = rng.exponential(1.0, len(ch))
        worst = max(float(family.probs[j, ch] @ u) for j in range(len(family)))
        shrink = 1.0 if rng.random() < 0.3 else rng.uniform(0.7, 1.0)
        S[ch] = S[v] * u * shrink / worst
    return TreeProcess(tree, S, nonnegative=True, name="S")


def two_point_factors(rng: np.random.Generator, tree: OutcomeTree, means: Callable[[int], float],
                      root_value: float = 1.0) -> tuple[MeasureFamily, TreeProcess]:
    """Factors whose conditional mean given level ``n`` is ``means(n + 1)``.

    Every child set gets random probabilities; values are chosen so the
    weighted mean is exact up to rounding.
    """
    probs = np.zeros(tree.n_nodes)
    vals = np.zeros(tree.n_nodes)
    probs[list(tree.roots)] = 1.0 / len(tree.roots)
    vals[list(tree.roots)] = root_value
    for v, ch in enumerate(tree.children):
        if not ch:
            continue
        ch = list(ch)
        mu = means(tree.level[v] + 1)
        q = rng.dirichlet(np.ones(len(ch)))
        x = rng.uniform(0.0, 2.0, len(ch))
        x = x * mu / float(q @ x) if q @ x > 0 else np.full(len(ch), mu)
        probs[ch] = q
        vals[ch] = x
    fam = MeasureFamily(tree, [probs], ["P"])
    return fam, TreeProcess(tree, vals, nonnegative=True, name="e")


def _result(name: str, instances: int, errors: list[float], tol: float = TOL, **extra) -> dict:
    errs = [float(e) for e in errors]
    violations = sum(1 for e in errs if not e <= tol)
    out = {
        "suite": name,
        "instances": instances,
        "violations": violations,
        "max_error": max(errs) if errs else 0.0,
        "tolerance": tol,
        "verdict": violations == 0,
    }
    out.update(extra)
    return out


# --- suites -------------------------------------------------------------------------

def suite_optional_sampling(trees: int = 100, depth: int = 4, seed: int = 0) -> dict:
    """``E[S_tau] - E[S_0] <= 0`` for every stopping time, measure and instance."""
    errors, n_taus = [], 0
    for k in range(trees):
        rng = instance_rng(seed, k)
        tree = random_tree(rng, depth)
        fam = random_family(rng, tree)
        S = random_supermartingale(rng, fam)
        rep = optional_sampling_check(fam, S)
        errors.append(max(rep.max_difference, 0.0))
        n_taus += rep.n_stopping_times
    return _result("optional-sampling", trees, errors, stopping_times_checked=n_taus)


def suite_snell(trees: int = 50, depth: int = 3, seed: int = 0) -> dict:
    """Backward induction against the enumeration maximum."""
    errors = []
    for k in range(trees):
        rng = instance_rng(seed, k)
        tree = random_tree(rng, depth)
        fam = random_family(rng, tree)
        E = random_process(rng, tree)
        rho = int(rng.integers(0, tree.depth + 1))
        a = certify_row(fam, E, rho, method="enumerate").max_stopped_expectation
        b = certify_row(fam, E, rho, method="envelope").max_stopped_expectation
        errors.append(abs(a - b))
    return _result("snell", trees, errors)


def suite_doob(trees: int = 100, depth: int = 4, seed: int = 0) -> dict:
    """``M + A = E``, ``M`` a martingale, and ``A`` increments equal the drift."""
    errors = []
    for k in range(trees):
        rng = instance_rng(seed, k)
        tree = random_tree(rng, depth)
        fam = random_family(rng, tree, k=1)
        E = random_process(rng, tree)
        parts = doob_decompose(fam, 0, E)
        err = parts.reconstruction_error(E)
        err = max(err, martingale_defect(fam, 0, parts.M))
        for n in range(tree.depth):
            s, s1 = tree.level_slice(n), tree.level_slice(n + 1)
            inc = parts.A.values[s1] - parts.A.values[s][tree.parent_index(n)]
            err = max(err, float(np.max(np.abs(inc - parts.delta[n][tree.parent_index(n)]))))
            err = max(err, float(np.max(np.abs(parts.delta[n] - drift_delta(fam, 0, E, n)))))
        errors.append(err)
    return _result("doob", trees, errors)


def suite_ville(trees: int = 100, depth: int = 4, seed: int = 0) -> dict:
    """Crossing probability of ``1/alpha`` against ``alpha * E[E_tau]``."""
    errors = []
    for k in range(trees):
        rng = instance_rng(seed, k)
        tree = random_tree(rng, depth)
        fam = random_family(rng, tree)
        S = random_supermartingale(rng, fam)
        alpha = float(rng.uniform(0.2, 0.9))
        for j in range(len(fam)):
            lhs, rhs = ville_bound_exact(fam, S, tree.depth, alpha, measure=j, check=False)
            errors.append(max(lhs - rhs, 0.0))
    return _result("ville", trees, errors)


def suite_cumulative_product(trees: int = 20, depth: int = 4, seed: int = 0,
                             drifts: tuple[float, ...] = (0.2, 0.05, 0.01), c: float = 4.0,
                             p: float = 0.5) -> dict:
    """Drift budget of products with constant conditional excess ``d``.

    The horizon for ``d`` is ``r = floor(c * m**p)`` with ``m = 4 / d``.
    Trees branch only on their first ``depth`` levels so long horizons stay
    small.
    """
    ms = [round(4.0 / d) for d in drifts]
    rep = horizon_from_drift(DriftSequence(tuple(ms), tuple(drifts)), c=c, p=p)
    horizons = [int(r) for r in rep.horizon.values]
    errors, slack_seq = [], []
    for d, r in zip(drifts, horizons):
        slack_d = []
        for k in range(trees):
            rng = instance_rng(seed, k)
            branching = [int(rng.integers(1, 3)) if n < depth else 1 for n in range(r)]
            tree = build_tree(branching)
            e0 = float(rng.uniform(0.5, 2.0))
            fam, e = two_point_factors(rng, tree, lambda n: 1.0 + d, root_value=e0)
            E = cumulative_product(e)
            total = 0.0
            for n in range(r):
                delta = drift_delta(fam, 0, E, n)
                pp = fam.path_probabilities(0)[tree.level_slice(n)]
                total += float(pp @ np.maximum(delta, 0.0))
                eta = np.full(tree.level_size(n), d)
                errors.append(float(np.max(np.abs(delta - E.level(n) * eta))) / max(1.0, float(np.max(E.level(n)))))
            bound = product_slack_bound(expectation(fam, 0, E, 0), d, r)
            errors.append(abs(total - bound) / max(1.0, bound))
            slack_d.append(total)
        slack_seq.append(float(np.mean(slack_d)) / 1.0)
    unit = [product_slack_bound(1.0, d, r) for d, r in zip(drifts, horizons)]
    decreasing = all(b < a for a, b in zip(unit, unit[1:]))
    out = _result("cumprod", trees * len(drifts), errors, ms=ms, horizons=horizons,
                  unit_slack=unit, slack_decreasing=decreasing)
    out["verdict"] = out["verdict"] and decreasing
    return out


def suite_mixture(trees: int = 50, depth: int = 3, seed: int = 0) -> dict:
    """``E[E_tau] <= 1 + sum_{i <= rho} w_i eps_i`` for every enumerated ``tau``."""
    errors = []
    for k in range(trees):
        rng = instance_rng(seed, k)
        tree = random_tree(rng, depth)
        eps = rng.uniform(-0.2, 0.3, tree.depth + 1)
        fam, e = two_point_factors(rng, tree, lambda n: 1.0 + eps[n], root_value=1.0 + eps[0])
        w = rng.dirichlet(np.ones(tree.depth + 2))[: tree.depth + 1]
        E = time_mixture(w, e)
        for rho in range(tree.depth + 1):
            taus = enumerate_stopping_times(tree, rho)
            vals = stopped_expectations(fam, E, taus)[0]
            bound = mixture_bound(fam, 0, w, e, rho)
            errors.append(max(float(np.max(vals)) - bound, 0.0))
    return _result("mixture", trees, errors)


def suite_diagonal(trees: int = 1, depth: int = 3, seed: int = 0, max_m: int = 12, d: float = 0.1) -> dict:
    """The diagonal product exceeds ``(1 + d)**m`` at time zero and fails certification."""
    ms = tuple(range(1, max_m + 1))
    bi = diagonal_biprocess(ms, depth, d=d)
    gaps = []
    for m, row, fam in zip(ms, bi.rows, bi.families):
        gaps.append((1 + d) ** m - expectation(fam, 0, row, 0))
    report = certify_asymptotic(bi, lambda m: 1.0 / (m + 1), method="envelope")
    below = [max(g, 0.0) for g in gaps]
    out = _result("diagonal", len(ms), below, ms=list(ms), trend=report.to_json())
    out["verdict"] = report.verdict
    out["counterexample_confirmed"] = (out["violations"] == 0) and not report.verdict
    return out


def suite_diagonal_horizon(trees: int = 1, depth: int = 4, seed: int = 0, max_m: int = 400) -> dict:
    """``x_{n,m} = 1 + n/m`` with ``N_n = n**2``."""
    n_max = int(math.isqrt(max_m))
    cols = np.arange(max_m + 1, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = 1.0 + np.arange(n_max + 2)[:, None] / cols[None, :]
    thresholds = [n * n for n in range(1, n_max + 1)]
    r = diagonal_horizon(x, thresholds)
    covered = range(1, max_m + 1)
    err = [max(x[r[m], m] - (1 + 1 / r[m]), 0.0) for m in covered]
    monotone = bool(np.all(np.diff(r) >= 0))
    reaches = all(n in set(r.tolist()) for n in range(1, n_max + 1))
    out = _result("diagonal-horizon", len(covered), err, nondecreasing=monotone, reaches_all=reaches)
    out["verdict"] = out["verdict"] and monotone and reaches
    return out


def suite_calibration(trees: int = 1, depth: int = 2, seed: int = 0,
                      ms: tuple[int, ...] = (4, 8, 16, 32, 64, 128, 256), kappa: float = 0.5,
                      cap: float = 10.0) -> dict:
    """Atoms at zero: unbounded calibration blows up, capped calibration converges."""
    parr = atom_p_array(ms, depth=depth)
    raw = calibrate(parr, CalibratorSpec(kappa))
    capped = calibrate(parr, CalibratorSpec(kappa, cap))
    trend = certify_asymptotic(capped, [0.05] * len(ms), method="envelope", min_tail=1)
    alphas = (0.001, 0.01, 0.05, 0.1)
    laws = {}
    for m in ms:
        q, w = parr.q(m)
        laws[m] = (q, w[0])
    strong = check_strong_p(laws, alphas)
    out = {
        "suite": "calibration",
        "instances": len(ms),
        "non_integrable": list(raw.flags["non_integrable"]),
        "capped_trend": trend.to_json(),
        "strong_passes": strong.strong_passes,
        "weak_passes": {str(a): v for a, v in strong.weak_passes.items()},
    }
    out["verdict"] = (len(raw.flags["non_integrable"]) == len(ms) and trend.verdict
                      and not strong.strong_passes)
    return out


SUITES: dict[str, Callable[..., dict]] = {
    "optional-sampling": suite_optional_sampling,
    "snell": suite_snell,
    "doob": suite_doob,
    "ville": suite_ville,
    "cumprod": suite_cumulative_product,
    "mixture": suite_mixture,
    "diagonal": suite_diagonal,
    "diagonal-horizon": suite_diagonal_horizon,
    "calibration": suite_calibration,
}


def run_suite(name: str, trees: int = 100, depth: int = 4, seed: int = 0) -> dict:
    try:
        fn = SUITES[name]
    except KeyError:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}") from None
    return fn(trees=trees, depth=depth, seed=seed)
