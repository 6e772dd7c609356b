"""Headline acceptance criteria, one test each.

Every test records a PASS/FAIL line through the ``criterion`` fixture; the
lines are repeated in the terminal summary of any pytest run.
"""
import csv
import json
import math
import time

import numpy as np
from scipy import stats

import oracles
from aeprocess.cli import biprocess_to_doc, run
from aeprocess.constructions import diagonal_biprocess, diagonal_row
from aeprocess.montecarlo import DEFAULT_M_GRID, SimConfig, sample_trunc_normal, substream, trunc_normal_params
from aeprocess.prob_core import expectation
from aeprocess.suites import instance_rng, random_family, random_process, random_tree, run_suite
from aeprocess.verifier import certify_row, diagonal_horizon

P_GRID = (0.25, 0.5, 0.75)


def simulate(tmp_path, n_traj, workers=1, seed=0, name="sim"):
    cfg = tmp_path / f"{name}.toml"
    cfg.write_text(f"n_traj = {n_traj}\np_exp = [0.25, 0.5, 0.75]\nseed = {seed}\n")
    out = tmp_path / f"{name}.csv"
    assert run(["simulate", "--config", str(cfg), "--out", str(out), "--workers", str(workers)]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return out, rows


def excursion_checks(rows, n_traj):
    """Bound at (4096, 1/2) and the within-two-half-widths trend for m >= 512."""
    table = {(int(r["m"]), float(r["p_exp"])): int(r["n_cross"]) for r in rows}
    bound = 0.05 + 3 * math.sqrt(0.05 * 0.95 / n_traj)
    p_top = table[(4096, 0.5)] / n_traj
    trend = {}
    for p in P_GRID:
        ms = [m for m in DEFAULT_M_GRID if m >= 512]
        hats = [table[(m, p)] / n_traj for m in ms]
        bands = [oracles.wilson(table[(m, p)], n_traj) for m in ms]
        hws = [(hi - lo) / 2 for lo, hi in bands]
        ok = all(hats[j + 1] <= hats[j] + 2 * hws[j + 1] for j in range(len(ms) - 1))
        trend[p] = (ok, [round(h, 4) for h in hats])
    return p_top, bound, trend


def test_simulation_reproduction(tmp_path, criterion):
    t0 = time.perf_counter()
    _, rows = simulate(tmp_path, 2000)
    elapsed = time.perf_counter() - t0
    assert len(rows) == len(DEFAULT_M_GRID) * len(P_GRID)
    p_top, bound, trend = excursion_checks(rows, 2000)
    ok_bound = criterion("simulate n=2000: p_hat(4096, p=0.5) <= 0.05 + 3 SE", p_top <= bound,
                         f"p_hat={p_top:.4f}, bound={bound:.4f}, {elapsed:.1f}s single worker")
    ok_trend = True
    for p, (ok, hats) in trend.items():
        ok_trend &= criterion(f"simulate n=2000: p_hat nonincreasing within 2 Wilson half-widths, p={p}",
                              ok, f"m>=512: {hats}")
    ok_time = criterion("simulate n=2000: runtime <= 300 s single worker", elapsed <= 300, f"{elapsed:.1f}s")

    # the full default trajectory count, reported but not gated
    _, rows = simulate(tmp_path, 10_000, name="full")
    p_top, bound, trend = excursion_checks(rows, 10_000)
    criterion("simulate n=10000 (informational): p_hat(4096, p=0.5) bound", None,
              f"{'holds' if p_top <= bound else 'fails'}: p_hat={p_top:.4f}, bound={bound:.4f}")
    for p, (ok, hats) in trend.items():
        criterion(f"simulate n=10000 (informational): trend p={p}", None,
                  f"{'holds' if ok else 'fails'}: m>=512: {hats}")
    assert ok_bound and ok_trend and ok_time


def test_optional_sampling(criterion):
    t0 = time.perf_counter()
    res = run_suite("optional-sampling", trees=100, depth=4, seed=0)
    elapsed = time.perf_counter() - t0
    ok = res["instances"] == 100 and res["violations"] == 0 and res["max_error"] <= 1e-12 and elapsed <= 30
    criterion("optional sampling: 100 supermartingales, zero violations, <= 30 s", ok,
              f"{res['stopping_times_checked']} stopping times, max excess {res['max_error']:.1e}, {elapsed:.2f}s")
    assert ok


def test_snell_envelope_equivalence(criterion):
    res = run_suite("snell", trees=50, depth=3, seed=0)
    # brute-force antichain oracle on the instances small enough for it
    worst, checked = 0.0, 0
    for k in range(50):
        rng = instance_rng(0, k)
        tree = random_tree(rng, 3)
        fam = random_family(rng, tree)
        E = random_process(rng, tree)
        rho = int(rng.integers(0, tree.depth + 1))
        if tree.n_nodes > 13:
            continue
        children = tree.to_children_lists()
        best = max(oracles.stopped_expectation(children, len(tree.roots), fam.probs[j], E.values, s, rho)
                   for j in range(len(fam)) for s in oracles.stopping_times(children, len(tree.roots), rho))
        env = certify_row(fam, E, rho, method="envelope").max_stopped_expectation
        worst = max(worst, abs(best - env))
        checked += 1
    ok = res["instances"] == 50 and res["max_error"] <= 1e-12 and worst <= 1e-12
    criterion("Snell envelope equals enumeration maximum (50 instances, depth <= 3)", ok,
              f"max gap {res['max_error']:.1e}; brute-force oracle gap {worst:.1e} on {checked} instances")
    assert ok


def test_doob_reconstruction(criterion):
    res = run_suite("doob", trees=100, depth=4, seed=0)
    ok = res["instances"] == 100 and res["violations"] == 0 and res["max_error"] <= 1e-12
    criterion("Doob: M + A = E, M martingale, A increments = drift (100 rows)", ok,
              f"max error {res['max_error']:.1e}")
    assert ok


def test_cumulative_product_slack(criterion):
    res = run_suite("cumprod", seed=0)
    horizons = [math.floor(4 * math.sqrt(m)) for m in res["ms"]]
    drifts = [4 / m for m in res["ms"]]
    unit = [(1 + d) ** r - 1 for d, r in zip(drifts, horizons)]
    ok = (res["violations"] == 0 and res["max_error"] <= 1e-12 and res["horizons"] == horizons
          and np.allclose(res["unit_slack"], unit, rtol=1e-12) and all(np.diff(unit) < 0))
    criterion("cumulative product: slack identity for d in {0.2, 0.05, 0.01}, decreasing slack", ok,
              f"max error {res['max_error']:.1e}; (1+d)^r - 1 = {[round(u, 3) for u in unit]}")
    assert ok


def diagonal_oracle(m, n, d=0.1, spread=0.5, first=(1.5, 0.5)):
    """Mean of prod_{i <= max(m, n)} e_ii over all equally likely factor outcomes."""
    vals = np.array(first)
    for _ in range(max(m, n)):
        vals = np.concatenate([vals * (1 + d + spread), vals * (1 + d - spread)])
    return float(vals.mean())


def test_diagonal_counterexample(tmp_path, criterion):
    worst, strict = math.inf, True
    for m in range(1, 21):
        fam, row = diagonal_row(m, 3)
        for n in range(4):
            ours = expectation(fam, 0, row, n)
            ref = diagonal_oracle(m, n)
            assert abs(ours - ref) <= 1e-12 * ref
        worst = min(worst, expectation(fam, 0, row, 0) / 1.1**m)
        if m < 3:
            strict &= certify_row(fam, row, math.inf, method="envelope").max_stopped_expectation > 1.1**m
    ok_growth = worst >= 1 - 1e-12 and strict
    criterion("diagonal product: E[E_m,0] >= 1.1^m (oracle) for m <= 20", ok_growth,
              f"min ratio {worst:.15f}; strictly above once tau may pass m")
    bundle = tmp_path / "diag.json"
    bundle.write_text(json.dumps(biprocess_to_doc(diagonal_biprocess(range(1, 13), 3))))
    code = run(["verify", "--bundle", str(bundle), "--out", str(tmp_path / "diag_report.json")])
    report = json.loads((tmp_path / "diag_report.json").read_text())
    ok_cli = code == 2 and report["verdict"] is False
    criterion("diagonal product: certify_asymptotic verdict false, exit code 2", ok_cli,
              f"exit {code}, verdict {report['verdict']}")
    assert ok_growth and ok_cli


def test_time_mixture_bound(criterion):
    res = run_suite("mixture", trees=50, depth=3, seed=0)
    ok = res["instances"] == 50 and res["violations"] == 0
    criterion("time mixture: E[E_tau] <= 1 + sum w eps + 1e-12 over every tau (50 instances)", ok,
              f"max excess {res['max_error']:.1e}")
    assert ok


def test_calibration_dichotomy(criterion):
    res = run_suite("calibration")
    ms = [4, 8, 16, 32, 64, 128, 256]
    trend = res["capped_trend"]
    ok_flags = res["non_integrable"] == ms
    ok_capped = trend["verdict"] and trend["slack"][-1] < 0.05
    # closed-form law of q_m: atom 1/m at 0, else uniform on {1/20, ..., 1}
    cdf = lambda m, a: 1 / m + (1 - 1 / m) * math.floor(20 * a + 1e-9) / 20  # noqa: E731
    strong_ref = all(cdf(m, 0.001) / 0.001 - 1 > 1 / m for m in ms)
    weak_ref = all(cdf(m, a) - a <= 1 / m for a in (0.01, 0.05, 0.1) for m in ms if a >= 2 / m)
    ok_p = (not res["strong_passes"]) and all(res["weak_passes"].values()) and strong_ref and weak_ref
    criterion("calibration: unbounded power calibrator flags atoms as non-integrable", ok_flags,
              f"flagged m = {res['non_integrable']}")
    criterion("calibration: capped calibrator slack falls below 0.05 by the largest m", ok_capped,
              f"slack at m=256: {trend['slack'][-1]:.4f}")
    criterion("calibration: atom case fails strong check, passes weak check", ok_p,
              f"weak {res['weak_passes']}")
    assert ok_flags and ok_capped and ok_p


def test_diagonal_horizon_lemma(criterion):
    max_m = 400
    cols = np.arange(max_m + 1, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = 1.0 + np.arange(22)[:, None] / cols[None, :]
    r = diagonal_horizon(x, [n * n for n in range(1, 21)])
    covered = range(1, max_m + 1)
    monotone = all(r[m + 1] >= r[m] for m in range(1, max_m))
    reaches = {n for n in range(1, 21) if n * n <= max_m} <= {int(r[m]) for m in covered}
    bounded = all(x[r[m], m] <= 1 + 1 / r[m] for m in covered)
    res = run_suite("diagonal-horizon")
    ok = monotone and reaches and bounded and res["verdict"]
    criterion("diagonal horizon: r nondecreasing, reaches every n, x[r_m, m] <= 1 + 1/r_m", ok,
              f"r_400 = {r[max_m]}")
    assert ok


def test_truncated_normal_moments(criterion):
    cfg = SimConfig()
    worst, ok_draws, details = 0.0, True, []
    for m in DEFAULT_M_GRID:
        d = cfg.drift(m)
        par = trunc_normal_params(d, cfg.sigma**2, cfg.b)
        worst = max(worst, abs(par.mean - d), abs(par.var - cfg.sigma**2))
        law = stats.truncnorm((cfg.b - par.mu0) / par.s0, np.inf, loc=par.mu0, scale=par.s0)
        assert abs(law.mean() - d) <= 1e-8 and abs(law.var() - cfg.sigma**2) <= 1e-8
        x = sample_trunc_normal(par, substream(0, m, 0), 1_000_000)
        z = (x.mean() - d) / (cfg.sigma / math.sqrt(x.size))
        ok_draws &= abs(z) <= 4 and x.min() >= cfg.b
        details.append(round(float(z), 2))
    ok = worst <= 1e-9 and ok_draws
    criterion("truncated normal: residuals <= 1e-9, 1e6-draw mean within 4 SE, min >= b", ok,
              f"max residual {worst:.1e}; z-scores {details}")
    assert ok


def test_determinism(tmp_path, criterion):
    a, _ = simulate(tmp_path, 2000, workers=1, seed=11, name="w1")
    b, _ = simulate(tmp_path, 2000, workers=2, seed=11, name="w2")
    c, _ = simulate(tmp_path, 2000, workers=4, seed=11, name="w4")
    ok = a.read_bytes() == b.read_bytes() == c.read_bytes()
    criterion("determinism: same seed, workers 1/2/4 give byte-identical CSV", ok)
    assert ok
