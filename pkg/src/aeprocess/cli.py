"""Command line entry point: ``aeprocess {simulate,verify,horizon,calibrate,mixture}``.

Exit codes: 0 on success, 2 when a run completes but a certificate or
verdict fails, 1 on any error (bad input, bad config, tooling failure).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import suites
from .constructions import CalibratorSpec, PArray, calibrate, horizon_from_drift, time_mixture
from .montecarlo import SimConfig, experiment_grid
from .prob_core import (
    BiProcess,
    Bundle,
    DriftSequence,
    HorizonSequence,
    TreeProcess,
    bundle_from_dict,
    bundle_to_dict,
    read_bundle,
    write_bundle,
)
from .verifier import certify_asymptotic

log = logging.getLogger("aeprocess")

EXIT_OK, EXIT_ERROR, EXIT_FAILED = 0, 1, 2


class ConfigError(ValueError):
    pass


_INT_KEYS = {"n_traj", "n_end", "seed"}
_FLOAT_KEYS = {"a", "sigma", "b", "c", "alpha"}
_LIST_KEYS = {"m_grid": int, "p_exp": float}


def config_from_mapping(raw: dict) -> SimConfig:
    """Validate a flat mapping and fill in defaults; errors name the key."""
    known = {f.name for f in fields(SimConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
        if key in _INT_KEYS:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{key!r} must be an integer, got {value!r}")
        elif key in _FLOAT_KEYS:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key!r} must be a number, got {value!r}")
            value = float(value)
        elif key in _LIST_KEYS:
            kind = _LIST_KEYS[key]
            items = value if isinstance(value, list) else [value]
            for item in items:
                ok = isinstance(item, int) if kind is int else isinstance(item, (int, float))
                if isinstance(item, bool) or not ok:
                    raise ConfigError(f"{key!r} entries must be {kind.__name__}, got {item!r}")
            value = tuple(kind(x) for x in items)
        kwargs[key] = value
    try:
        return SimConfig(**kwargs)
    except ValueError as exc:
        bad = next((k for k in kwargs if k in str(exc)), None)
        raise ConfigError(f"{bad or 'config'}: {exc}") from exc


def parse_config(path: str | Path | None) -> SimConfig:
    if path is None:
        return SimConfig()
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        raw = json.loads(text) if text.strip() else {}
    else:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"unknown key {nested[0]!r} (tables are not supported)")
    return config_from_mapping(raw)


def _write_manifest(out: Path, subcommand: str, config: dict, seed, started: float, files: list[Path],
                    extra: dict | None = None) -> Path:
    target = out.with_name(out.stem + ".manifest.json")
    doc = {
        "subcommand": subcommand,
        "config": config,
        "version": __version__,
        "seed": seed,
        "duration_s": round(time.perf_counter() - started, 6),
        "outputs": [str(f) for f in files] + [str(target)],
    }
    if extra:
        doc.update(extra)
    target.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return target


# --- subcommands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    started = time.perf_counter()
    config = parse_config(args.config)
    if args.seed is not None:
        config = config_from_mapping({**config.to_dict(), "seed": args.seed})
    out = Path(args.out)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = experiment_grid(config, workers=args.workers, keep_paths=args.paths)
    for w in caught:
        log.warning("%s", w.message)
    report.write_csv(out)
    files = [out]
    if args.paths:
        files += report.write_paths(out.parent)
    _write_manifest(out, "simulate", config.to_dict(), config.seed, started, files,
                    {"warnings": [str(w.message) for w in caught]})
    return EXIT_OK


def biprocess_to_doc(bi: BiProcess) -> dict:
    """Rows on separate trees: ``{"rows": [bundle + {"m": m}, ...]}``."""
    rows = []
    for m, row, fam in zip(bi.ms, bi.rows, bi.families):
        doc = bundle_to_dict(Bundle(row.tree, fam, {row.name or f"E_{m}": row}))
        doc["m"] = int(m)
        if bi.horizon is not None:
            h = bi.horizon[m]
            doc["horizon"] = None if h == math.inf else int(h)
        rows.append(doc)
    return {"rows": rows}


def load_biprocess(path: str | Path) -> BiProcess:
    """Read either a single bundle (one process per row) or a ``rows`` document."""
    doc = json.loads(Path(path).read_text())
    if "rows" in doc:
        rows, fams, ms, hs = [], [], [], []
        for k, part in enumerate(doc["rows"]):
            b = bundle_from_dict(part)
            if len(b.processes) != 1:
                raise ConfigError(f"row {k} must hold exactly one process")
            (proc,) = b.processes.values()
            rows.append(TreeProcess(b.tree, proc.values, nonnegative=True, name=proc.name))
            fams.append(b.family)
            ms.append(int(part.get("m", k)))
            h = part.get("horizon")
            hs.append(math.inf if h is None else float(h))
        horizon = HorizonSequence(tuple(ms), tuple(hs)) if any(h != math.inf for h in hs) else None
        return BiProcess(tuple(rows), tuple(fams), tuple(ms), horizon=horizon)
    bundle = bundle_from_dict(doc)
    rows = tuple(TreeProcess(bundle.tree, p.values, nonnegative=True, name=name)
                 for name, p in bundle.processes.items())
    ms = tuple(int(m) for m in bundle.extra.get("m", range(len(rows))))
    horizon = None
    if "horizon" in bundle.extra:
        hs = [math.inf if h is None else float(h) for h in bundle.extra["horizon"]]
        horizon = HorizonSequence(ms, tuple(hs))
    return BiProcess(rows, (bundle.family,) * len(rows), ms, horizon=horizon)


def cmd_verify(args) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    if args.bundle:
        bi = load_biprocess(args.bundle)
        tol = args.tolerance
        report = certify_asymptotic(bi, lambda m: tol / (m + 1), method=args.method, cap=args.cap)
        doc = report.to_json()
        verdict = report.verdict
        config = {"bundle": str(args.bundle), "tolerance": tol, "method": args.method}
    else:
        if args.suite is None:
            raise ConfigError("verify needs --suite or --bundle")
        result = suites.run_suite(args.suite, trees=args.trees, depth=args.depth, seed=args.seed or 0)
        doc = result
        verdict = bool(result["verdict"])
        config = {"suite": args.suite, "trees": args.trees, "depth": args.depth}
    out.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_json_default) + "\n")
    _write_manifest(out, "verify", config, args.seed, started, [out])
    return EXIT_OK if verdict else EXIT_FAILED


def cmd_horizon(args) -> int:
    started = time.perf_counter()
    config = parse_config(args.config)
    out = Path(args.out)
    drift = DriftSequence.from_rule(config.m_grid, config.drift)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("m", "p_exp", "d_m", "r_m", "r_times_d"))
    all_decay = True
    for p in config.p_exp:
        rep = horizon_from_drift(drift, c=config.c, p=p)
        all_decay &= rep.decays
        for m, d, r, prod in zip(drift.ms, drift.values, rep.horizon.values, rep.products):
            w.writerow((m, repr(p), repr(d), int(r), repr(prod)))
    out.write_text(buf.getvalue())
    _write_manifest(out, "horizon", config.to_dict(), config.seed, started, [out], {"decays": all_decay})
    return EXIT_OK if all_decay else EXIT_FAILED


def cmd_calibrate(args) -> int:
    started = time.perf_counter()
    if not args.bundle:
        raise ConfigError("calibrate needs --bundle")
    bundle = read_bundle(args.bundle)
    f = CalibratorSpec(kappa=args.kappa, cap=args.cap)
    names = list(bundle.processes)
    parr = PArray(tuple(bundle.processes.values()), (bundle.family,) * len(names), tuple(range(len(names))))
    bi = calibrate(parr, f)
    procs = {f"E_{name}": row for name, row in zip(names, bi.rows)}
    out = Path(args.out)
    write_bundle(Bundle(bundle.tree, bundle.family, procs), out)
    flagged = [names[i] for i in bi.flags["non_integrable"]]
    _write_manifest(out, "calibrate", {"kappa": args.kappa, "cap": args.cap, "bundle": str(args.bundle)},
                    args.seed, started, [out], {"non_integrable": flagged})
    return EXIT_OK


def _read_weights(path: Path) -> list[list[float]]:
    text = path.read_text()
    if path.suffix == ".json":
        rows = json.loads(text)
    else:
        rows = [[float(x) for x in line] for line in csv.reader(io.StringIO(text)) if line]
    if rows and not isinstance(rows[0], list):
        rows = [rows]
    return [[float(x) for x in row] for row in rows]


def cmd_mixture(args) -> int:
    started = time.perf_counter()
    if not args.bundle or not args.weights_file:
        raise ConfigError("mixture needs --bundle and --weights-file")
    bundle = read_bundle(args.bundle)
    weights = _read_weights(Path(args.weights_file))
    names = list(bundle.processes)
    if len(weights) == 1 and len(names) > 1:
        weights = weights * len(names)
    if len(weights) != len(names):
        raise ConfigError(f"{len(weights)} weight rows for {len(names)} factor processes")
    procs = {f"mix_{name}": time_mixture(w, bundle.processes[name]) for name, w in zip(names, weights)}
    out = Path(args.out)
    write_bundle(Bundle(bundle.tree, bundle.family, procs), out)
    _write_manifest(out, "mixture", {"weights_file": str(args.weights_file), "bundle": str(args.bundle)},
                    args.seed, started, [out])
    return EXIT_OK


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not serialisable: {type(obj).__name__}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aeprocess", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_default):
        p.add_argument("--config", help="flat key = value config file (TOML subset)")
        p.add_argument("--out", default=out_default)
        p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="Monte Carlo excursion probabilities")
    common(p, "results.csv")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--paths", type=int, default=0, help="keep k subsampled trajectories per (m, p)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="exact certificates on finite trees")
    common(p, "report.json")
    p.add_argument("--suite", choices=sorted(suites.SUITES))
    p.add_argument("--bundle", help="JSON bundle whose processes are the rows m = 0, 1, ...")
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--tolerance", type=float, default=1.0, help="schedule t_m = tolerance / (m + 1)")
    p.add_argument("--method", choices=("auto", "enumerate", "envelope"), default="auto")
    p.add_argument("--cap", type=int, default=10**6)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("horizon", help="horizons r_m from the drift rule")
    common(p, "horizon.csv")
    p.set_defaults(func=cmd_horizon)

    p = sub.add_parser("calibrate", help="calibrate p-value processes into e-processes")
    common(p, "calibrated.json")
    p.add_argument("--bundle")
    p.add_argument("--kappa", type=float, default=0.5)
    p.add_argument("--cap", type=float, default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("mixture", help="time mixture of factor processes")
    common(p, "mixture.json")
    p.add_argument("--bundle")
    p.add_argument("--weights-file", dest="weights_file")
    p.set_defaults(func=cmd_mixture)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(run())
