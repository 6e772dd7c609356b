import json
import subprocess
import sys

import pytest

from aeprocess import __version__
from aeprocess.cli import ConfigError, biprocess_to_doc, config_from_mapping, parse_config, run
from aeprocess.constructions import diagonal_biprocess
from aeprocess.montecarlo import SimConfig
from aeprocess.prob_core import Bundle, MeasureFamily, TreeProcess, build_tree, read_bundle, write_bundle

SMALL = 'm_grid = [32, 64]\np_exp = [0.25, 0.5]\nn_traj = 150\n'


def write(path, text):
    path.write_text(text)
    return str(path)


# --- configuration ----------------------------------------------------------------

def test_empty_config_gives_defaults(tmp_path):
    assert parse_config(write(tmp_path / "c.toml", "")) == SimConfig()
    assert parse_config(None) == SimConfig()


def test_p_grid_override(tmp_path):
    cfg = parse_config(write(tmp_path / "c.toml", "p_exp = [0.25, 0.5, 0.75]\n"))
    assert cfg.p_exp == (0.25, 0.5, 0.75)
    assert parse_config(write(tmp_path / "d.toml", "p_exp = 0.75\n")).p_exp == (0.75,)


@pytest.mark.parametrize("text, key", [
    ("alpha = 1.5", "alpha"),
    ("alpah = 0.1", "alpah"),
    ('n_traj = "lots"', "n_traj"),
    ("seed = 1.5", "seed"),
    ("m_grid = [32, 0.5]", "m_grid"),
    ("sigma = -1.0", "sigma"),
    ("[section]\nx = 1", "section"),
])
def test_config_errors_name_the_key(tmp_path, text, key):
    with pytest.raises(ConfigError, match=key):
        parse_config(write(tmp_path / "c.toml", text + "\n"))


def test_malformed_config(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(write(tmp_path / "c.toml", "alpha = = 2\n"))


def test_integer_accepted_for_float_key():
    assert config_from_mapping({"a": 4}).a == 4.0


# --- simulate -----------------------------------------------------------------------

def test_simulate_writes_csv_and_manifest(tmp_path):
    cfg = write(tmp_path / "run.toml", SMALL)
    out = tmp_path / "results.csv"
    assert run(["simulate", "--config", cfg, "--out", str(out), "--seed", "7", "--paths", "2"]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 4
    assert all(line.endswith(",7") for line in lines[1:])
    manifest = json.loads((tmp_path / "results.manifest.json").read_text())
    assert manifest["subcommand"] == "simulate" and manifest["seed"] == 7
    assert manifest["version"] == __version__
    for f in manifest["outputs"]:
        assert (tmp_path / f).exists() or __import__("pathlib").Path(f).exists()
    assert sum("paths_" in f for f in manifest["outputs"]) == 4
    # the config echo reproduces the run
    assert config_from_mapping(manifest["config"]) == config_from_mapping(
        {**parse_config(cfg).to_dict(), "seed": 7})
    again = tmp_path / "again.csv"
    echo = write(tmp_path / "echo.json", json.dumps(manifest["config"]))
    assert run(["simulate", "--config", echo, "--out", str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_simulate_worker_count_does_not_change_bytes(tmp_path):
    cfg = write(tmp_path / "c.toml", SMALL)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(["simulate", "--config", cfg, "--out", str(a), "--seed", "3", "--workers", "1"]) == 0
    assert run(["simulate", "--config", cfg, "--out", str(b), "--seed", "3", "--workers", "3"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_simulate_bad_config_exits_one(tmp_path, capsys):
    cfg = write(tmp_path / "c.toml", "alpha = 1.5\n")
    assert run(["simulate", "--config", cfg, "--out", str(tmp_path / "x.csv")]) == 1
    assert "alpha" in capsys.readouterr().err


# --- verify ---------------------------------------------------------------------------

def test_verify_optional_sampling_suite(tmp_path):
    out = tmp_path / "report.json"
    code = run(["verify", "--suite", "optional-sampling", "--trees", "100", "--depth", "4",
                "--seed", "1", "--out", str(out)])
    assert code == 0
    rep = json.loads(out.read_text())
    assert rep["verdict"] and rep["violations"] == 0 and rep["instances"] == 100
    assert (tmp_path / "report.manifest.json").exists()


def test_verify_diagonal_bundle_exits_two(tmp_path):
    bundle = tmp_path / "diag.json"
    bundle.write_text(json.dumps(biprocess_to_doc(diagonal_biprocess(range(1, 7), 2))))
    out = tmp_path / "report.json"
    assert run(["verify", "--bundle", str(bundle), "--out", str(out)]) == 2
    rep = json.loads(out.read_text())
    assert set(rep) >= {"per_m", "verdict", "m0"}
    assert rep["verdict"] is False and rep["m0"] is None
    assert set(rep["per_m"][0]) >= {"m", "max", "tau", "measure"}
    assert [r["m"] for r in rep["per_m"]] == list(range(1, 7))


def test_verify_supermartingale_bundle_passes(tmp_path):
    tree = build_tree([2, 2])
    fam = MeasureFamily.uniform(tree)
    rows = {f"E{m}": TreeProcess.from_levels(tree, [[1.0], [1.5, 0.5], [2.0, 1.0, 0.5, 0.5]]) for m in range(3)}
    path = tmp_path / "b.json"
    write_bundle(Bundle(tree, fam, rows), path)
    out = tmp_path / "r.json"
    assert run(["verify", "--bundle", str(path), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["verdict"] and rep["m0"] == 0


def test_verify_needs_input(tmp_path):
    assert run(["verify", "--out", str(tmp_path / "r.json")]) == 1


def test_unknown_subcommand():
    assert run(["frobnicate"]) == 1


# --- horizon, calibrate, mixture --------------------------------------------------------

def test_horizon_subcommand(tmp_path):
    out = tmp_path / "h.csv"
    assert run(["horizon", "--config", write(tmp_path / "c.toml", ""), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "m,p_exp,d_m,r_m,r_times_d"
    assert lines[-1].startswith("4096,0.5,0.0009765625,256,")


def test_horizon_exit_two_when_products_grow(tmp_path):
    cfg = write(tmp_path / "c.toml", "a = 4.0\nc = 4.0\np_exp = 0.99\nm_grid = [1, 2, 3, 4, 5, 6, 7, 8]\n")
    assert run(["horizon", "--config", cfg, "--out", str(tmp_path / "h.csv")]) == 2


def p_bundle(tmp_path):
    tree = build_tree([2, 2])
    fam = MeasureFamily.uniform(tree)
    p = TreeProcess.from_levels(tree, [[0.3], [0.0, 0.5], [0.0, 0.2, 0.6, 0.9]])
    q = TreeProcess.constant(tree, 0.25)
    path = tmp_path / "p.json"
    write_bundle(Bundle(tree, fam, {"p0": p, "p1": q}), path)
    return path


def test_calibrate_flags_atoms(tmp_path):
    out = tmp_path / "c.json"
    assert run(["calibrate", "--bundle", str(p_bundle(tmp_path)), "--kappa", "0.5", "--out", str(out)]) == 0
    manifest = json.loads((tmp_path / "c.manifest.json").read_text())
    assert manifest["non_integrable"] == ["p0"]
    b = read_bundle(out)
    assert b.processes["E_p1"].values.tolist() == [1.0] * 7


def test_calibrate_with_cap(tmp_path):
    out = tmp_path / "c.json"
    assert run(["calibrate", "--bundle", str(p_bundle(tmp_path)), "--kappa", "0.5", "--cap", "4",
                "--out", str(out)]) == 0
    assert read_bundle(out).processes["E_p0"].values.max() == 4.0


def test_mixture_subcommand(tmp_path):
    tree = build_tree([2, 2])
    fam = MeasureFamily.uniform(tree)
    e = TreeProcess.from_levels(tree, [[1.0], [1.5, 0.5], [2, 1, 1, 0]])
    src = tmp_path / "e.json"
    write_bundle(Bundle(tree, fam, {"e": e}), src)
    weights = write(tmp_path / "w.json", "[0.5, 0.3, 0.2]")
    out = tmp_path / "mix.json"
    assert run(["mixture", "--bundle", str(src), "--weights-file", weights, "--out", str(out)]) == 0
    assert read_bundle(out).processes["mix_e"].levels()[2] == pytest.approx([1.35, 1.15, 0.85, 0.65])
    bad = write(tmp_path / "w.csv", "0.7,0.6\n")
    assert run(["mixture", "--bundle", str(src), "--weights-file", bad, "--out", str(out)]) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "aeprocess", "verify", "--suite", "diagonal",
                           "--out", str(tmp_path / "d.json")], capture_output=True, text=True)
    assert proc.returncode == 2
