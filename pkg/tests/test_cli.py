import json
import subprocess
import sys
from pathlib import Path

import pytest

from fvlimit import cli, io


def run_cli(tmp_path, *argv, out="runs"):
    root = tmp_path / out
    code = cli.run(["--out", str(root), "--quiet", *argv])
    dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.exists() else []
    return code, (dirs[-1] if dirs else None)


def test_validate_logistic(tmp_path, capsys):
    code, d = run_cli(tmp_path, "validate", "logistic")
    assert code == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "h_eq" in out
    eq = json.loads((d / "equilibrium.json").read_text())
    assert eq["h_eq"] == pytest.approx([2.0], abs=1e-12)
    for name in ("validation.txt", "checks.csv", "flow_to_equilibrium.png", "manifest.json"):
        assert (d / name).exists()


def test_validate_decoupled_names_irreducibility(tmp_path, capsys):
    code, d = run_cli(tmp_path, "validate", "decoupled")
    assert code == cli.EXIT_INVALID
    assert "irreducib" in capsys.readouterr().out.lower()
    assert io.read_manifest(d / "manifest.json")["status"] == "validation_failure"


def test_malformed_config_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('name = "bad"\nq = 1\n[domain]\nkind = "finite"\nK = 2\n[rates]\nbeta = [["2"]]\n')
    assert run_cli(tmp_path, "validate", str(bad))[0] == cli.EXIT_CONFIG
    assert "'rho'" in capsys.readouterr().err


def test_unparsable_toml_and_bad_override(tmp_path):
    bad = tmp_path / "broken.toml"
    bad.write_text("q = = 1\n")
    assert run_cli(tmp_path, "validate", str(bad))[0] == cli.EXIT_CONFIG
    assert run_cli(tmp_path, "simulate", "logistic", "--N", "abc")[0] == cli.EXIT_CONFIG


def test_manifest_lists_every_file(tmp_path):
    code, d = run_cli(tmp_path, "simulate", "logistic", "--N", "100", "--replicates", "2")
    assert code == cli.EXIT_OK
    m = io.read_manifest(d / "manifest.json")
    on_disk = sorted(p.name for p in d.iterdir() if p.name != "manifest.json")
    assert m["files"] == on_disk
    assert {"trajectories.csv", "trajectories_meta.json", "events.jsonl", "density.png"} <= set(on_disk)
    assert m["run_hash"] == d.name and m["exit_code"] == 0 and m["seed"] == 1
    assert m["config"]["simulation"]["N"] == 100


def test_simulate_output_recomputes(tmp_path):
    code, d = run_cli(tmp_path, "simulate", "symmetric", "--N", "100", "--replicates", "2", "--T_end", "0.5")
    assert code == cli.EXIT_OK
    recs = io.read_trajectories(d / "trajectories.csv", d / "trajectories_meta.json")
    assert len(recs) == 2 and recs[0].q == 2


def test_lambda_writes_report(tmp_path):
    code, d = run_cli(tmp_path, "lambda", "logistic")
    assert code == cli.EXIT_OK
    rep = json.loads((d / "lambda_report.json").read_text())
    assert rep["slope_ok"] and rep["residual_slope"] >= rep["k_max"] + 0.5


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "fvlimit", "--out", str(tmp_path), "--quiet",
                          "reference", "logistic", "absorption"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "absorption" in res.stdout


def test_polarity_demo_reruns_identically(tmp_path):
    argv = ["demo", "polarity", "--N", "500", "--seed", "7", "--demo.chains", "3", "--demo.samples", "15"]
    code_a, a = run_cli(tmp_path, *argv, out="a")
    code_b, b = run_cli(tmp_path, *argv, out="b")
    assert code_a == code_b
    assert a.name == b.name
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    assert {"summary.csv", "metrics.json", "final_state_chain0.txt"} <= set(names)
    assert any(n.endswith(".png") for n in names)
    for n in names:
        if n == "manifest.json":
            assert io.read_manifest(a / n, True) == io.read_manifest(b / n, True)
        else:
            assert (a / n).read_bytes() == (b / n).read_bytes(), n
