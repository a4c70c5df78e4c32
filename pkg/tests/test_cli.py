"""End-to-end tests of the command line interface.

Most tests drive main() in process; determinism across thread counts uses
real subprocesses so the environment pinning is exercised.
"""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from slabfv.cli import main

BASE = """
[grid]
d = 2
L = 0.5
H = 0.5
h = 0.25

[phys]
mu = 0.1
eta = 0.0
kappa = 0.1
c_v = 1.5
g = [0.0, 0.0]

[num]
alpha = 0.5
c_t = 0.1
eps_newton = 1e-11

[scenario]
init = "constant"
walls = "constant"
wall_value = 1.0
n_steps = 10
dump_every = 5
seed = 7
"""


def write_cfg(tmp_path, text=BASE, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_constant_scenario(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "out"
    rc = main(["run", "--config", str(cfg), "--outdir", str(out)])
    assert rc == 0
    rows = read_csv(out / "diagnostics.csv")
    assert len(rows) == 11
    header = list(rows[0])
    assert header[:4] == ["step", "time", "mass", "total_energy"]
    masses = [float(r["mass"]) for r in rows]
    assert max(masses) - min(masses) <= 1e-12 * abs(masses[0])

    snaps = sorted((out / "snapshots").glob("*.vtk"))
    assert [p.name for p in snaps] == ["step_000000.vtk", "step_000005.vtk",
                                       "step_000010.vtk"]
    text = snaps[0].read_text()
    assert "SCALARS rho double" in text and "VECTORS u double" in text

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["failure"] is None
    assert manifest["config"]["scenario"]["n_steps"] == 10
    assert manifest["config"]["num"]["dt"] == pytest.approx(0.025)


def test_run_flag_overrides(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "out"
    rc = main(["run", "--config", str(cfg), "--outdir", str(out),
               "--n-steps", "5", "--dump-every", "2", "--seed", "3"])
    assert rc == 0
    rows = read_csv(out / "diagnostics.csv")
    assert len(rows) == 6
    snaps = sorted((out / "snapshots").glob("*.vtk"))
    # cadence plus the final state
    assert [p.name for p in snaps] == ["step_000000.vtk", "step_000002.vtk",
                                       "step_000004.vtk", "step_000005.vtk"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["scenario"]["seed"] == 3


def test_run_perturbed_rho_log_rho(tmp_path):
    text = BASE.replace('init = "constant"', 'init = "perturbed-constant"')
    text = text.replace("h = 0.25", "h = 0.125")
    text = text.replace("n_steps = 10", "n_steps = 50")
    cfg = write_cfg(tmp_path, text)
    out = tmp_path / "out"
    rc = main(["run", "--config", str(cfg), "--outdir", str(out)])
    assert rc == 0
    rows = read_csv(out / "diagnostics.csv")
    assert len(rows) == 51
    defects = [float(r["rho_log_rho"]) for r in rows]
    assert all(v <= 1e-10 for v in defects)
    assert defects[-1] < 0.0  # strictly dissipative once the flow moves


def test_config_error_alpha(tmp_path, capsys):
    cfg = write_cfg(tmp_path, BASE.replace("alpha = 0.5", "alpha = 1.5"))
    rc = main(["run", "--config", str(cfg), "--outdir", str(tmp_path / "o")])
    assert rc == 2
    assert "(-1, 1)" in capsys.readouterr().err


def test_config_error_unknown_init(tmp_path, capsys):
    cfg = write_cfg(tmp_path, BASE.replace('init = "constant"', 'init = "bogus"'))
    rc = main(["run", "--config", str(cfg), "--outdir", str(tmp_path / "o")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "bogus" in err and "perturbed-constant" in err


def test_config_error_missing_file(tmp_path, capsys):
    rc = main(["run", "--config", str(tmp_path / "nope.toml"),
               "--outdir", str(tmp_path / "o")])
    assert rc == 2
    assert "nope.toml" in capsys.readouterr().err


def test_config_error_unknown_key(tmp_path, capsys):
    cfg = write_cfg(tmp_path, BASE.replace("alpha = 0.5", "alpa = 0.5"))
    rc = main(["run", "--config", str(cfg), "--outdir", str(tmp_path / "o")])
    assert rc == 2
    assert "alpa" in capsys.readouterr().err


def test_config_error_inconsistent_duration(tmp_path, capsys):
    cfg = write_cfg(tmp_path, BASE.replace("n_steps = 10", "n_steps = 10\nT = 0.9"))
    rc = main(["run", "--config", str(cfg), "--outdir", str(tmp_path / "o")])
    assert rc == 2
    assert "n_steps" in capsys.readouterr().err


def test_duration_from_T(tmp_path):
    cfg = write_cfg(tmp_path, BASE.replace("n_steps = 10", "T = 0.1"))
    out = tmp_path / "out"
    rc = main(["run", "--config", str(cfg), "--outdir", str(out)])
    assert rc == 0
    rows = read_csv(out / "diagnostics.csv")
    assert len(rows) == 5  # dt = 0.025
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["scenario"]["n_steps"] == 4


def test_solver_failure_exit_code(tmp_path, capsys):
    text = BASE.replace('init = "constant"', 'init = "perturbed-constant"')
    text = text.replace("eps_newton = 1e-11", "eps_newton = 1e-16\nmax_iter = 1")
    cfg = write_cfg(tmp_path, text)
    out = tmp_path / "out"
    rc = main(["run", "--config", str(cfg), "--outdir", str(out)])
    assert rc == 3
    # partial outputs are retained
    assert (out / "diagnostics.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["failure"] is not None


def test_verify_operators(tmp_path, capsys):
    out = tmp_path / "v"
    rc = main(["verify-operators", "--sizes", "4", "--fields", "2",
               "--outdir", str(out), "--seed", "1"])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "korn" in stdout
    manifest = json.loads((out / "verify_manifest.json").read_text())
    assert manifest["passed"] is True
    assert manifest["runtime_seconds"] > 0.0
    assert all(v <= 1e-11 for v in manifest["max_residuals"].values())


def test_verify_operators_break_ghost(tmp_path, capsys):
    out = tmp_path / "v"
    rc = main(["verify-operators", "--sizes", "4", "--fields", "2",
               "--outdir", str(out), "--break-ghost"])
    assert rc == 4
    stdout = capsys.readouterr().out
    assert "korn" in stdout and "FAIL" in stdout
    manifest = json.loads((out / "verify_manifest.json").read_text())
    assert manifest["passed"] is False


STUDY = BASE.replace('init = "constant"', 'init = "thermal-layer"')
STUDY = STUDY.replace('walls = "constant"', 'walls = "two-plate"')
STUDY = STUDY.replace("wall_value = 1.0", "wall_bottom = 1.0\nwall_top = 2.0")
STUDY = STUDY.replace("n_steps = 10", "T = 0.1")
STUDY = STUDY.replace("g = [0.0, 0.0]", "g = [0.0, -1.0]")


def test_consistency_study(tmp_path):
    cfg = write_cfg(tmp_path, STUDY, "study.toml")
    out = tmp_path / "study"
    rc = main(["consistency-study", "--config", str(cfg), "--outdir", str(out),
               "--levels", "4,8,16"])
    assert rc == 0
    rows = read_csv(out / "rates.csv")
    names = {r["functional"] for r in rows}
    assert {"continuity", "momentum", "internal_energy", "entropy", "ballistic",
            "velocity_stress", "speed_squared", "temperature",
            "temperature_squared", "effective_viscous_flux"} <= names
    cont = [r for r in rows if r["functional"] == "continuity"]
    assert len(cont) == 3
    assert all(r["order"] == cont[0]["order"] != "" for r in cont)
    float(cont[0]["order"])  # parseable
    diffs = [r for r in rows if r["functional"] == "effective_viscous_flux_diff"]
    assert len(diffs) == 2
    stab = read_csv(out / "stability.csv")
    assert len(stab) == 3
    assert "wall_mismatch_scaled" in stab[0]
    assert "rho_min" in stab[0]


def test_consistency_study_needs_three_levels(tmp_path, capsys):
    cfg = write_cfg(tmp_path, STUDY, "study.toml")
    rc = main(["consistency-study", "--config", str(cfg),
               "--outdir", str(tmp_path / "s"), "--levels", "4,8"])
    assert rc == 2
    assert "3" in capsys.readouterr().err


def test_refine_study(tmp_path):
    cfg = write_cfg(tmp_path, STUDY, "study.toml")
    out = tmp_path / "refine"
    rc = main(["refine-study", "--config", str(cfg), "--outdir", str(out),
               "--levels", "4,8,16"])
    assert rc == 0
    rows = read_csv(out / "refine.csv")
    assert len(rows) == 2
    for r in rows:
        assert float(r["rho"]) > 0.0
        assert float(r["u"]) > 0.0
        assert float(r["theta"]) > 0.0
        assert float(r["lions_diff"]) >= 0.0
    assert float(rows[0]["h_coarse"]) == pytest.approx(0.25)
    assert float(rows[1]["h_coarse"]) == pytest.approx(0.125)


def test_run_determinism_bytes(tmp_path):
    text = BASE.replace('init = "constant"', 'init = "perturbed-constant"')
    cfg = write_cfg(tmp_path, text)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg), "--outdir", str(out1)]) == 0
    assert main(["run", "--config", str(cfg), "--outdir", str(out2)]) == 0
    b1 = (out1 / "diagnostics.csv").read_bytes()
    b2 = (out2 / "diagnostics.csv").read_bytes()
    assert b1 == b2


def test_threads_agreement_subprocess(tmp_path):
    text = BASE.replace('init = "constant"', 'init = "perturbed-constant"')
    text = text.replace("n_steps = 10", "n_steps = 5")
    cfg = write_cfg(tmp_path, text)
    outs = {}
    for n in (1, 2):
        out = tmp_path / f"t{n}"
        proc = subprocess.run(
            [sys.executable, "-m", "slabfv.cli", "run", "--config", str(cfg),
             "--outdir", str(out), "--threads", str(n)],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs[n] = read_csv(out / "diagnostics.csv")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["threads"] == n
    for r1, r2 in zip(outs[1], outs[2]):
        for key in r1:
            v1, v2 = float(r1[key]), float(r2[key])
            assert v1 == pytest.approx(v2, rel=1e-12, abs=1e-300)
