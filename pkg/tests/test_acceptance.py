"""Acceptance gate: ten numbered criteria, one pass/fail line each.

Criteria 5 through 9 share a single four-level two-plate refinement study
(session fixture), so the whole file runs in a couple of minutes. Run with
`pytest tests/test_acceptance.py -v -s` to see the per-criterion lines.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from slabfv import diagnostics as diag
from slabfv import scheme
from slabfv.grid import Grid, GridSpec
from slabfv.operators import identity_residuals
from slabfv.scheme import (
    NumParams,
    PhysParams,
    advance,
    assemble_residual,
    constant_walls,
    init_state,
    total_mass,
    two_plate_walls,
    upwind_masks,
)


def _line(num: int, ok: bool, detail: str) -> str:
    text = f"criterion {num:02d} {'PASS' if ok else 'FAIL'}: {detail}"
    print(text)
    return text


# --- criterion 1: operator identities --------------------------------------------


def test_criterion_01_operator_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2026)
    worst = {}
    plan = ((2, 8, 25), (2, 64, 25), (3, 4, 25), (3, 16, 25))
    for d, n, fields in plan:
        grid = Grid(GridSpec(d, 0.5, 0.5, 1.0 / n))
        for _ in range(fields):
            for key, val in identity_residuals(grid, rng).items():
                worst[key] = max(worst.get(key, 0.0), float(val))
    elapsed = time.perf_counter() - t0
    peak = max(worst.values())
    ok = peak <= 1e-11 and elapsed <= 60.0
    msg = _line(1, ok, f"identities on 100 random fields, max relative "
                       f"residual {peak:.2e} (tol 1e-11), {elapsed:.1f} s")
    assert ok, msg


# --- criterion 2: constant data is a fixed point ----------------------------------


def test_criterion_02_constant_fixed_point():
    grid = Grid(GridSpec(2, 0.5, 0.5, 0.125))
    walls = constant_walls(1.3)
    phys = PhysParams(mu=0.1, eta=0.0, kappa=0.1, c_v=1.5, g=(0.0, 0.0),
                      theta_b=walls)
    num = NumParams(alpha=0.5, dt=0.1 * grid.h, eps_newton=1e-12)
    s0 = init_state(lambda x: np.full(x.shape[:-1], 1.1), 0,
                    lambda x: np.full(x.shape[:-1], 1.3), grid, phys)
    traj = advance(s0, 10, grid, phys, num)
    assert traj.failure is None

    s_end = traj.states[-1]
    drift = max(float(np.max(np.abs(s_end.rho - s0.rho))),
                float(np.max(np.abs(s_end.u - s0.u))),
                float(np.max(np.abs(s_end.theta - s0.theta))))

    values = diag.study_functionals(traj, phys)
    values.pop("effective_viscous_flux")  # product probe, nonzero by design
    phi = diag.default_test_suite(grid, traj.final_time)["space_compact"]
    phi_c = np.asarray(phi.fn(0.0, grid.cell_centers()), float)
    renorm = max(
        abs(diag.renormalized_residual(traj.states[k - 1], traj.states[k],
                                       grid, num, lambda z: z * z,
                                       lambda z: 2.0 * z, phi_c))
        for k in range(1, len(traj.states)))
    values["renormalized_square"] = renorm
    values["rho_log_rho"] = float(np.max(np.abs(diag.rho_log_rho_series(traj))))

    worst_name = max(values, key=lambda k: abs(values[k]))
    worst = abs(values[worst_name])
    ok = drift <= 1e-12 and worst <= 1e-10
    msg = _line(2, ok, f"10-step drift {drift:.2e} (tol 1e-12), largest "
                       f"functional |{worst_name}| = {worst:.2e} (tol 1e-10)")
    assert ok, msg


# --- criterion 3: conservation and renormalization --------------------------------


def test_criterion_03_conservation_renormalization():
    grid = Grid(GridSpec(2, 0.5, 0.5, 1.0 / 16))
    walls = constant_walls(1.0)
    phys = PhysParams(mu=0.1, eta=0.0, kappa=0.1, c_v=1.5, g=(0.0, 0.0),
                      theta_b=walls)
    num = NumParams(alpha=0.5, dt=0.1 * grid.h, eps_newton=1e-11)
    L, H = grid.spec.L, grid.spec.H

    def rho0(x):
        return 1.0 + 0.1 * np.sin(np.pi * x[..., 0] / L) * np.cos(np.pi * x[..., 1] / (2 * H))

    def theta0(x):
        return 1.0 + 0.1 * np.cos(np.pi * x[..., 0] / L + 0.3) * np.cos(np.pi * x[..., 1] / (2 * H))

    def u0(x):
        ux = 0.1 * np.sin(np.pi * x[..., 0] / L) * np.cos(np.pi * x[..., 1] / (2 * H))
        return np.stack([ux, np.zeros_like(ux)], axis=-1)

    traj = advance(init_state(rho0, u0, theta0, grid, phys), 100, grid, phys, num)
    assert traj.failure is None

    masses = np.array([total_mass(s, grid) for s in traj.states])
    mass_drift = float(np.max(np.abs(masses - masses[0]))) / abs(masses[0])

    phi = diag.default_test_suite(grid, traj.final_time)["space_compact"]
    phi_c = np.asarray(phi.fn(0.0, grid.cell_centers()), float)
    renorm = max(
        abs(diag.renormalized_residual(traj.states[k - 1], traj.states[k],
                                       grid, num, lambda z: z * z,
                                       lambda z: 2.0 * z, phi_c))
        for k in range(1, len(traj.states)))

    series = diag.rho_log_rho_series(traj)
    dumps = series[::10]
    log_defect = float(np.max(dumps))

    ok = mass_drift <= 1e-9 and renorm <= 1e-8 and log_defect <= 1e-10
    msg = _line(3, ok, f"mass drift {mass_drift:.2e} (tol 1e-9), square "
                       f"renormalization residual {renorm:.2e} per step (tol 1e-8), "
                       f"rho log rho defect {log_defect:.2e} at dumps (tol 1e-10)")
    assert ok, msg


# --- criterion 4: Newton linearization vs central differences ---------------------


def test_criterion_04_jacobian_matches_central_differences():
    grid = Grid(GridSpec(2, 0.5, 0.5, 0.125))
    walls = constant_walls(1.0)
    phys = PhysParams(mu=0.1, eta=0.0, kappa=0.1, c_v=1.5, g=(0.0, -1.0),
                      theta_b=walls)
    num = NumParams(alpha=0.5, dt=0.0125)
    rng = np.random.default_rng(2026)
    n = grid.n_cells
    worst = 0.0
    for _ in range(20):
        rho = 1.0 + 0.3 * rng.random(grid.shape)
        th = 1.0 + 0.3 * rng.random(grid.shape)
        u = 0.4 * rng.standard_normal(grid.shape + (grid.d,))
        tb = phys.theta_b.faces(grid, 0.0)
        base = scheme.State(rho, u, th, tb, 1)
        prev = scheme.State(1.0 + 0.3 * rng.random(grid.shape),
                            0.4 * rng.standard_normal(grid.shape + (grid.d,)),
                            1.0 + 0.3 * rng.random(grid.shape), tb, 0)
        masks = upwind_masks(base, grid)
        J = scheme._assemble_jacobian(base, grid, phys, num,
                                      scheme._cache_for(grid), masks)

        def res_flat(state):
            return assemble_residual(prev, state, num.dt, grid, phys, num,
                                     masks=masks, theta_b=tb).flat()

        eps = 1e-5
        for _ in range(2):
            v = rng.standard_normal((grid.d + 2) * n)
            v /= np.max(np.abs(v))
            dr, du, dth = scheme._split_update(v, grid)
            plus = scheme.State(base.rho + eps * dr, base.u + eps * du,
                                base.theta + eps * dth, tb, 1)
            minus = scheme.State(base.rho - eps * dr, base.u - eps * du,
                                 base.theta - eps * dth, tb, 1)
            fd = (res_flat(plus) - res_flat(minus)) / (2 * eps)
            jv = J @ v
            denom = max(float(np.max(np.abs(jv))), 1e-12)
            worst = max(worst, float(np.max(np.abs(jv - fd))) / denom)
    ok = worst <= 1e-6
    msg = _line(4, ok, f"frozen-upwind Jacobian vs central differences on 20 "
                       f"random states, worst relative error {worst:.2e} (tol 1e-6)")
    assert ok, msg


# --- shared four-level refinement study (criteria 5 through 9) --------------------


STUDY_LEVELS = (8, 16, 32, 64)
STUDY_T = 0.1


@pytest.fixture(scope="session")
def study():
    t0 = time.perf_counter()
    levels = []
    for N in STUDY_LEVELS:
        h = 1.0 / N
        grid = Grid(GridSpec(2, 0.5, 0.5, h))
        walls = two_plate_walls(1.0, 2.0, 0.5)
        phys = PhysParams(mu=0.1, eta=0.0, kappa=0.1, c_v=1.5, g=(0.0, -1.0),
                          theta_b=walls)
        num = NumParams(alpha=0.5, dt=0.1 * h, eps_newton=1e-11)
        L, H = 0.5, 0.5

        def rho0(x):
            return np.ones(x.shape[:-1])

        def theta0(x):
            return (1.5 + x[..., -1]
                    + 0.05 * np.sin(np.pi * x[..., 0] / L)
                    * np.cos(np.pi * x[..., -1] / (2 * H)))

        def u0(x):
            ux = 0.05 * np.sin(np.pi * x[..., 0] / L + 0.2) \
                * np.cos(np.pi * x[..., -1] / (2 * H))
            return np.stack([ux, np.zeros_like(ux)], axis=-1)

        traj = advance(init_state(rho0, u0, theta0, grid, phys),
                       round(STUDY_T / num.dt), grid, phys, num)
        assert traj.failure is None, f"study level {N} failed: {traj.failure}"
        levels.append({
            "N": N, "h": h, "grid": grid, "phys": phys, "num": num,
            "traj": traj,
            "values": diag.study_functionals(traj, phys),
            "report": diag.stability_norms(traj, phys, num),
        })
    elapsed = time.perf_counter() - t0
    print(f"\nstudy: levels {STUDY_LEVELS}, T = {STUDY_T}, {elapsed:.1f} s")
    return {"levels": levels, "elapsed": elapsed}


def _fit_order(study_levels, name):
    """Fitted decay order; identically-vanishing series count as exact."""
    values = [lv["values"][name] for lv in study_levels]
    if max(abs(v) for v in values) <= 1e-13:
        return None  # below assembly roundoff at every level
    series = diag.DefectSeries((lv["h"], lv["values"][name])
                               for lv in study_levels)
    return series.fit().order


def test_criterion_05_consistency_rates(study):
    orders = {name: _fit_order(study["levels"], name)
              for name in ("continuity", "momentum", "entropy")}
    ok = study["elapsed"] <= 900.0 and all(
        o is None or o >= 0.15 for o in orders.values())
    shown = ", ".join(f"{k} {'exact' if v is None else format(v, '.2f')}"
                      for k, v in orders.items())
    msg = _line(5, ok, f"consistency orders {shown} (each >= 0.15), study "
                       f"runtime {study['elapsed']:.0f} s (limit 900)")
    assert ok, msg


def test_criterion_06_compatibility_rates(study):
    thresholds = {"velocity_stress": 0.15, "speed_squared": 0.15,
                  "temperature": 0.9, "temperature_squared": 0.9}
    orders = {name: _fit_order(study["levels"], name) for name in thresholds}
    ok = all(o is None or o >= thresholds[name] for name, o in orders.items())
    shown = ", ".join(f"{k} {'exact' if v is None else format(v, '.2f')}"
                      for k, v in orders.items())
    msg = _line(6, ok, f"compatibility orders {shown}")
    assert ok, msg


def test_criterion_07_ballistic_one_sided(study):
    alpha = study["levels"][0]["num"].alpha
    normalized = []
    for lv in study["levels"]:
        h = lv["h"]
        neg = max(0.0, -lv["values"]["ballistic"])
        normalized.append(neg / (h ** ((1 - alpha) / 2) + h ** ((1 + alpha) / 2)))
    bound = max(4.0 * normalized[0], 1e-10)
    ok = all(v <= bound for v in normalized)
    msg = _line(7, ok, "normalized negative parts "
                + ", ".join(f"{v:.2e}" for v in normalized)
                + f" all within {bound:.2e}")
    assert ok, msg


def test_criterion_08_cauchy_refinement(study):
    levels = study["levels"]
    lions = [lv["values"]["effective_viscous_flux"] for lv in levels]
    lions_diffs = [abs(b - a) for a, b in zip(lions, lions[1:])]
    rho_dists = [diag.nested_l2_distance(a["traj"], b["traj"])["rho"]
                 for a, b in zip(levels, levels[1:])]
    ok = all(b < a for a, b in zip(lions_diffs, lions_diffs[1:])) \
        and all(b < a for a, b in zip(rho_dists, rho_dists[1:]))
    msg = _line(8, ok, "Lions differences "
                + ", ".join(f"{v:.2e}" for v in lions_diffs)
                + " strictly decreasing; density Cauchy distances "
                + ", ".join(f"{v:.2e}" for v in rho_dists) + " decreasing")
    assert ok, msg


def test_criterion_09_stability_boundedness(study):
    levels = study["levels"]
    scaled = [lv["report"].scaled(lv["h"], lv["num"].alpha) for lv in levels]
    violations = []
    for key in scaled[0]:
        bound = max(4.0 * scaled[0][key], 1e-14)
        for lv, sc in zip(levels, scaled):
            if sc[key] > bound:
                violations.append(f"{key} at N={lv['N']}: {sc[key]:.3e} > {bound:.3e}")
    # extreme values are reported, not gated: a positivity violation would be
    # a finding about the scheme, not a broken test
    for lv in levels:
        rep = lv["report"]
        print(f"  N={lv['N']:3d} extremes: rho [{rep.rho_min:.4f}, {rep.rho_max:.4f}]"
              f" theta [{rep.theta_min:.4f}, {rep.theta_max:.4f}]"
              f" speed {rep.speed_max:.4f} (positivity "
              f"{'held' if rep.rho_min > 0 and rep.theta_min > 0 else 'VIOLATED'})")
    ok = not violations
    msg = _line(9, ok, "scaled stability quantities within 4x coarsest"
                if ok else "; ".join(violations))
    assert ok, msg


# --- criterion 10: determinism -----------------------------------------------------


_CONFIG = """\
[grid]
d = 2
L = 0.5
H = 0.5
h = 0.125

[phys]
mu = 0.1
eta = 0.0
kappa = 0.1
c_v = 1.5
g = [0.0, -1.0]

[scenario]
init = "perturbed-constant"
n_steps = 10
seed = 11
"""


def test_criterion_10_determinism(tmp_path):
    from slabfv.cli import main

    cfg = tmp_path / "run.toml"
    cfg.write_text(_CONFIG)

    blobs = []
    for tag in ("a", "b"):
        outdir = tmp_path / tag
        assert main(["run", "--config", str(cfg), "--outdir", str(outdir)]) == 0
        blobs.append((outdir / "diagnostics.csv").read_bytes())
    byte_identical = blobs[0] == blobs[1]

    tables = []
    for threads in (1, 2):
        outdir = tmp_path / f"t{threads}"
        proc = subprocess.run(
            [sys.executable, "-m", "slabfv.cli", "run", "--config", str(cfg),
             "--outdir", str(outdir), "--threads", str(threads)],
            capture_output=True, text=True, cwd=tmp_path)
        assert proc.returncode == 0, proc.stderr
        rows = (outdir / "diagnostics.csv").read_text().strip().split("\n")
        tables.append(np.array([[float(v) for v in row.split(",")]
                                for row in rows[1:]]))
    scale = np.maximum(np.abs(tables[0]), 1e-300)
    thread_rel = float(np.max(np.abs(tables[0] - tables[1]) / scale))

    ok = byte_identical and thread_rel <= 1e-12
    msg = _line(10, ok, f"repeat runs byte-identical: {byte_identical}; "
                        f"threads 1 vs 2 relative difference {thread_rel:.2e} "
                        f"(tol 1e-12)")
    assert ok, msg


# --- auxiliary: rough-probe boundedness (not one of the ten) -----------------------


def test_rough_probe_pairings_bounded(study):
    levels = study["levels"]
    worst = []
    for lv in levels:
        lib = diag.w12_probe_library(lv["grid"], lv["traj"].final_time)
        vals = [abs(diag.consistency_internal_energy(lv["traj"], lv["phys"], probe))
                for probe in lib]
        assert all(np.isfinite(v) for v in vals)
        worst.append(max(vals))
    bound = 4.0 * worst[0]
    print("rough-probe worst pairings per level: "
          + ", ".join(f"{v:.3e}" for v in worst))
    assert all(v <= bound for v in worst)
