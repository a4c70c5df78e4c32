"""Command line interface: runs, verification suites, and refinement studies.

Heavy imports are deferred until after --threads is applied, so the BLAS
thread pools honor the requested count. Everything written to disk is
deterministic for a fixed config, seed, and thread count: floats are
formatted with 17 significant digits and manifests are key-sorted JSON.

Subcommands and exit codes:

    run                 scenario execution; VTK snapshots, diagnostics.csv,
                        manifest.json
    verify-operators    operator identity suite on random fields (d=2 and 3)
    consistency-study   defect functionals across a refinement ladder;
                        rates.csv and stability.csv
    refine-study        nested-grid Cauchy differences; refine.csv

    0 success, 2 config error, 3 solver failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VERIFY = 4


class ConfigError(Exception):
    pass


_DEFAULTS = {
    "grid": {"d": 2, "L": 0.5, "H": 0.5, "h": 0.125},
    "phys": {"mu": 0.1, "eta": 0.0, "kappa": 0.1, "c_v": 1.5, "g": None},
    "num": {"alpha": 0.5, "dt": None, "c_t": 0.1, "eps_newton": 1e-11,
            "max_iter": 40, "damping_min": 1e-4},
    "scenario": {"init": "constant", "walls": "constant", "wall_value": 1.0,
                 "wall_bottom": 1.0, "wall_top": 2.0, "n_steps": None,
                 "T": None, "dump_every": 10, "seed": 0},
    "output": {"outdir": "out"},
}

_INITS = ("constant", "perturbed-constant", "thermal-layer")
_WALLS = ("constant", "two-plate")

# CLI flag -> (section, key); n_steps and T clear each other so an override
# never conflicts with the file value it replaces
_OVERRIDES = {
    "h": ("grid", "h"), "alpha": ("num", "alpha"), "dt": ("num", "dt"),
    "n_steps": ("scenario", "n_steps"), "T": ("scenario", "T"),
    "dump_every": ("scenario", "dump_every"), "seed": ("scenario", "seed"),
    "init": ("scenario", "init"), "walls": ("scenario", "walls"),
    "outdir": ("output", "outdir"),
}


def _load_config(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}")
    for section, table in raw.items():
        if section not in _DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key in table:
            if key not in _DEFAULTS[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]")
    return raw


def _resolve_config(args) -> dict:
    cfg = copy.deepcopy(_DEFAULTS)
    raw = _load_config(args.config)
    for section, table in raw.items():
        cfg[section].update(table)
    for flag, (section, key) in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
            if key == "n_steps":
                cfg["scenario"]["T"] = None
            elif key == "T":
                cfg["scenario"]["n_steps"] = None
    return cfg


def _build_problem(cfg: dict):
    """Construct grid, wall data, parameters; validation errors become config errors."""
    from .grid import Grid, GridSpec
    from .scheme import NumParams, PhysParams, constant_walls, two_plate_walls

    gc, pc, nc, sc = cfg["grid"], cfg["phys"], cfg["num"], cfg["scenario"]
    try:
        grid = Grid(GridSpec(int(gc["d"]), float(gc["L"]), float(gc["H"]),
                             float(gc["h"])))
        if sc["walls"] == "constant":
            walls = constant_walls(float(sc["wall_value"]))
        elif sc["walls"] == "two-plate":
            walls = two_plate_walls(float(sc["wall_bottom"]),
                                    float(sc["wall_top"]), float(gc["H"]))
        else:
            raise ConfigError(
                f"unknown walls '{sc['walls']}'; choose one of {', '.join(_WALLS)}")
        g = pc["g"]
        if g is None:
            g = [0.0] * grid.d
        if len(g) != grid.d:
            raise ConfigError(f"g must have {grid.d} components, got {len(g)}")
        phys = PhysParams(mu=float(pc["mu"]), eta=float(pc["eta"]),
                          kappa=float(pc["kappa"]), c_v=float(pc["c_v"]),
                          g=tuple(float(v) for v in g), theta_b=walls)
        dt = nc["dt"]
        if dt is None:
            dt = float(nc["c_t"]) * grid.h
        num = NumParams(alpha=float(nc["alpha"]), dt=float(dt),
                        eps_newton=float(nc["eps_newton"]),
                        max_iter=int(nc["max_iter"]),
                        damping_min=float(nc["damping_min"]))
    except ValueError as e:
        raise ConfigError(str(e))

    n_steps, T = sc["n_steps"], sc["T"]
    if n_steps is None and T is None:
        raise ConfigError("scenario needs n_steps or T")
    if n_steps is None:
        n_steps = round(float(T) / num.dt)
        if n_steps < 1 or abs(n_steps * num.dt - T) > 1e-9 * max(abs(T), num.dt):
            raise ConfigError(f"T = {T} is not a positive multiple of dt = {num.dt}")
    elif T is not None and abs(int(n_steps) * num.dt - float(T)) > 1e-9 * max(abs(T), num.dt):
        raise ConfigError(
            f"n_steps = {n_steps} and T = {T} disagree: T must equal n_steps*dt = "
            f"{int(n_steps) * num.dt}")
    n_steps = int(n_steps)
    # write back the resolved duration so the manifest has no hidden defaults
    cfg["num"]["dt"] = num.dt
    cfg["num"]["c_t"] = num.dt / grid.h
    cfg["phys"]["g"] = list(phys.g)
    sc["n_steps"] = n_steps
    sc["T"] = n_steps * num.dt
    return grid, phys, num, n_steps


def _initial_state(cfg: dict, grid, phys):
    import numpy as np

    from .scheme import init_state

    L, H = grid.spec.L, grid.spec.H
    sc = cfg["scenario"]
    name = sc["init"]

    def horizontal(x, phase=0.0):
        return np.sin(np.pi * x[..., 0] / L + phase)

    def wall_cos(x):
        return np.cos(np.pi * x[..., -1] / (2 * H))

    def velocity(amplitude, phase):
        def u0(x):
            ux = amplitude * horizontal(x, phase) * wall_cos(x)
            comps = [ux] + [np.zeros_like(ux)] * (grid.d - 1)
            return np.stack(comps, axis=-1)
        return u0

    if name == "constant":
        value = float(sc["wall_value"])
        rho0 = lambda x: np.ones(x.shape[:-1])
        theta0 = lambda x: np.full(x.shape[:-1], value)
        u0 = 0
    elif name == "perturbed-constant":
        rho0 = lambda x: 1.0 + 0.1 * horizontal(x) * wall_cos(x)
        theta0 = lambda x: 1.0 + 0.1 * np.cos(np.pi * x[..., 0] / L + 0.3) * wall_cos(x)
        u0 = velocity(0.1, 0.0)
    elif name == "thermal-layer":
        bot, top = float(sc["wall_bottom"]), float(sc["wall_top"])
        mid, slope = 0.5 * (bot + top), (top - bot) / (2 * H)
        rho0 = lambda x: np.ones(x.shape[:-1])
        theta0 = lambda x: mid + slope * x[..., -1] + 0.05 * horizontal(x) * wall_cos(x)
        u0 = velocity(0.05, 0.2)
    else:
        raise ConfigError(
            f"unknown init '{name}'; choose one of {', '.join(_INITS)}")
    return init_state(rho0, u0, theta0, grid, phys)


# --- output helpers -------------------------------------------------------------


def _g17(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_g17(row[key]) for key in header))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_manifest(path, payload: dict) -> None:
    try:
        from importlib.metadata import version
        pkg_version = version("artifact")
    except Exception:
        pkg_version = "unknown"
    payload = dict(payload)
    payload["package"] = {"name": "artifact", "version": pkg_version}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


DIAGNOSTIC_COLUMNS = [
    "step", "time", "mass", "total_energy",
    "rho_min", "rho_max", "theta_min", "theta_max", "speed_max",
    "grad_theta_sq", "grad_u_sq", "grad_u_edge_sq", "jump_dissipation",
    "wall_mismatch", "rho_log_rho", "newton_iterations", "newton_residual",
]


def _diagnostics_rows(traj, grid, phys, num):
    import numpy as np

    from . import diagnostics as diag
    from .scheme import total_mass

    series = diag.rho_log_rho_series(traj)
    rows = []
    for k, s in enumerate(traj.states):
        ln = diag.level_norms(s, grid, phys, num)
        ext = s.extremes()
        energy = grid.cell_volume * float(
            np.sum(0.5 * s.rho * np.sum(s.u ** 2, axis=-1)
                   + phys.c_v * s.rho * s.theta))
        stats = traj.stats[k - 1] if k >= 1 else None
        rows.append({
            "step": k, "time": k * traj.dt,
            "mass": total_mass(s, grid), "total_energy": energy,
            "rho_min": ext["rho_min"], "rho_max": ext["rho_max"],
            "theta_min": ext["theta_min"], "theta_max": ext["theta_max"],
            "speed_max": ext["speed_max"],
            "grad_theta_sq": ln["grad_theta_sq"], "grad_u_sq": ln["grad_u_sq"],
            "grad_u_edge_sq": ln["grad_u_edge_sq"], "jump_dissipation": ln["jump"],
            "wall_mismatch": ln["wall_mismatch"], "rho_log_rho": float(series[k]),
            "newton_iterations": stats.iterations if stats else 0,
            "newton_residual": stats.residual_norm if stats else 0.0,
        })
    return rows


def _cmd_run(args) -> int:
    started = time.perf_counter()
    cfg = _resolve_config(args)
    grid, phys, num, n_steps = _build_problem(cfg)
    state0 = _initial_state(cfg, grid, phys)

    from .fields import write_vtk
    from .scheme import advance

    traj = advance(state0, n_steps, grid, phys, num)

    outdir = cfg["output"]["outdir"]
    snapdir = os.path.join(outdir, "snapshots")
    os.makedirs(snapdir, exist_ok=True)

    dump_every = max(1, int(cfg["scenario"]["dump_every"]))
    last = len(traj.states) - 1
    snapshots = []
    for k, s in enumerate(traj.states):
        if k % dump_every == 0 or k == last:
            name = f"step_{k:06d}.vtk"
            write_vtk(os.path.join(snapdir, name), grid, s, title=f"step {k}")
            snapshots.append(name)

    _write_csv(os.path.join(outdir, "diagnostics.csv"), DIAGNOSTIC_COLUMNS,
               _diagnostics_rows(traj, grid, phys, num))

    failure = None if traj.failure is None else str(traj.failure)
    _write_manifest(os.path.join(outdir, "manifest.json"), {
        "command": "run",
        "config": cfg,
        "derived": {"shape": list(grid.shape), "n_cells": grid.n_cells,
                    "steps_completed": last, "final_time": traj.final_time},
        "threads": args.threads,
        "failure": failure,
        "runtime_seconds": time.perf_counter() - started,
        "outputs": {"diagnostics": "diagnostics.csv",
                    "snapshots": snapshots},
    })
    if failure is not None:
        print(f"solver failure after {last} steps: {failure}", file=sys.stderr)
        print(f"partial outputs retained in {outdir}", file=sys.stderr)
        return EXIT_SOLVER
    print(f"run complete: {last} steps, outputs in {outdir}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    started = time.perf_counter()
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s]
    except ValueError:
        raise ConfigError(f"cannot parse sizes '{args.sizes}'")
    if not sizes or min(sizes) < 2:
        raise ConfigError("sizes must be integers >= 2")

    import numpy as np

    from .grid import Grid, GridSpec
    from .operators import identity_residuals

    rng = np.random.default_rng(args.seed)
    worst = {}
    for d in (2, 3):
        for n in sizes:
            grid = Grid(GridSpec(d, 0.5, 0.5, 1.0 / n))
            for _ in range(args.fields):
                res = identity_residuals(grid, rng, broken_ghost=args.break_ghost)
                for key, val in res.items():
                    worst[key] = max(worst.get(key, 0.0), float(val))

    passed = all(val <= args.tol for val in worst.values())
    for key in sorted(worst):
        status = "ok" if worst[key] <= args.tol else "FAIL"
        print(f"{key:28s} {worst[key]:12.3e}  {status}")
    runtime = time.perf_counter() - started
    print(f"{'result':28s} {'PASS' if passed else 'FAIL'}  ({runtime:.2f} s)")

    if args.outdir:
        os.makedirs(args.outdir, exist_ok=True)
        _write_manifest(os.path.join(args.outdir, "verify_manifest.json"), {
            "command": "verify-operators",
            "seed": args.seed, "sizes": sizes, "fields": args.fields,
            "tolerance": args.tol, "break_ghost": bool(args.break_ghost),
            "max_residuals": worst, "passed": passed,
            "runtime_seconds": runtime, "threads": args.threads,
        })
    return EXIT_OK if passed else EXIT_VERIFY


def _parse_levels(text: str, minimum: int):
    try:
        levels = [int(s) for s in text.split(",") if s]
    except ValueError:
        raise ConfigError(f"cannot parse levels '{text}'")
    if len(levels) < minimum:
        raise ConfigError(f"need at least {minimum} levels, got {len(levels)}")
    if sorted(levels) != levels or len(set(levels)) != len(levels):
        raise ConfigError("levels must be strictly increasing cell counts")
    return levels


def _run_level(cfg: dict, n_cells: int):
    """Run the configured scenario with n_cells cells across the period."""
    from .scheme import advance

    lcfg = copy.deepcopy(cfg)
    lcfg["grid"]["h"] = 2.0 * float(cfg["grid"]["L"]) / n_cells
    lcfg["num"]["dt"] = None  # rescale dt = c_t h with the level spacing
    if cfg["scenario"]["T"] is None and cfg["scenario"]["n_steps"] is not None:
        # pin the physical horizon of the base config across levels
        base_dt = cfg["num"]["dt"]
        if base_dt is None:
            base_dt = float(cfg["num"]["c_t"]) * float(cfg["grid"]["h"])
        lcfg["scenario"]["T"] = cfg["scenario"]["n_steps"] * base_dt
        lcfg["scenario"]["n_steps"] = None
    grid, phys, num, n_steps = _build_problem(lcfg)
    state0 = _initial_state(lcfg, grid, phys)
    traj = advance(state0, n_steps, grid, phys, num)
    return lcfg, grid, phys, num, traj


_RATE_FUNCTIONALS = [
    "continuity", "momentum", "internal_energy", "entropy", "ballistic",
    "velocity_stress", "speed_squared", "temperature", "temperature_squared",
]

STABILITY_COLUMNS = [
    "h", "grad_theta_l2", "grad_u_l2", "time_derivative_l2",
    "jump_dissipation", "wall_mismatch_scaled", "grad_u_edge_scaled",
    "rho_min", "rho_max", "theta_min", "theta_max", "speed_max", "lam",
]


def _cmd_consistency_study(args) -> int:
    started = time.perf_counter()
    cfg = _resolve_config(args)
    levels = _parse_levels(args.levels, minimum=3)

    from . import diagnostics as diag

    outdir = cfg["output"]["outdir"]
    os.makedirs(outdir, exist_ok=True)

    per_level = []  # (h, values dict or None)
    stab_rows = []
    failures = []
    for n_cells in levels:
        lcfg, grid, phys, num, traj = _run_level(cfg, n_cells)
        if traj.failure is not None:
            per_level.append((grid.h, None))
            failures.append(f"{n_cells}: {traj.failure}")
            print(f"level {n_cells}: solver failure, row marked", file=sys.stderr)
            continue
        values = diag.study_functionals(traj, phys)
        per_level.append((grid.h, values))
        report = diag.stability_norms(traj, phys, num)
        row = {"h": grid.h}
        row.update(report.scaled(grid.h, num.alpha))
        for key in ("rho_min", "rho_max", "theta_min", "theta_max",
                    "speed_max", "lam"):
            row[key] = getattr(report, key)
        stab_rows.append(row)

    rows = []
    for name in _RATE_FUNCTIONALS:
        series = diag.DefectSeries(
            (h, vals[name]) for h, vals in per_level if vals is not None)
        try:
            order = format(series.fit().order, ".17g")
        except ValueError:
            order = ""
        for h, vals in per_level:
            value = format(vals[name], ".17g") if vals is not None else "nan"
            rows.append({"functional": name, "h": h, "value": value,
                         "order": order if vals is not None else ""})
    lions = [(h, vals["effective_viscous_flux"])
             for h, vals in per_level if vals is not None]
    for h, value in lions:
        rows.append({"functional": "effective_viscous_flux", "h": h,
                     "value": format(value, ".17g"), "order": ""})
    for (h_c, v_c), (h_f, v_f) in zip(lions, lions[1:]):
        rows.append({"functional": "effective_viscous_flux_diff", "h": h_f,
                     "value": format(abs(v_f - v_c), ".17g"), "order": ""})

    _write_csv(os.path.join(outdir, "rates.csv"),
               ["functional", "h", "value", "order"], rows)
    _write_csv(os.path.join(outdir, "stability.csv"), STABILITY_COLUMNS, stab_rows)
    _write_manifest(os.path.join(outdir, "study_manifest.json"), {
        "command": "consistency-study",
        "config": cfg, "levels": levels, "failures": failures,
        "threads": args.threads,
        "runtime_seconds": time.perf_counter() - started,
        "outputs": {"rates": "rates.csv", "stability": "stability.csv"},
    })
    if len(failures) == len(levels):
        return EXIT_SOLVER
    print(f"consistency study complete: {len(levels)} levels, outputs in {outdir}")
    return EXIT_OK


def _cmd_refine_study(args) -> int:
    started = time.perf_counter()
    cfg = _resolve_config(args)
    levels = _parse_levels(args.levels, minimum=2)

    from . import diagnostics as diag

    outdir = cfg["output"]["outdir"]
    os.makedirs(outdir, exist_ok=True)

    runs = []
    failures = []
    for n_cells in levels:
        lcfg, grid, phys, num, traj = _run_level(cfg, n_cells)
        if traj.failure is not None:
            runs.append(None)
            failures.append(f"{n_cells}: {traj.failure}")
            print(f"level {n_cells}: solver failure, pair skipped", file=sys.stderr)
            continue
        suite = diag.default_test_suite(grid, traj.final_time)
        lions = diag.effective_viscous_flux(traj, phys, suite["psi_interior"],
                                            suite["space_compact"])
        runs.append((grid, phys, traj, lions))

    rows = []
    for coarse, fine in zip(runs, runs[1:]):
        if coarse is None or fine is None:
            continue
        dist = diag.nested_l2_distance(coarse[2], fine[2])
        rows.append({
            "h_coarse": coarse[0].h, "h_fine": fine[0].h,
            "rho": dist["rho"], "u": dist["u"], "theta": dist["theta"],
            "lions_coarse": coarse[3], "lions_fine": fine[3],
            "lions_diff": abs(fine[3] - coarse[3]),
        })

    _write_csv(os.path.join(outdir, "refine.csv"),
               ["h_coarse", "h_fine", "rho", "u", "theta",
                "lions_coarse", "lions_fine", "lions_diff"], rows)
    _write_manifest(os.path.join(outdir, "refine_manifest.json"), {
        "command": "refine-study",
        "config": cfg, "levels": levels, "failures": failures,
        "threads": args.threads,
        "runtime_seconds": time.perf_counter() - started,
        "outputs": {"refine": "refine.csv"},
    })
    if not rows:
        return EXIT_SOLVER
    print(f"refine study complete: {len(rows)} pairs, outputs in {outdir}")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="pin BLAS/OpenMP thread pools before numpy loads")
    common.add_argument("--outdir", default=None, help="output directory")

    parser = argparse.ArgumentParser(
        prog="slabfv",
        description="Finite volume solver for a heat-conducting viscous gas "
                    "in a periodic slab, with its verification harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="run one scenario")
    run.add_argument("--config", required=True, help="TOML config file")
    run.add_argument("--h", type=float, default=None)
    run.add_argument("--alpha", type=float, default=None)
    run.add_argument("--dt", type=float, default=None)
    run.add_argument("--n-steps", dest="n_steps", type=int, default=None)
    run.add_argument("--T", type=float, default=None)
    run.add_argument("--dump-every", dest="dump_every", type=int, default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--init", choices=_INITS, default=None)
    run.add_argument("--walls", choices=_WALLS, default=None)

    verify = sub.add_parser("verify-operators", parents=[common],
                            help="operator identity suite on random fields")
    verify.add_argument("--sizes", default="4,8",
                        help="comma-separated cells per direction")
    verify.add_argument("--fields", type=int, default=10,
                        help="random fields per grid")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--tol", type=float, default=1e-11)
    verify.add_argument("--break-ghost", action="store_true",
                        help="negative control: wrong wall ghost in the Korn identity")

    for name, fn_help in (("consistency-study", "defect rates across a refinement ladder"),
                          ("refine-study", "nested-grid Cauchy differences")):
        study = sub.add_parser(name, parents=[common], help=fn_help)
        study.add_argument("--config", required=True)
        study.add_argument("--levels", required=True,
                           help="comma-separated cells per direction, ascending")
    return parser


def _apply_threads(n) -> None:
    if n is None:
        return
    if n < 1:
        raise ConfigError("threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


_COMMANDS = {
    "run": _cmd_run,
    "verify-operators": _cmd_verify,
    "consistency-study": _cmd_consistency_study,
    "refine-study": _cmd_refine_study,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(sys.argv[1:] if argv is None else list(argv))
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        _apply_threads(args.threads)
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
