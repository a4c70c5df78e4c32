"""Verification functionals for the upwind finite volume scheme.

Everything in here is a measurable diagnostic of a computed trajectory:
discrete stability norms, the renormalized-continuity identity, weak-form
consistency defects of the conservation laws and of the entropy/ballistic
inequalities, the div-curl compatibility errors, and the effective viscous
flux (Lions identity) defect.

Quadrature conventions, shared by every functional:

* smooth factors are evaluated at cell centers, face centers, and interval
  midpoints;
* terms pairing a field with the time derivative of a test function are
  accumulated as exact increments field^(k-1) * (phi(t_k) - phi(t_{k-1})),
  so they telescope and constant trajectories evaluate to zero at machine
  precision;
* gradient pairings against cell fields use the per-cell flux form
  sum_a coeff_a * |face| * (phi(upper face) - phi(lower face)), the exact
  integral of the test-function derivative against a cell constant;
* edge (face-normal) gradients are integrated over dual cells: interior
  faces carry volume h^d split between the two adjacent cells, exterior
  faces keep only the interior half.

Piecewise-constant-in-time interpolants are sampled at the left endpoint of
each step; only the internal-energy functional, which tests the piecewise
linear interpolant of rho*theta, uses right-endpoint factors so that it
pairs with the k-th discrete equation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import operators as ops
from .fields import State
from .grid import Grid
from .scheme import NumParams, PhysParams, Trajectory, WallTemperature

__all__ = [
    "ScalarTestField", "VectorTestField", "TensorTestField",
    "time_bump", "interior_time_bump", "default_test_suite",
    "w12_probe_library",
    "StabilityReport", "level_norms", "stability_norms",
    "renormalized_residual", "rho_log_rho_series", "rho_log_rho_defect",
    "consistency_continuity", "consistency_momentum",
    "consistency_internal_energy", "consistency_entropy",
    "consistency_ballistic",
    "compatibility_errors", "effective_viscous_flux", "study_functionals",
    "RateFit", "DefectSeries", "rate_fit", "nested_l2_distance",
]


# --- test functions -----------------------------------------------------------


@dataclass(frozen=True)
class ScalarTestField:
    """Scalar test function phi(t, x) with x of shape (..., d)."""

    fn: Callable
    grad: Optional[Callable] = None
    label: str = ""
    compact: bool = False


@dataclass(frozen=True)
class VectorTestField:
    """Vector test function; fn(t, x) has the same trailing d axis as x."""

    fn: Callable
    label: str = ""
    compact: bool = False


@dataclass(frozen=True)
class TensorTestField:
    """Symmetric matrix test function; fn(t, x) has shape (..., d, d)."""

    fn: Callable
    label: str = ""


def _mollifier(s):
    out = np.zeros_like(s, dtype=float)
    pos = s > 0.0
    out[pos] = np.exp(-1.0 / s[pos])
    return out


def time_bump(T: float) -> Callable:
    """Smooth weight with value 1 at t=0 and all derivatives zero at t=T."""

    def eta(t):
        s = np.clip(np.asarray((T - t) / T, dtype=float), 0.0, 1.0)
        a = _mollifier(s)
        b = _mollifier(1.0 - s)
        return float(a / (a + b))

    return eta


def interior_time_bump(T: float) -> Callable:
    """Smooth bump supported strictly inside (0, T)."""

    def psi(t):
        s = 2.0 * t / T - 1.0
        if abs(s) >= 1.0:
            return 0.0
        return float(np.exp(1.0 - 1.0 / (1.0 - s * s)))

    return psi


_SUPPORT = 0.8  # wall-normal bumps live on |x_d| <= _SUPPORT * H


def _wall_bump(xd, H):
    s = np.asarray(xd, float) / (_SUPPORT * H)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
    return out


def _wall_bump_deriv(xd, H):
    s = np.asarray(xd, float) / (_SUPPORT * H)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    si = s[inside]
    out[inside] = (np.exp(1.0 - 1.0 / (1.0 - si ** 2))
                   * (-2.0 * si / (1.0 - si ** 2) ** 2) / (_SUPPORT * H))
    return out


def _horizontal_product(X, L, d, phase):
    out = np.ones(np.shape(X)[:-1])
    for j in range(d - 1):
        out = out * np.sin(np.pi * X[..., j] / L + phase)
    return out


def _horizontal_product_grad(X, L, d, phase, j):
    out = (np.pi / L) * np.cos(np.pi * X[..., j] / L + phase)
    for i in range(d - 1):
        if i != j:
            out = out * np.sin(np.pi * X[..., i] / L + phase)
    return out


def _scalar_slab(grid: Grid, T: float) -> ScalarTestField:
    L, H, d = grid.spec.L, grid.spec.H, grid.d
    eta = time_bump(T)

    def fn(t, X):
        X = np.asarray(X, float)
        P = _horizontal_product(X, L, d, 0.0)
        C = np.cos(np.pi * X[..., -1] / (2 * H))
        return eta(t) * (0.7 + 0.3 * X[..., -1] + P * C)

    def grad(t, X):
        X = np.asarray(X, float)
        e = eta(t)
        C = np.cos(np.pi * X[..., -1] / (2 * H))
        g = np.zeros(np.shape(X))
        for j in range(d - 1):
            g[..., j] = e * _horizontal_product_grad(X, L, d, 0.0, j) * C
        P = _horizontal_product(X, L, d, 0.0)
        g[..., -1] = e * (0.3 - P * (np.pi / (2 * H)) * np.sin(np.pi * X[..., -1] / (2 * H)))
        return g

    return ScalarTestField(fn=fn, grad=grad, label="slab-smooth")


def _scalar_bump(grid: Grid, T: float, phase: float, label: str,
                 weight: float = 0.5) -> ScalarTestField:
    L, H, d = grid.spec.L, grid.spec.H, grid.d
    eta = time_bump(T)

    def fn(t, X):
        X = np.asarray(X, float)
        b = _wall_bump(X[..., -1], H)
        return eta(t) * b * (1.0 + weight * _horizontal_product(X, L, d, phase))

    def grad(t, X):
        X = np.asarray(X, float)
        e = eta(t)
        b = _wall_bump(X[..., -1], H)
        db = _wall_bump_deriv(X[..., -1], H)
        g = np.zeros(np.shape(X))
        for j in range(d - 1):
            g[..., j] = e * b * weight * _horizontal_product_grad(X, L, d, phase, j)
        g[..., -1] = e * db * (1.0 + weight * _horizontal_product(X, L, d, phase))
        return g

    return ScalarTestField(fn=fn, grad=grad, label=label, compact=True)


def _vector_compact(grid: Grid, T: float) -> VectorTestField:
    L, H, d = grid.spec.L, grid.spec.H, grid.d
    eta = time_bump(T)

    def fn(t, X):
        X = np.asarray(X, float)
        b = _wall_bump(X[..., -1], H)
        e = eta(t)
        comps = [e * b * (0.5 + 0.5 * np.sin(np.pi * X[..., 0] / L + 0.3 + 0.7 * c))
                 for c in range(d)]
        return np.stack(comps, axis=-1)

    return VectorTestField(fn=fn, label="compact-vector", compact=True)


def _vector_smooth(grid: Grid, T: float) -> VectorTestField:
    # nonzero normal component at the walls; admissible for the temperature
    # compatibility pairings, which control the boundary terms themselves
    L, H, d = grid.spec.L, grid.spec.H, grid.d

    def fn(t, X):
        X = np.asarray(X, float)
        C = np.cos(np.pi * X[..., -1] / (2 * H))
        Swall = np.sin(np.pi * X[..., -1] / (2 * H))
        comps = [0.3 * np.sin(np.pi * X[..., 0] / L + 0.5 * (c + 1)) * C
                 for c in range(d - 1)]
        comps.append(0.4 + 0.2 * np.cos(np.pi * X[..., 0] / L + 0.3) * Swall)
        return np.stack(comps, axis=-1)

    return VectorTestField(fn=fn, label="slab-vector")


def _tensor_smooth(grid: Grid, T: float) -> TensorTestField:
    L, H, d = grid.spec.L, grid.spec.H, grid.d

    def fn(t, X):
        X = np.asarray(X, float)
        C = np.cos(np.pi * X[..., -1] / (2 * H))
        w1 = np.sin(np.pi * X[..., 0] / L) * C
        w2 = np.cos(np.pi * X[..., 0] / L + 0.4) * C
        out = np.zeros(np.shape(X)[:-1] + (d, d))
        for a in range(d):
            out[..., a, a] = 0.5 + 0.3 * w1
        out[..., 0, d - 1] += 0.2 * w2
        out[..., d - 1, 0] += 0.2 * w2
        return out

    return TensorTestField(fn=fn, label="slab-tensor")


def _space_compact(grid: Grid) -> ScalarTestField:
    L, H, d = grid.spec.L, grid.spec.H, grid.d

    def fn(t, X):
        X = np.asarray(X, float)
        b = _wall_bump(X[..., -1], H)
        return b * (1.0 + 0.5 * _horizontal_product(X, L, d, 0.1))

    return ScalarTestField(fn=fn, label="space-bump", compact=True)


def default_test_suite(grid: Grid, T: float) -> dict:
    """Standard admissible test functions used by the studies and the CLI."""
    return {
        "scalar_slab": _scalar_slab(grid, T),
        "scalar_compact": _scalar_bump(grid, T, 0.4, "compact-bump"),
        "scalar_nonneg": _scalar_bump(grid, T, 0.0, "nonneg-bump"),
        "vector_compact": _vector_compact(grid, T),
        "vector": _vector_smooth(grid, T),
        "tensor": _tensor_smooth(grid, T),
        "space_compact": _space_compact(grid),
        "psi": time_bump(T),
        "psi_interior": interior_time_bump(T),
    }


def w12_probe_library(grid: Grid, T: float) -> list:
    """Kink profiles (gradient only almost everywhere) vanishing at the walls.

    They probe the internal-energy defect against test functions that are
    merely square-integrable with their first derivatives.
    """
    L, H, d = grid.spec.L, grid.spec.H, grid.d
    eta = time_bump(T)

    def hat(xd, center, width):
        return np.maximum(0.0, 1.0 - np.abs(np.asarray(xd, float) - center) / width)

    def hat_deriv(xd, center, width):
        xd = np.asarray(xd, float)
        inside = np.abs(xd - center) < width
        return np.where(inside, -np.sign(xd - center) / width, 0.0)

    def make(center, width, hfn, hgrad, label):
        def fn(t, X):
            X = np.asarray(X, float)
            return eta(t) * hat(X[..., -1], center, width) * hfn(X)

        def grad(t, X):
            X = np.asarray(X, float)
            g = np.zeros(np.shape(X))
            e = eta(t)
            for j in range(d - 1):
                g[..., j] = e * hat(X[..., -1], center, width) * hgrad(X, j)
            g[..., -1] = e * hat_deriv(X[..., -1], center, width) * hfn(X)
            return g

        return ScalarTestField(fn=fn, grad=grad, label=label, compact=True)

    one = lambda X: np.ones(np.shape(X)[:-1])
    zero = lambda X, j: np.zeros(np.shape(X)[:-1])
    sin0 = lambda X: np.sin(np.pi * X[..., 0] / L)
    dsin0 = lambda X, j: ((np.pi / L) * np.cos(np.pi * X[..., 0] / L)
                          if j == 0 else np.zeros(np.shape(X)[:-1]))
    cos0 = lambda X: np.cos(np.pi * X[..., 0] / L + 0.7)
    dcos0 = lambda X, j: (-(np.pi / L) * np.sin(np.pi * X[..., 0] / L + 0.7)
                          if j == 0 else np.zeros(np.shape(X)[:-1]))
    return [
        make(0.0, _SUPPORT * H, one, zero, "hat"),
        make(0.0, _SUPPORT * H, sin0, dsin0, "hat-sin"),
        make(0.0, _SUPPORT * H, cos0, dcos0, "hat-cos"),
        make(0.2 * H, 0.6 * H, one, zero, "hat-offset"),
    ]


# --- quadrature helpers --------------------------------------------------------


def _face_diff(V: np.ndarray, a: int, grid: Grid) -> np.ndarray:
    """Per-cell difference of face values: upper face minus lower face."""
    if a == grid.wall:
        hi = [slice(None)] * V.ndim
        lo = [slice(None)] * V.ndim
        hi[a] = slice(1, None)
        lo[a] = slice(0, -1)
        return V[tuple(hi)] - V[tuple(lo)]
    return np.roll(V, -1, axis=a) - V


def _dual_sum(grid: Grid, a: int, q: np.ndarray, w: Optional[np.ndarray] = None) -> float:
    """Integrate a face quantity over dual cells with a side-local cell weight.

    Interior faces carry volume h^d split between the adjacent cells;
    exterior faces keep only the interior half (the ghost side has no volume).
    """
    if w is None:
        w = np.ones(grid.shape)
    if a == grid.wall:
        first = [slice(None)] * grid.d
        first[a] = slice(0, 1)
        rest = [slice(None)] * grid.d
        rest[a] = slice(1, None)
        zeros = np.zeros_like(w[tuple(first)])
        w_in = np.concatenate([w[tuple(first)], w], axis=a)
        w_out = np.concatenate([zeros, w[tuple(rest)], zeros], axis=a)
    else:
        w_in = np.roll(w, 1, axis=a)
        w_out = w
    return 0.5 * grid.cell_volume * float(np.sum(q * (w_in + w_out)))


def _theta_edge_grad(s: State, grid: Grid) -> list:
    ghost = ops.DirichletAffine(s.theta_b.bottom, s.theta_b.top)
    return ops.grad_edge(s.theta, grid, ghost)


def _interior(grid: Grid, arr: np.ndarray, a: int) -> np.ndarray:
    if a != grid.wall:
        return arr
    idx = [slice(None)] * arr.ndim
    idx[a] = slice(1, -1)
    return arr[tuple(idx)]


# --- stability norms -----------------------------------------------------------


@dataclass(frozen=True)
class StabilityReport:
    """Dissipation norms and extremes a stable run must keep bounded."""

    grad_theta_l2: float
    grad_u_l2: float
    grad_u_edge_l2: float
    time_derivative_l2: float
    jump_dissipation: float
    wall_mismatch: float
    rho_min: float
    rho_max: float
    theta_min: float
    theta_max: float
    speed_max: float
    lam: float

    def scaled(self, h: float, alpha: float) -> dict:
        """Quantities normalized so refinement should keep them bounded."""
        return {
            "grad_theta_l2": self.grad_theta_l2,
            "grad_u_l2": self.grad_u_l2,
            "time_derivative_l2": self.time_derivative_l2,
            "jump_dissipation": self.jump_dissipation,
            "wall_mismatch_scaled": self.wall_mismatch / h,
            "grad_u_edge_scaled": self.grad_u_edge_l2 * h ** (0.5 * (1.0 + alpha)),
        }


def level_norms(state: State, grid: Grid, phys: PhysParams, num: NumParams) -> dict:
    """Squared dissipation quantities of a single time level."""
    d = grid.d
    gtheta = _theta_edge_grad(state, grid)
    grad_theta_sq = sum(_dual_sum(grid, a, g * g) for a, g in enumerate(gtheta))

    grad_u_edge_sq = 0.0
    for c in range(d):
        gc = ops.grad_edge(state.u[..., c], grid, ops.MirrorOdd())
        grad_u_edge_sq += sum(_dual_sum(grid, a, g * g) for a, g in enumerate(gc))

    G = ops.grad_h_vec(state.u, grid)
    grad_u_sq = grid.cell_volume * float(np.sum(G * G))

    jump = 0.0
    for a in range(d):
        w = ops.face_traces(state.u[..., a], grid, a, ops.MirrorOdd()).avg
        jsq = ops.face_traces(state.rho, grid, a, ops.Even()).jump ** 2
        jsq += ops.face_traces(state.theta, grid, a, ops.Even()).jump ** 2
        for c in range(d):
            jsq += ops.face_traces(state.u[..., c], grid, a, ops.Even()).jump ** 2
        weighted = (grid.h ** num.alpha + np.abs(w)) * jsq
        jump += grid.face_area * float(np.sum(_interior(grid, weighted, a)))

    mismatch = grid.face_area * float(
        np.sum((state.theta[..., 0] - state.theta_b.bottom) ** 2)
        + np.sum((state.theta[..., -1] - state.theta_b.top) ** 2))

    return {"grad_theta_sq": grad_theta_sq, "grad_u_sq": grad_u_sq,
            "grad_u_edge_sq": grad_u_edge_sq, "jump": jump,
            "wall_mismatch": mismatch}


def stability_norms(traj: Trajectory, phys: PhysParams, num: NumParams) -> StabilityReport:
    """Accumulate the a priori quantities over a trajectory (levels 1..N)."""
    grid, dt = traj.grid, traj.dt
    keys = ("grad_theta_sq", "grad_u_sq", "grad_u_edge_sq", "jump", "wall_mismatch")
    acc = dict.fromkeys(keys, 0.0)
    dtsq = 0.0
    for k in range(1, len(traj.states)):
        s, p = traj.states[k], traj.states[k - 1]
        ln = level_norms(s, grid, phys, num)
        for key in keys:
            acc[key] += dt * ln[key]
        diff = ((s.rho - p.rho) ** 2 + (s.theta - p.theta) ** 2
                + np.sum((s.u - p.u) ** 2, axis=-1))
        dtsq += grid.cell_volume * float(np.sum(diff)) / dt

    ext = traj.states[0].extremes()
    for s in traj.states[1:]:
        e = s.extremes()
        for key in ("rho_min", "theta_min"):
            ext[key] = min(ext[key], e[key])
        for key in ("rho_max", "theta_max", "speed_max"):
            ext[key] = max(ext[key], e[key])

    ct = dt / grid.h
    lam = (traj.final_time + phys.theta_b.w2inf
           + 1.0 / ext["rho_min"] + ext["rho_max"]
           + 1.0 / ext["theta_min"] + ext["theta_max"]
           + ext["speed_max"] + 1.0 / ct + ct)
    return StabilityReport(
        grad_theta_l2=float(np.sqrt(acc["grad_theta_sq"])),
        grad_u_l2=float(np.sqrt(acc["grad_u_sq"])),
        grad_u_edge_l2=float(np.sqrt(acc["grad_u_edge_sq"])),
        time_derivative_l2=float(np.sqrt(dt) * np.sqrt(dtsq)),
        jump_dissipation=acc["jump"],
        wall_mismatch=acc["wall_mismatch"],
        rho_min=ext["rho_min"], rho_max=ext["rho_max"],
        theta_min=ext["theta_min"], theta_max=ext["theta_max"],
        speed_max=ext["speed_max"], lam=float(lam))


# --- renormalized continuity ----------------------------------------------------


def _bregman(B, Bp, a, b):
    return B(a) - Bp(b) * (a - b) - B(b)


def renormalized_residual(prev: State, cur: State, grid: Grid, num: NumParams,
                          B: Callable, Bp: Callable, phi: np.ndarray) -> float:
    """Defect of the renormalized mass update tested against a cell field.

    For linear B this reduces exactly to the weak form of the mass update;
    for convex B the defect is the solver residual weighted by B'(rho) phi.
    """
    dt, vol = num.dt, grid.cell_volume
    rho, rho_prev = cur.rho, prev.rho
    Brho = B(rho)
    divu = ops.div_h(cur.u, grid)

    lhs = vol * float(np.sum((Brho - B(rho_prev)) / dt * phi))
    lhs += vol * float(np.sum(phi * (rho * Bp(rho) - Brho) * divu))
    rhs = -vol / dt * float(np.sum(phi * _bregman(B, Bp, rho_prev, rho)))

    for a in range(grid.d):
        w = ops.face_traces(cur.u[..., a], grid, a, ops.MirrorOdd()).avg
        trB = ops.face_traces(Brho, grid, a, ops.Even())
        trr = ops.face_traces(rho, grid, a, ops.Even())
        trphi = ops.face_traces(phi, grid, a, ops.Even())
        trBpphi = ops.face_traces(Bp(rho) * phi, grid, a, ops.Even())
        pos = w >= 0.0
        B_up = np.where(pos, trB.v_in, trB.v_out)
        r_up = np.where(pos, trr.v_in, trr.v_out)
        r_down = np.where(pos, trr.v_out, trr.v_in)
        phi_down = np.where(pos, trphi.v_out, trphi.v_in)

        conv = _interior(grid, B_up * w * trphi.jump, a)
        jump = _interior(grid, trr.jump * trBpphi.jump, a)
        upwind = _interior(grid, np.abs(w) * phi_down * _bregman(B, Bp, r_up, r_down), a)

        lhs -= grid.face_area * float(np.sum(conv))
        rhs -= grid.h ** num.alpha * grid.face_area * float(np.sum(jump))
        rhs -= grid.face_area * float(np.sum(upwind))

    return lhs - rhs


def rho_log_rho_series(traj: Trajectory) -> np.ndarray:
    """Defect of the integrated rho log rho inequality at every time level.

    Entry m is sum_K h^d (B(rho^m) - B(rho^0)) plus the right-endpoint time
    sum of h^d rho^k div_h u^k, which the scheme keeps nonpositive.
    """
    grid = traj.grid
    vol = grid.cell_volume

    def blog(s):
        return vol * float(np.sum(s.rho * np.log(s.rho)))

    base = blog(traj.states[0])
    out = np.zeros(len(traj.states))
    acc = 0.0
    for k in range(1, len(traj.states)):
        s = traj.states[k]
        acc += traj.dt * vol * float(np.sum(s.rho * ops.div_h(s.u, grid)))
        out[k] = blog(s) - base + acc
    return out


def rho_log_rho_defect(traj: Trajectory, t: Optional[float] = None) -> float:
    series = rho_log_rho_series(traj)
    if t is None:
        return float(series[-1])
    k = int(round(t / traj.dt))
    if not 0 <= k < len(series):
        raise ValueError(f"time {t} outside the trajectory")
    return float(series[k])


# --- consistency functionals -----------------------------------------------------


def consistency_continuity(traj: Trajectory, phys: PhysParams,
                           test: ScalarTestField) -> float:
    """Weak-form mass defect against a test function vanishing at t=T."""
    grid, dt = traj.grid, traj.dt
    xc = grid.cell_centers()
    fx = [grid.face_centers(a) for a in range(grid.d)]

    s0 = traj.states[0]
    prev_vals = np.asarray(test.fn(0.0, xc), float)
    total = grid.cell_volume * float(np.sum(s0.rho * prev_vals))
    for k in range(1, len(traj.states)):
        s = traj.states[k - 1]
        tm = (k - 0.5) * dt
        cur_vals = np.asarray(test.fn(k * dt, xc), float)
        total += grid.cell_volume * float(np.sum(s.rho * (cur_vals - prev_vals)))
        prev_vals = cur_vals
        for a in range(grid.d):
            V = np.asarray(test.fn(tm, fx[a]), float)
            total += dt * grid.face_area * float(
                np.sum(s.rho * s.u[..., a] * _face_diff(V, a, grid)))
    return total


def consistency_momentum(traj: Trajectory, phys: PhysParams,
                         test: VectorTestField) -> float:
    """Weak-form momentum defect against a compactly supported vector field."""
    grid, dt = traj.grid, traj.dt
    d = grid.d
    xc = grid.cell_centers()
    fx = [grid.face_centers(a) for a in range(d)]
    sp = ops.StressParams(phys.mu, phys.eta, d)
    g = np.asarray(phys.g, float)
    idx = np.arange(d)

    s0 = traj.states[0]
    prev_vals = np.asarray(test.fn(0.0, xc), float)
    total = grid.cell_volume * float(np.sum(s0.rho[..., None] * s0.u * prev_vals))
    for k in range(1, len(traj.states)):
        s = traj.states[k - 1]
        tm = (k - 0.5) * dt
        cur_vals = np.asarray(test.fn(k * dt, xc), float)
        mom = s.rho[..., None] * s.u
        total += grid.cell_volume * float(np.sum(mom * (cur_vals - prev_vals)))
        prev_vals = cur_vals

        # rho u (x) u - S + p I, paired with the test-function gradient
        C = mom[..., :, None] * s.u[..., None, :] - ops.stress(s.u, grid, sp)
        C[..., idx, idx] += ops.pressure(s.rho, s.theta)[..., None]
        for a in range(d):
            V = np.asarray(test.fn(tm, fx[a]), float)
            dV = _face_diff(V, a, grid)
            total += dt * grid.face_area * float(np.sum(C[..., :, a] * dV))

        # gravity pairs with the sign that cancels against the discrete
        # balance: the body force sits on the source side of the update
        total += dt * grid.cell_volume * float(
            np.sum(s.rho[..., None] * g * np.asarray(test.fn(tm, xc), float)))
    return total


def consistency_internal_energy(traj: Trajectory, phys: PhysParams,
                                test: ScalarTestField) -> float:
    """Defect of the internal-energy balance for the time-linear interpolant.

    Uses right-endpoint factors so that interval k pairs exactly with the
    k-th discrete equation.
    """
    grid, dt = traj.grid, traj.dt
    d = grid.d
    xc = grid.cell_centers()
    fx = [grid.face_centers(a) for a in range(d)]
    sp = ops.StressParams(phys.mu, phys.eta, d)
    idx = np.arange(d)

    total = 0.0
    for k in range(1, len(traj.states)):
        prev, s = traj.states[k - 1], traj.states[k]
        tm = (k - 0.5) * dt
        phic = np.asarray(test.fn(tm, xc), float)

        dte = (s.rho * s.theta - prev.rho * prev.theta) / dt
        total += dt * phys.c_v * grid.cell_volume * float(np.sum(dte * phic))

        gtheta = _theta_edge_grad(s, grid)
        for a in range(d):
            V = np.asarray(test.fn(tm, fx[a]), float)
            coeff = phys.c_v * s.rho * s.theta * s.u[..., a]
            total -= dt * grid.face_area * float(np.sum(coeff * _face_diff(V, a, grid)))
            gp = np.asarray(test.grad(tm, fx[a]), float)[..., a]
            total += dt * phys.kappa * _dual_sum(grid, a, gtheta[a] * gp)

        A = ops.stress(s.u, grid, sp)
        A[..., idx, idx] -= ops.pressure(s.rho, s.theta)[..., None]
        G = ops.grad_h_vec(s.u, grid)
        total -= dt * grid.cell_volume * float(
            np.sum(phic * np.sum(A * G, axis=(-2, -1))))
    return total


def consistency_entropy(traj: Trajectory, phys: PhysParams,
                        test: ScalarTestField) -> float:
    """Defect of the entropy production inequality against phi >= 0.

    Should converge to zero from above: the scheme produces extra entropy.
    """
    grid, dt = traj.grid, traj.dt
    d = grid.d
    xc = grid.cell_centers()
    fx = [grid.face_centers(a) for a in range(d)]
    sp = ops.StressParams(phys.mu, phys.eta, d)

    s0 = traj.states[0]
    prev_vals = np.asarray(test.fn(0.0, xc), float)
    total = grid.cell_volume * float(
        np.sum(s0.rho * ops.entropy(s0.rho, s0.theta, phys.c_v) * prev_vals))
    for k in range(1, len(traj.states)):
        s = traj.states[k - 1]
        tm = (k - 0.5) * dt
        cur_vals = np.asarray(test.fn(k * dt, xc), float)
        rs = s.rho * ops.entropy(s.rho, s.theta, phys.c_v)
        total += grid.cell_volume * float(np.sum(rs * (cur_vals - prev_vals)))
        prev_vals = cur_vals

        phic = np.asarray(test.fn(tm, xc), float)
        gtheta = _theta_edge_grad(s, grid)
        for a in range(d):
            V = np.asarray(test.fn(tm, fx[a]), float)
            total += dt * grid.face_area * float(
                np.sum(rs * s.u[..., a] * _face_diff(V, a, grid)))
            gp = np.asarray(test.grad(tm, fx[a]), float)[..., a]
            total -= dt * phys.kappa * _dual_sum(grid, a, gtheta[a] * gp, w=1.0 / s.theta)
            total += dt * phys.kappa * _dual_sum(grid, a, gtheta[a] ** 2,
                                                 w=phic / s.theta ** 2)

        S = ops.stress(s.u, grid, sp)
        G = ops.grad_h_vec(s.u, grid)
        total += dt * grid.cell_volume * float(
            np.sum(phic / s.theta * np.sum(S * G, axis=(-2, -1))))
    return total


def consistency_ballistic(traj: Trajectory, phys: PhysParams, psi: Callable,
                          theta_ext: Optional[WallTemperature] = None) -> float:
    """Defect of the ballistic free-energy inequality.

    psi is a nonnegative time weight with psi(T) = 0; theta_ext is a positive
    extension of the wall data (defaults to the one carried by phys). The
    scheme keeps this defect bounded below by a consistency error, so its
    negative part should vanish under refinement.
    """
    grid, dt = traj.grid, traj.dt
    d = grid.d
    if theta_ext is None:
        theta_ext = phys.theta_b
    xc = grid.cell_centers()
    fx = [grid.face_centers(a) for a in range(d)]
    sp = ops.StressParams(phys.mu, phys.eta, d)
    g = np.asarray(phys.g, float)
    vol = grid.cell_volume

    def kinetic_internal(s):
        return 0.5 * s.rho * np.sum(s.u ** 2, axis=-1) + phys.c_v * s.rho * s.theta

    def rho_entropy(s):
        return s.rho * ops.entropy(s.rho, s.theta, phys.c_v)

    s0 = traj.states[0]
    psi_prev = psi(0.0)
    ext_prev = np.asarray(theta_ext.fn(0.0, xc), float)
    total = psi_prev * vol * float(np.sum(kinetic_internal(s0)))
    total -= psi_prev * vol * float(np.sum(rho_entropy(s0) * ext_prev))

    for k in range(1, len(traj.states)):
        s = traj.states[k - 1]
        tm = (k - 0.5) * dt
        psi_cur = psi(k * dt)
        ext_cur = np.asarray(theta_ext.fn(k * dt, xc), float)
        rs = rho_entropy(s)

        total += (psi_cur - psi_prev) * vol * float(np.sum(kinetic_internal(s)))
        total -= vol * float(np.sum(rs * (psi_cur * ext_cur - psi_prev * ext_prev)))
        psi_prev, ext_prev = psi_cur, ext_cur

        psi_m = psi(tm)
        total += dt * psi_m * vol * float(
            np.sum(s.rho * np.sum(s.u * g, axis=-1)))
        grad_c = np.asarray(theta_ext.gradient(tm, xc), float)
        total -= dt * psi_m * vol * float(np.sum(rs * np.sum(s.u * grad_c, axis=-1)))

        gtheta = _theta_edge_grad(s, grid)
        for a in range(d):
            ext_f = np.asarray(theta_ext.fn(tm, fx[a]), float)
            grad_f = np.asarray(theta_ext.gradient(tm, fx[a]), float)[..., a]
            total += dt * psi_m * phys.kappa * _dual_sum(
                grid, a, gtheta[a] * grad_f, w=1.0 / s.theta)
            total -= dt * psi_m * phys.kappa * _dual_sum(
                grid, a, gtheta[a] ** 2 * ext_f, w=1.0 / s.theta ** 2)

        S = ops.stress(s.u, grid, sp)
        G = ops.grad_h_vec(s.u, grid)
        ext_c = np.asarray(theta_ext.fn(tm, xc), float)
        total -= dt * psi_m * vol * float(
            np.sum(ext_c / s.theta * np.sum(S * G, axis=(-2, -1))))
    return total


# --- compatibility functionals ------------------------------------------------


def compatibility_errors(traj: Trajectory, phys: PhysParams,
                         tensor: TensorTestField, vector: VectorTestField,
                         speed_vector: Optional[VectorTestField] = None) -> dict:
    """Defects of the discrete integration-by-parts compatibility pairings.

    velocity_stress pairs the symmetric velocity gradient with a tensor
    field; speed_squared pairs |u|^2 with a compact vector field;
    temperature and temperature_squared pair wall-corrected edge gradients
    with a vector field that may hit the boundary.
    """
    grid, dt = traj.grid, traj.dt
    d = grid.d
    if speed_vector is None:
        speed_vector = vector
    xc = grid.cell_centers()
    fx = [grid.face_centers(a) for a in range(d)]
    ext = phys.theta_b
    out = dict.fromkeys(("velocity_stress", "speed_squared", "temperature",
                         "temperature_squared"), 0.0)

    for k in range(1, len(traj.states)):
        s = traj.states[k - 1]
        tm = (k - 0.5) * dt

        Dh = ops.sym_grad_h(s.u, grid)
        acc = grid.cell_volume * float(np.sum(Dh * np.asarray(tensor.fn(tm, xc), float)))
        for a in range(d):
            Tf = np.asarray(tensor.fn(tm, fx[a]), float)
            acc += grid.face_area * float(np.sum(s.u * _face_diff(Tf, a, grid)[..., a]))
        out["velocity_stress"] += dt * acc

        q = np.sum(s.u ** 2, axis=-1)
        acc = grid.cell_volume * float(
            np.sum(ops.grad_h(q, grid, ops.Even())
                   * np.asarray(speed_vector.fn(tm, xc), float)))
        for a in range(d):
            Vf = np.asarray(speed_vector.fn(tm, fx[a]), float)[..., a]
            acc += grid.face_area * float(np.sum(q * _face_diff(Vf, a, grid)))
        out["speed_squared"] += dt * acc

        ext_c = np.asarray(ext.fn(tm, xc), float)
        gtheta = _theta_edge_grad(s, grid)
        gb = (2.0 * np.asarray(s.theta_b.bottom) - s.theta[..., 0]) ** 2
        gt = (2.0 * np.asarray(s.theta_b.top) - s.theta[..., -1]) ** 2
        g2 = ops.grad_edge(s.theta ** 2, grid, ops.Custom(bottom=gb, top=gt))
        acc1 = 0.0
        acc2 = 0.0
        for a in range(d):
            Vf = np.asarray(vector.fn(tm, fx[a]), float)[..., a]
            dV = _face_diff(Vf, a, grid)
            ext_f = np.asarray(ext.fn(tm, fx[a]), float)
            grad_f = np.asarray(ext.gradient(tm, fx[a]), float)[..., a]
            acc1 += grid.face_area * float(np.sum((s.theta - ext_c) * dV))
            acc1 += _dual_sum(grid, a, (gtheta[a] - grad_f) * Vf)
            acc2 += grid.face_area * float(np.sum((s.theta ** 2 - ext_c ** 2) * dV))
            acc2 += _dual_sum(grid, a, (g2[a] - 2.0 * ext_f * grad_f) * Vf)
        out["temperature"] += dt * acc1
        out["temperature_squared"] += dt * acc2

    return out


def effective_viscous_flux(traj: Trajectory, phys: PhysParams, psi: Callable,
                           test: ScalarTestField) -> float:
    """Space-time average of rho (p - (2 mu + lambda) div u) (Lions quantity).

    Only differences between refinements are meaningful; the raw value has
    no distinguished limit.
    """
    grid, dt = traj.grid, traj.dt
    sp = ops.StressParams(phys.mu, phys.eta, grid.d)
    coef = 2.0 * sp.mu + sp.lam
    xc = grid.cell_centers()
    total = 0.0
    for k in range(1, len(traj.states)):
        s = traj.states[k - 1]
        tm = (k - 0.5) * dt
        divu = ops.div_h(s.u, grid)
        phic = np.asarray(test.fn(tm, xc), float)
        total += dt * psi(tm) * grid.cell_volume * float(
            np.sum(phic * s.rho * (s.rho * s.theta - coef * divu)))
    return total


def study_functionals(traj: Trajectory, phys: PhysParams) -> dict:
    """Every consistency/compatibility defect with the default test functions.

    The test functions depend only on the slab dimensions and final time, so
    values from runs at different resolutions of the same problem are
    directly comparable.
    """
    suite = default_test_suite(traj.grid, traj.final_time)
    out = {
        "continuity": consistency_continuity(traj, phys, suite["scalar_slab"]),
        "momentum": consistency_momentum(traj, phys, suite["vector_compact"]),
        "internal_energy": consistency_internal_energy(traj, phys, suite["scalar_compact"]),
        "entropy": consistency_entropy(traj, phys, suite["scalar_nonneg"]),
        "ballistic": consistency_ballistic(traj, phys, suite["psi"]),
    }
    out.update(compatibility_errors(traj, phys, suite["tensor"], suite["vector"],
                                    speed_vector=suite["vector_compact"]))
    out["effective_viscous_flux"] = effective_viscous_flux(
        traj, phys, suite["psi_interior"], suite["space_compact"])
    return out


# --- rate fitting and refinement comparison --------------------------------------


@dataclass(frozen=True)
class RateFit:
    order: float
    intercept: float
    fit_residual: float
    n_used: int
    excluded_zeros: int


class DefectSeries:
    """Sequence of (h, defect) pairs with a log-log least-squares fit."""

    def __init__(self, points=None):
        self.points = [(float(h), float(v)) for h, v in (points or [])]

    def add(self, h: float, value: float) -> None:
        self.points.append((float(h), float(value)))

    def fit(self) -> RateFit:
        usable = [(h, abs(v)) for h, v in self.points if v != 0.0]
        excluded = len(self.points) - len(usable)
        if len(usable) < 3:
            raise ValueError(
                f"rate fit needs at least 3 nonzero points, have {len(usable)}")
        x = np.log([h for h, _ in usable])
        y = np.log([v for _, v in usable])
        A = np.stack([x, np.ones_like(x)], axis=1)
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = float(np.sqrt(np.sum((A @ coef - y) ** 2)))
        return RateFit(order=float(coef[0]), intercept=float(coef[1]),
                       fit_residual=resid, n_used=len(usable),
                       excluded_zeros=excluded)


def rate_fit(series: DefectSeries) -> RateFit:
    return series.fit()


def nested_l2_distance(coarse: Trajectory, fine: Trajectory) -> dict:
    """L2(L2) distance between a run and its injection onto a nested finer run.

    The coarse solution is injected by piecewise-constant prolongation; the
    comparison is taken at the shared time levels with the coarse step as
    the time weight.
    """
    gc, gf = coarse.grid, fine.grid
    ratio = gc.h / gf.h
    r = int(round(ratio))
    if r < 1 or abs(ratio - r) > 1e-12 * ratio:
        raise ValueError("fine grid spacing must divide the coarse spacing")
    n_coarse = len(coarse.states) - 1
    n_fine = len(fine.states) - 1
    if n_coarse < 1 or n_fine != r * n_coarse:
        raise ValueError("trajectories must share final time with nested steps")

    def inject(arr):
        out = arr
        for a in range(gc.d):
            out = np.repeat(out, r, axis=a)
        return out

    acc = dict.fromkeys(("rho", "u", "theta"), 0.0)
    for k in range(1, n_coarse + 1):
        sc, sf = coarse.states[k], fine.states[r * k]
        acc["rho"] += coarse.dt * gf.cell_volume * float(
            np.sum((sf.rho - inject(sc.rho)) ** 2))
        acc["theta"] += coarse.dt * gf.cell_volume * float(
            np.sum((sf.theta - inject(sc.theta)) ** 2))
        du = sf.u - np.stack([inject(sc.u[..., c]) for c in range(gc.d)], axis=-1)
        acc["u"] += coarse.dt * gf.cell_volume * float(np.sum(du ** 2))
    return {key: float(np.sqrt(val)) for key, val in acc.items()}
