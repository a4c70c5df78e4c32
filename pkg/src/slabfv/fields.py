"""Piecewise-constant fields, projections, the vertex interpolant, time
interpolation, and snapshot output."""

from __future__ import annotations

import dataclasses
from typing import Callable, Sequence

import numpy as np

from .grid import Grid
from .operators import GhostPolicy, face_traces

__all__ = [
    "BoundaryFaceField",
    "State",
    "VertexLift",
    "project_cell_average",
    "project_face_average",
    "project_boundary_faces",
    "project_dual_average",
    "interpolate_time",
    "write_vtk",
]


@dataclasses.dataclass
class BoundaryFaceField:
    """Values on the exterior faces of the two walls."""

    bottom: np.ndarray
    top: np.ndarray

    def copy(self) -> "BoundaryFaceField":
        return BoundaryFaceField(self.bottom.copy(), self.top.copy())


@dataclasses.dataclass
class State:
    """One time level: density, velocity, temperature, and the projected
    boundary temperature.  Positivity of rho/theta is monitored by the
    solver, not enforced here."""

    rho: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    theta_b: BoundaryFaceField
    t_index: int

    def copy(self) -> "State":
        return State(self.rho.copy(), self.u.copy(), self.theta.copy(), self.theta_b.copy(), self.t_index)

    def extremes(self) -> dict:
        speed = np.sqrt(np.sum(self.u**2, axis=-1))
        return {
            "rho_min": float(self.rho.min()),
            "rho_max": float(self.rho.max()),
            "theta_min": float(self.theta.min()),
            "theta_max": float(self.theta.max()),
            "speed_max": float(speed.max()),
        }


# --- quadrature --------------------------------------------------------------

_GAUSS = {
    1: (np.array([0.0]), np.array([1.0])),
    2: (np.array([-1.0, 1.0]) / np.sqrt(3.0), np.array([0.5, 0.5])),
    3: (
        np.array([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)]),
        np.array([5.0, 8.0, 5.0]) / 18.0,
    ),
}


def _gauss(order: int):
    if order not in _GAUSS:
        raise ValueError(f"unsupported quadrature order {order}")
    return _GAUSS[order]


def project_cell_average(f: Callable, grid: Grid, order: int = 2) -> np.ndarray:
    """Cell averages of an analytic function by tensor Gauss quadrature."""
    nodes, weights = _gauss(order)
    centers = grid.cell_centers()
    out = np.zeros(grid.shape)
    for combo in np.ndindex(*(len(nodes),) * grid.d):
        pts = centers + 0.5 * grid.h * nodes[list(combo)]
        w = np.prod(weights[list(combo)])
        out += w * np.asarray(f(pts), dtype=float)
    return out


def project_face_average(f: Callable, grid: Grid, axis: int, order: int = 2) -> np.ndarray:
    """Face averages over the (d-1)-dimensional faces orthogonal to axis."""
    nodes, weights = _gauss(order)
    centers = grid.face_centers(axis)
    out = np.zeros(grid.face_shape(axis))
    other = [a for a in range(grid.d) if a != axis]
    for combo in np.ndindex(*(len(nodes),) * len(other)):
        pts = centers.copy()
        w = 1.0
        for a, c in zip(other, combo):
            pts[..., a] += 0.5 * grid.h * nodes[c]
            w *= weights[c]
        out += w * np.asarray(f(pts), dtype=float)
    return out


def project_boundary_faces(f: Callable, grid: Grid, order: int = 2) -> BoundaryFaceField:
    """Averages of f over the exterior faces of each wall."""
    nodes, weights = _gauss(order)
    sides = []
    for side in (0, 1):
        centers = grid.wall_plane_points(side)
        out = np.zeros(grid.shape[:-1])
        for combo in np.ndindex(*(len(nodes),) * (grid.d - 1)):
            pts = centers.copy()
            w = 1.0
            for a, c in enumerate(combo):
                pts[..., a] += 0.5 * grid.h * nodes[c]
                w *= weights[c]
            out += w * np.asarray(f(pts), dtype=float)
        sides.append(out)
    return BoundaryFaceField(bottom=sides[0], top=sides[1])


def project_dual_average(r: np.ndarray, grid: Grid, axis: int, ghost: GhostPolicy) -> np.ndarray:
    """Dual-cell averages: mean of the two straddled cells, ghosts at walls."""
    return face_traces(r, grid, axis, ghost).avg


# --- vertex interpolant -------------------------------------------------------


def _vertex_accumulate(arr: np.ndarray, grid: Grid) -> np.ndarray:
    """Sum of incident values per vertex (periodic wrap, walls one-sided)."""
    out = arr
    for a in range(grid.d):
        if a != grid.wall:
            out = out + np.roll(out, 1, axis=a)
        else:
            low = out[..., :1]
            mid = out[..., 1:] + out[..., :-1]
            high = out[..., -1:]
            out = np.concatenate([low, mid, high], axis=-1)
    return out


class VertexLift:
    """Continuous multilinear interpolant of vertex-averaged cell values.

    Vertex values are equal-weight means over incident cells (periodic seam
    included; wall vertices only average the existing cells).  Norms are
    evaluated by per-cell 2-point Gauss quadrature, which is exact for the
    quadratic integrands involved.
    """

    def __init__(self, r: np.ndarray, grid: Grid):
        self.grid = grid
        self.r = r
        sums = _vertex_accumulate(r, grid)
        counts = _vertex_accumulate(np.ones_like(r), grid)
        self.vertex_values = sums / counts

    def _corner_values(self) -> np.ndarray:
        """Per-cell corner array with trailing index shape (2,)*d."""
        g = self.grid
        c = self.vertex_values
        for a in range(g.d):
            idx_lo = np.arange(g.shape[a])
            if a != g.wall:
                idx_hi = (idx_lo + 1) % g.shape[a]
            else:
                idx_hi = idx_lo + 1
            lo = np.take(c, idx_lo, axis=a)
            hi = np.take(c, idx_hi, axis=a)
            c = np.stack([lo, hi], axis=-1)
        return c

    def _quad(self):
        nodes, weights = _gauss(2)
        xi = 0.5 * (nodes + 1.0)
        return xi, weights

    def _basis(self, xi: np.ndarray, derivative: bool) -> np.ndarray:
        if derivative:
            return np.stack([-np.ones_like(xi), np.ones_like(xi)]) / self.grid.h
        return np.stack([1.0 - xi, xi])

    def _values_at_quad(self, derivative_axis: int | None) -> np.ndarray:
        g = self.grid
        corners = self._corner_values()
        xi, _ = self._quad()
        bases = [
            self._basis(xi, derivative=(derivative_axis == a)) for a in range(g.d)
        ]
        out = corners
        for a in range(g.d):
            # contract the first remaining corner axis (always at position d's
            # start: after spatial axes) against basis a
            out = np.tensordot(out, bases[a], axes=([g.d], [0]))
        return out  # shape (*grid.shape, q, q[, q])

    def l2_error(self) -> float:
        g = self.grid
        vals = self._values_at_quad(None)
        diff = vals - self.r[(...,) + (None,) * g.d]
        _, w = self._quad()
        wt = np.ones(())
        for _ in range(g.d):
            wt = np.multiply.outer(wt, w)
        total = np.sum(diff**2 * wt) * g.cell_volume
        return float(np.sqrt(total))

    def grad_sq_cell(self) -> np.ndarray:
        g = self.grid
        _, w = self._quad()
        wt = np.ones(())
        for _ in range(g.d):
            wt = np.multiply.outer(wt, w)
        out = np.zeros(g.shape)
        for a in range(g.d):
            vals = self._values_at_quad(a)
            axes = tuple(range(g.d, g.d + g.d))
            out += np.sum(vals**2 * wt, axis=axes)
        return out * g.cell_volume

    def grad_l2_norm(self) -> float:
        return float(np.sqrt(np.sum(self.grad_sq_cell())))

    def grad_per_cell_l2(self) -> np.ndarray:
        return np.sqrt(self.grad_sq_cell())


# --- time interpolation -------------------------------------------------------


def interpolate_time(states: Sequence[State], dt: float, t: float, mode: str = "constant"):
    """(rho, u, theta) of the piecewise-constant or piecewise-linear
    interpolant.  The constant mode is left-valued on [t_{k-1}, t_k) and
    right-valued at the final time."""
    n = len(states) - 1
    T = n * dt
    eps = 1e-12 * max(1.0, T)
    if t < -eps or t > T + eps:
        raise ValueError(f"t = {t} outside [0, {T}]")
    s = np.clip(t / dt, 0.0, n)
    if mode == "constant":
        k = min(int(np.floor(s + 1e-12)), n)
        st = states[k]
        return st.rho, st.u, st.theta
    if mode == "linear":
        k0 = min(int(np.floor(s + 1e-12)), n)
        frac = s - k0
        if k0 == n or frac < 1e-12:
            st = states[k0]
            return st.rho, st.u, st.theta
        a, b = states[k0], states[k0 + 1]
        return (
            (1 - frac) * a.rho + frac * b.rho,
            (1 - frac) * a.u + frac * b.u,
            (1 - frac) * a.theta + frac * b.theta,
        )
    raise ValueError(f"unknown interpolation mode {mode!r}")


# --- snapshot output ----------------------------------------------------------


def _fmt(values) -> str:
    return " ".join(f"{v:.17g}" for v in values)


def write_vtk(path, grid: Grid, state: State, title: str = "snapshot") -> None:
    """Legacy ASCII structured-points snapshot with cell data rho, u, theta."""
    dims = [n + 1 for n in grid.shape] + [1] * (3 - grid.d)
    origin = list(grid.lows) + [0.0] * (3 - grid.d)
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS " + " ".join(str(v) for v in dims),
        "ORIGIN " + _fmt(origin),
        "SPACING " + _fmt([grid.h] * 3),
        f"CELL_DATA {grid.n_cells}",
        "SCALARS rho double",
        "LOOKUP_TABLE default",
    ]
    lines.extend(_fmt([v]) for v in state.rho.ravel(order="F"))
    lines.append("VECTORS u double")
    ucols = [state.u[..., j].ravel(order="F") for j in range(grid.d)]
    zeros = np.zeros_like(ucols[0])
    while len(ucols) < 3:
        ucols.append(zeros)
    for row in zip(*ucols):
        lines.append(_fmt(row))
    lines.append("SCALARS theta double")
    lines.append("LOOKUP_TABLE default")
    lines.extend(_fmt([v]) for v in state.theta.ravel(order="F"))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
