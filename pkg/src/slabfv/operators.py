"""Discrete difference operators on the periodic slab and their ghost conventions.

Orientation rules used throughout (load-bearing, do not change one without
the others):

* interior faces carry the intrinsic normal +e_a; the "in" cell is the one
  below the face along axis a, the "out" cell the one above;
* exterior (wall) faces carry the outward normal, so at both walls the "in"
  side is the interior cell and the "out" side is ghost space;
* jump [[v]] = v_out - v_in and average <v> = (v_in + v_out)/2 w.r.t. those
  normals;
* the dual-cell derivative (grad_edge) is always the upward difference
  along the axis, regardless of face orientation.

Ghost policies synthesize the out-side value at wall faces from the in-side
value: MirrorOdd forces <v> = 0, Even forces [[v]] = 0, DirichletAffine(g)
forces <v> = g, ZeroGradientTensor zeroes the exterior value of a derived
(gradient-like) field, Custom supplies explicit ghost layers.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Union

import numpy as np

from .grid import Grid

__all__ = [
    "MirrorOdd",
    "Even",
    "DirichletAffine",
    "ZeroGradientTensor",
    "Custom",
    "GhostPolicy",
    "FaceTraces",
    "StressParams",
    "ghost_layers",
    "face_traces",
    "face_avg",
    "face_jump",
    "upwind_face_value",
    "diffusive_face_value",
    "upwind_flux",
    "diffusive_flux",
    "grad_edge",
    "dhat",
    "grad_h",
    "grad_h_vec",
    "div_h",
    "sym_grad_h",
    "curl_h",
    "laplace_h",
    "div_dual",
    "stress",
    "pressure",
    "internal_energy",
    "entropy",
    "tensor_flux_div",
    "identity_residuals",
    "korn_residuals",
]


# --- ghost policies ---------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class MirrorOdd:
    """v_out = -v_in, forcing <v> = 0 at the wall (velocity convention)."""


@dataclasses.dataclass(frozen=True)
class Even:
    """v_out = v_in, forcing [[v]] = 0 at the wall (density convention)."""


@dataclasses.dataclass(frozen=True)
class DirichletAffine:
    """v_out = 2 g - v_in, forcing <v> = g at the wall (temperature)."""

    bottom: Union[float, np.ndarray]
    top: Union[float, np.ndarray]


@dataclasses.dataclass(frozen=True)
class ZeroGradientTensor:
    """Exterior value of a derived gradient field is set to zero."""


@dataclasses.dataclass(frozen=True)
class Custom:
    bottom: np.ndarray
    top: np.ndarray


GhostPolicy = Union[MirrorOdd, Even, DirichletAffine, ZeroGradientTensor, Custom]


def ghost_layers(r: np.ndarray, policy: GhostPolicy):
    """Bottom/top ghost-cell layers for a cell scalar field (wall axis last)."""
    r_bot = r[..., 0]
    r_top = r[..., -1]
    if isinstance(policy, MirrorOdd):
        return -r_bot, -r_top
    if isinstance(policy, Even):
        return r_bot.copy(), r_top.copy()
    if isinstance(policy, DirichletAffine):
        return 2.0 * np.asarray(policy.bottom) - r_bot, 2.0 * np.asarray(policy.top) - r_top
    if isinstance(policy, ZeroGradientTensor):
        return np.zeros_like(r_bot), np.zeros_like(r_top)
    if isinstance(policy, Custom):
        bot = np.broadcast_to(policy.bottom, r_bot.shape)
        top = np.broadcast_to(policy.top, r_top.shape)
        return np.asarray(bot, dtype=float), np.asarray(top, dtype=float)
    raise TypeError(f"unknown ghost policy {policy!r}")


def _pad_wall(r: np.ndarray, policy: GhostPolicy) -> np.ndarray:
    gb, gt = ghost_layers(r, policy)
    return np.concatenate([gb[..., None], r, gt[..., None]], axis=-1)


# --- traces, jumps, averages -------------------------------------------------


@dataclasses.dataclass(frozen=True)
class FaceTraces:
    v_in: np.ndarray
    v_out: np.ndarray

    @property
    def jump(self) -> np.ndarray:
        return self.v_out - self.v_in

    @property
    def avg(self) -> np.ndarray:
        return 0.5 * (self.v_in + self.v_out)


def face_traces(r: np.ndarray, grid: Grid, axis: int, ghost: GhostPolicy | None = None) -> FaceTraces:
    """Per-face in/out traces of a cell scalar field along one axis."""
    if axis != grid.wall:
        return FaceTraces(v_in=np.roll(r, 1, axis=axis), v_out=r)
    if ghost is None:
        raise ValueError("wall axis traces need a ghost policy")
    gb, gt = ghost_layers(r, ghost)
    v_in = np.concatenate([r[..., :1], r], axis=-1)
    v_out = np.concatenate([gb[..., None], r[..., 1:], gt[..., None]], axis=-1)
    return FaceTraces(v_in=v_in, v_out=v_out)


def face_avg(r, grid, axis, ghost=None):
    return face_traces(r, grid, axis, ghost).avg


def face_jump(r, grid, axis, ghost=None):
    return face_traces(r, grid, axis, ghost).jump


# --- fluxes ------------------------------------------------------------------


def upwind_face_value(r_in, r_out, w):
    """Donor value selected by the face-normal velocity; ties pick the in side."""
    return np.where(np.asarray(w) >= 0.0, r_in, r_out)


def diffusive_face_value(r_in, r_out, w, h: float, alpha: float):
    return upwind_face_value(r_in, r_out, w) * w - h**alpha * (np.asarray(r_out) - np.asarray(r_in))


def _face_normal_velocity(u: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    """<u>.n on the axis faces; MirrorOdd walls make it vanish there."""
    return face_avg(u[..., axis], grid, axis, MirrorOdd())


def upwind_flux(r: np.ndarray, u: np.ndarray, grid: Grid, axis: int, ghost: GhostPolicy | None = None) -> np.ndarray:
    t = face_traces(r, grid, axis, ghost or Even())
    w = _face_normal_velocity(u, grid, axis)
    return upwind_face_value(t.v_in, t.v_out, w) * w


def diffusive_flux(r, u, grid, axis, alpha: float, ghost: GhostPolicy | None = None):
    if not (-1.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (-1, 1), got {alpha}")
    t = face_traces(r, grid, axis, ghost or Even())
    w = _face_normal_velocity(u, grid, axis)
    return diffusive_face_value(t.v_in, t.v_out, w, grid.h, alpha)


# --- difference operators ----------------------------------------------------


def grad_edge(r: np.ndarray, grid: Grid, ghost: GhostPolicy) -> list[np.ndarray]:
    """Dual-cell derivative per axis: upward difference / h on every face."""
    out = []
    for a in range(grid.d):
        if a != grid.wall:
            out.append((r - np.roll(r, 1, axis=a)) / grid.h)
        else:
            pad = _pad_wall(r, ghost)
            out.append(np.diff(pad, axis=-1) / grid.h)
    return out


def dhat(r: np.ndarray, grid: Grid, axis: int, ghost: GhostPolicy) -> np.ndarray:
    """Cellwise derivative: difference of the two face averages along axis."""
    if axis != grid.wall:
        return (np.roll(r, -1, axis=axis) - np.roll(r, 1, axis=axis)) / (2.0 * grid.h)
    pad = _pad_wall(r, ghost)
    av = 0.5 * (pad[..., :-1] + pad[..., 1:])
    return np.diff(av, axis=-1) / grid.h


def grad_h(r: np.ndarray, grid: Grid, ghost: GhostPolicy) -> np.ndarray:
    return np.stack([dhat(r, grid, a, ghost) for a in range(grid.d)], axis=-1)


def grad_h_vec(u: np.ndarray, grid: Grid, ghost: GhostPolicy = MirrorOdd()) -> np.ndarray:
    """Velocity gradient with components [..., j, a] = dhat_a u_j."""
    rows = [grad_h(u[..., j], grid, ghost) for j in range(grid.d)]
    return np.stack(rows, axis=-2)


def div_h(u: np.ndarray, grid: Grid, ghost: GhostPolicy = MirrorOdd()) -> np.ndarray:
    return sum(dhat(u[..., a], grid, a, ghost) for a in range(grid.d))


def sym_grad_h(u: np.ndarray, grid: Grid, ghost: GhostPolicy = MirrorOdd()) -> np.ndarray:
    g = grad_h_vec(u, grid, ghost)
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def curl_h(u: np.ndarray, grid: Grid, ghost: GhostPolicy = MirrorOdd()) -> np.ndarray:
    """Embedded three-component curl.

    Inputs with d components return the scalar third component in d=2 and the
    full vector in d=3; a three-component field over a 2D grid returns all
    three components (the planar derivatives of the embedded field).
    """
    ncomp = u.shape[-1]

    def dd(j, a):
        if a >= grid.d:
            return np.zeros(grid.shape)
        return dhat(u[..., j], grid, a, ghost)

    if ncomp == 2 and grid.d == 2:
        return dd(1, 0) - dd(0, 1)
    if ncomp == 3:
        return np.stack(
            [dd(2, 1) - dd(1, 2), dd(0, 2) - dd(2, 0), dd(1, 0) - dd(0, 1)],
            axis=-1,
        )
    if ncomp == 2 and grid.d == 3:
        raise ValueError("2-component field on a 3D grid")
    return np.stack(
        [dd(2, 1) - dd(1, 2), dd(0, 2) - dd(2, 0), dd(1, 0) - dd(0, 1)], axis=-1
    )


def laplace_h(r: np.ndarray, grid: Grid, ghost: GhostPolicy) -> np.ndarray:
    out = np.zeros_like(r)
    for a in range(grid.d):
        if a != grid.wall:
            out += (np.roll(r, -1, axis=a) - 2.0 * r + np.roll(r, 1, axis=a)) / grid.h**2
        else:
            pad = _pad_wall(r, ghost)
            out += (pad[..., 2:] - 2.0 * pad[..., 1:-1] + pad[..., :-2]) / grid.h**2
    return out


def div_dual(w_faces: list[np.ndarray], grid: Grid) -> np.ndarray:
    """div_T of a face field: upper minus lower face value per cell, / h."""
    out = np.zeros(grid.shape)
    for a, w in enumerate(w_faces):
        if a != grid.wall:
            out += (np.roll(w, -1, axis=a) - w) / grid.h
        else:
            out += np.diff(w, axis=-1) / grid.h
    return out


# --- constitutive relations --------------------------------------------------


@dataclasses.dataclass(frozen=True)
class StressParams:
    mu: float
    eta: float
    d: int

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("shear viscosity must be positive")
        if self.eta < 0:
            raise ValueError("bulk viscosity must be nonnegative")

    @property
    def lam(self) -> float:
        return self.eta - 2.0 * self.mu / self.d

    @property
    def degenerate(self) -> bool:
        """mu + lam == 0, which happens exactly at d=2, eta=0."""
        return math.isclose(self.mu + self.lam, 0.0, abs_tol=1e-15)


def stress(u: np.ndarray, grid: Grid, params: StressParams, ghost: GhostPolicy = MirrorOdd()) -> np.ndarray:
    dsym = sym_grad_h(u, grid, ghost)
    tr = np.trace(dsym, axis1=-2, axis2=-1)
    s = 2.0 * params.mu * dsym
    idx = np.arange(grid.d)
    s[..., idx, idx] += params.lam * tr[..., None]
    return s


def pressure(rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return rho * theta


def internal_energy(theta: np.ndarray, c_v: float) -> np.ndarray:
    return c_v * theta


def entropy(rho: np.ndarray, theta: np.ndarray, c_v: float) -> np.ndarray:
    rho = np.asarray(rho)
    theta = np.asarray(theta)
    if np.any(rho <= 0) or np.any(theta <= 0):
        raise ValueError("entropy needs positive density and temperature")
    return c_v * np.log(theta) - np.log(rho)


# --- adjoint divergence of a cell tensor field -------------------------------


def tensor_flux_div(A: np.ndarray, grid: Grid) -> np.ndarray:
    """Per-cell momentum flux V[A]: the exact adjoint of Phi -> integral of
    A : D_h Phi under the zero-exterior-average test convention.

    V_{K,j} = (h^{d-1}/2) * sum over interior faces of K of
              e_j . ((A_K - A_N) n_{K,sigma}).
    Both cells sharing a face receive the same (A_in - A_out) column.
    """
    d = grid.d
    out = np.zeros(grid.shape + (d,))
    for a in range(d):
        col = A[..., :, a]  # (*shape, d) -> column a
        if a != grid.wall:
            jmp = col - np.roll(col, 1, axis=a)  # A_out - A_in on face i
            out -= jmp + np.roll(jmp, -1, axis=a)
        else:
            jmp = col[..., 1:, :] - col[..., :-1, :]  # interior faces 1..N-1
            pad = np.zeros(grid.shape + (d,))
            pad[..., 1:, :] += jmp  # cell k from its lower face k
            pad[..., :-1, :] += jmp  # cell k from its upper face k+1
            out -= pad
    return 0.5 * grid.face_area * out


# --- identity suite ----------------------------------------------------------


def _rel(lhs, rhs) -> float:
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    scale = max(1.0, float(np.max(np.abs(lhs))), float(np.max(np.abs(rhs))))
    return float(np.max(np.abs(lhs - rhs))) / scale


def _random_field(grid: Grid, rng) -> tuple[np.ndarray, Custom]:
    r = rng.normal(size=grid.shape)
    ghost = Custom(rng.normal(size=grid.shape[:-1]), rng.normal(size=grid.shape[:-1]))
    return r, ghost


def _ext_boundary_sum(grid: Grid, values_bottom: np.ndarray, values_top: np.ndarray) -> float:
    return grid.face_area * float(np.sum(values_bottom) + np.sum(values_top))


def _wall_traces(r: np.ndarray, ghost: GhostPolicy):
    """(in, out) pairs at the bottom and top exterior faces."""
    gb, gt = ghost_layers(r, ghost)
    return (r[..., 0], gb), (r[..., -1], gt)


def _ibp1_residuals(grid: Grid, rng) -> tuple[float, float]:
    f, gf = _random_field(grid, rng)
    w = rng.normal(size=grid.shape + (grid.d,))
    gw = [Custom(rng.normal(size=grid.shape[:-1]), rng.normal(size=grid.shape[:-1])) for _ in range(grid.d)]

    grad_f = np.stack([dhat(f, grid, a, gf) for a in range(grid.d)], axis=-1)
    div_w = sum(dhat(w[..., a], grid, a, gw[a]) for a in range(grid.d))
    lhs = grid.cell_volume * float(np.sum(grad_f * w) + np.sum(f * div_w))

    # boundary terms involve only the wall-normal velocity component
    (f_in_b, f_out_b), (f_in_t, f_out_t) = _wall_traces(f, gf)
    wd = w[..., grid.wall]
    (w_in_b, w_out_b), (w_in_t, w_out_t) = _wall_traces(wd, gw[grid.wall])

    # outward normal: -e_d at the bottom, +e_d at the top
    form_a_b = -(0.5 * (f_in_b + f_out_b) * w_in_b + 0.5 * f_in_b * (w_out_b - w_in_b))
    form_a_t = +(0.5 * (f_in_t + f_out_t) * w_in_t + 0.5 * f_in_t * (w_out_t - w_in_t))
    form_b_b = -(f_in_b * 0.5 * (w_in_b + w_out_b) + 0.5 * (f_out_b - f_in_b) * w_in_b)
    form_b_t = +(f_in_t * 0.5 * (w_in_t + w_out_t) + 0.5 * (f_out_t - f_in_t) * w_in_t)

    return (
        _rel(lhs, _ext_boundary_sum(grid, form_a_b, form_a_t)),
        _rel(lhs, _ext_boundary_sum(grid, form_b_b, form_b_t)),
    )


def _ibp2_residual(grid: Grid, rng) -> float:
    f, gf = _random_field(grid, rng)
    v, gv = _random_field(grid, rng)
    lhs = grid.cell_volume * float(np.sum(laplace_h(f, grid, gf) * v))

    gef = grad_edge(f, grid, gf)
    gev = grad_edge(v, grid, gv)
    interior = 0.0
    for a in range(grid.d):
        mask = grid.interior_face_mask(a)
        interior += float(np.sum(gef[a][mask] * gev[a][mask]))
    interior *= grid.h * grid.face_area

    # exterior term: outward jump of f times v^in
    (f_in_b, f_out_b), (f_in_t, f_out_t) = _wall_traces(f, gf)
    bnd_b = (f_out_b - f_in_b) / grid.h * v[..., 0]
    bnd_t = (f_out_t - f_in_t) / grid.h * v[..., -1]
    rhs = _ext_boundary_sum(grid, bnd_b, bnd_t) - interior
    return _rel(lhs, rhs)


def _embed3(vec: np.ndarray) -> np.ndarray:
    if vec.shape[-1] == 3:
        return vec
    pad = np.zeros(vec.shape[:-1] + (3,))
    pad[..., :2] = vec
    return pad


def _ibp4_residuals(grid: Grid, rng) -> tuple[float, float]:
    f = rng.normal(size=grid.shape + (3,))
    w = rng.normal(size=grid.shape + (3,))
    gf = [Custom(rng.normal(size=grid.shape[:-1]), rng.normal(size=grid.shape[:-1])) for _ in range(3)]
    gw = [Custom(rng.normal(size=grid.shape[:-1]), rng.normal(size=grid.shape[:-1])) for _ in range(3)]

    def curl3(vec, ghosts):
        def dd(j, a):
            if a >= grid.d:
                return np.zeros(grid.shape)
            return dhat(vec[..., j], grid, a, ghosts[j])

        return np.stack(
            [dd(2, 1) - dd(1, 2), dd(0, 2) - dd(2, 0), dd(1, 0) - dd(0, 1)], axis=-1
        )

    lhs = grid.cell_volume * float(np.sum(curl3(f, gf) * w) - np.sum(f * curl3(w, gw)))

    def wall_vec_traces(vec, ghosts, side):
        ins, outs = [], []
        for j in range(3):
            (in_b, out_b), (in_t, out_t) = _wall_traces(vec[..., j], ghosts[j])
            ins.append(in_b if side == 0 else in_t)
            outs.append(out_b if side == 0 else out_t)
        return np.stack(ins, axis=-1), np.stack(outs, axis=-1)

    total_a = 0.0
    total_b = 0.0
    for side, sign in ((0, -1.0), (1, +1.0)):
        f_in, f_out = wall_vec_traces(f, gf, side)
        w_in, w_out = wall_vec_traces(w, gw, side)
        n = np.zeros(3)
        n[grid.wall] = sign
        avg_f = 0.5 * (f_in + f_out)
        jmp_f = f_out - f_in
        avg_w = 0.5 * (w_in + w_out)
        jmp_w = w_out - w_in
        term_a = np.cross(avg_f, w_in) + 0.5 * np.cross(f_in, jmp_w)
        term_b = np.cross(f_in, avg_w) + 0.5 * np.cross(jmp_f, w_in)
        total_a += grid.face_area * float(np.sum(term_a @ n))
        total_b += grid.face_area * float(np.sum(term_b @ n))
    return _rel(lhs, total_a), _rel(lhs, total_b)


def _opcompat_residuals(grid: Grid, rng, extension: str) -> tuple[float, float]:
    """Exactness of grad(div) = curl(curl) + div(grad) and div(grad^T) = grad(div).

    extension="interior": arbitrary one-layer ghost data for w; all first-level
    fields are built from that same extension, and the identities are checked
    on cells with no exterior face (second differences there never read the
    first-level ghosts).

    extension="even": ghost copy w(-1) = w(0) with the second layer chosen so
    the normal difference is continuous across the wall; every first-level
    field then carries an Even ghost exactly, and the identities hold on all
    cells.
    """
    d = grid.d
    w = rng.normal(size=grid.shape + (d,))

    if extension == "interior":
        gw = [
            Custom(rng.normal(size=grid.shape[:-1]), rng.normal(size=grid.shape[:-1]))
            for _ in range(d)
        ]
    else:
        gw = [Even()] * d
    g2 = Even()  # exact for "even"; never read on the restricted slice otherwise

    def curl3(fields, ghosts):
        def dd(j, a):
            if a >= d:
                return np.zeros(grid.shape)
            return dhat(fields[j], grid, a, ghosts[j])

        return [dd(2, 1) - dd(1, 2), dd(0, 2) - dd(2, 0), dd(1, 0) - dd(0, 1)]

    zeros = np.zeros(grid.shape)
    curl1 = curl3([w[..., j] for j in range(d)] + [zeros] * (3 - d), gw + [g2] * (3 - d))
    curl2 = curl3(curl1, [g2] * 3)
    curl_curl = np.stack(curl2[:d], axis=-1)

    G = np.stack(
        [np.stack([dhat(w[..., j], grid, a, gw[j]) for a in range(d)], axis=-1) for j in range(d)],
        axis=-2,
    )
    divw = np.trace(G, axis1=-2, axis2=-1)
    grad_div = np.stack([dhat(divw, grid, a, g2) for a in range(d)], axis=-1)
    div_grad = np.stack(
        [sum(dhat(G[..., j, a], grid, a, g2) for a in range(d)) for j in range(d)],
        axis=-1,
    )
    div_gradT = np.stack(
        [sum(dhat(G[..., a, j], grid, a, g2) for a in range(d)) for j in range(d)],
        axis=-1,
    )

    res1 = grad_div - curl_curl - div_grad
    res2 = div_gradT - grad_div
    if extension == "interior":
        sl = (slice(None),) * (d - 1) + (slice(1, -1),)
        res1 = res1[sl]
        res2 = res2[sl]
    scale = max(1.0, float(np.max(np.abs(grad_div))))
    return float(np.max(np.abs(res1))) / scale, float(np.max(np.abs(res2))) / scale


def _torus_grad(u_hat: np.ndarray, h: float) -> np.ndarray:
    d = u_hat.shape[-1]
    rows = []
    for j in range(d):
        cols = [
            (np.roll(u_hat[..., j], -1, axis=a) - np.roll(u_hat[..., j], 1, axis=a)) / (2 * h)
            for a in range(d)
        ]
        rows.append(np.stack(cols, axis=-1))
    return np.stack(rows, axis=-2)


def korn_residuals(u: np.ndarray, grid: Grid, mu: float, eta: float, ghost: GhostPolicy = MirrorOdd()) -> dict:
    """Viscous-dissipation split via the odd mirror doubling of the slab.

    Doubling the slab across the top wall with u -> -u produces a pure torus
    field u_hat whose centered gradient restricted to the original cells
    coincides with the MirrorOdd slab gradient.  On the torus the exact split
    holds:

        (1/2) int S(grad u_hat) : grad u_hat
            = mu * |grad_h u|^2_slab + (mu+lam) * (1/2) |div u_hat|^2_torus,

    together with the gradient-norm link (1/2)|grad u_hat|^2 = |grad_h u|^2.
    A wrong wall policy (anything but MirrorOdd) breaks both relations at
    O(1); that is the suite's negative control.
    """
    d = grid.d
    lam = eta - 2.0 * mu / d
    h = grid.h
    wall = grid.wall

    flip = [slice(None)] * u.ndim
    flip[wall] = slice(None, None, -1)
    u_hat = np.concatenate([u, -u[tuple(flip)]], axis=wall)

    G_hat = _torus_grad(u_hat, h)
    div_hat = np.trace(G_hat, axis1=-2, axis2=-1)
    D_hat = 0.5 * (G_hat + np.swapaxes(G_hat, -1, -2))
    tr = np.trace(D_hat, axis1=-2, axis2=-1)
    S_hat = 2.0 * mu * D_hat
    idx = np.arange(d)
    S_hat[..., idx, idx] += lam * tr[..., None]

    vol = grid.cell_volume
    lhs = 0.5 * vol * float(np.sum(S_hat * G_hat))

    G_slab = grad_h_vec(u, grid, ghost)
    grad_sq_slab = vol * float(np.sum(G_slab**2))
    rhs = mu * grad_sq_slab + (mu + lam) * 0.5 * vol * float(np.sum(div_hat**2))

    link = _rel(0.5 * vol * float(np.sum(G_hat**2)), grad_sq_slab)
    return {"korn_split": _rel(lhs, rhs), "korn_grad_link": link}


def _v_adjoint_residual(grid: Grid, rng) -> float:
    d = grid.d
    A = rng.normal(size=grid.shape + (d, d))
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    phi = rng.normal(size=grid.shape + (d,))
    V = tensor_flux_div(A, grid)
    lhs = float(np.sum(V * phi))
    Dphi = sym_grad_h(phi, grid, MirrorOdd())
    rhs = grid.cell_volume * float(np.sum(A * Dphi))
    return _rel(lhs, rhs)


def _laplace_fact_residual(grid: Grid, rng) -> float:
    f, gf = _random_field(grid, rng)
    direct = laplace_h(f, grid, gf)
    composed = div_dual(grad_edge(f, grid, gf), grid)
    return _rel(direct, composed)


def identity_residuals(grid: Grid, rng, mu: float = 0.1, eta: float = 0.0, broken_ghost: bool = False) -> dict:
    """Max relative residual of every exact operator identity, one random draw.

    broken_ghost swaps the Korn wall policy for Even; the Korn entries then
    sit at O(1), which the verification suite uses as its negative control.
    """
    out = {}
    out["inbypa1_a"], out["inbypa1_b"] = _ibp1_residuals(grid, rng)
    out["inbypa2"] = _ibp2_residual(grid, rng)
    out["inbypa4_a"], out["inbypa4_b"] = _ibp4_residuals(grid, rng)
    out["opcompat_grad_interior"], out["opcompat_sym_interior"] = _opcompat_residuals(grid, rng, "interior")
    out["opcompat_grad_even"], out["opcompat_sym_even"] = _opcompat_residuals(grid, rng, "even")
    u = rng.normal(size=grid.shape + (grid.d,))
    ghost = Even() if broken_ghost else MirrorOdd()
    out.update(korn_residuals(u, grid, mu, eta, ghost))
    out["laplace_factorization"] = _laplace_fact_residual(grid, rng)
    out["v_adjoint"] = _v_adjoint_residual(grid, rng)
    return out
