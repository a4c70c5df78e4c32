"""Backward-Euler upwind finite volume stepping on the periodic slab.

Unknowns are primitive (rho, u, theta) but the balance laws difference the
conservative products, so the Newton linearization expands those products
exactly. Convection uses donor-cell upwinding plus an h^alpha jump flux on
interior faces; walls carry no convective flux at all. Temperature couples
to the plates through a two-point flux against the projected wall data.

The nonlinear step is solved by a semismooth Newton iteration: the donor
side of every face is frozen while the Jacobian of the remaining smooth
terms is assembled analytically; the line search and the convergence test
always use the true residual with freshly evaluated donor sides.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import operators as ops
from .fields import BoundaryFaceField, State, project_boundary_faces, project_cell_average
from .grid import Grid
from .operators import Even, MirrorOdd, StressParams


class SolverError(RuntimeError):
    pass


class NonConvergence(SolverError):
    def __init__(self, message: str, iterations: int = 0, residual_norm: float = float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.residual_norm = residual_norm


class PositivityLoss(SolverError):
    pass


# --- physical data ---


@dataclass(frozen=True)
class WallTemperature:
    """Plate temperature data together with a positive extension to the slab.

    fn(t, x) evaluates on point arrays of shape (..., d); it must be positive
    on the closed slab, and its restriction to the walls is the boundary
    data. fn_t and fn_grad, when given, are the time derivative and spatial
    gradient of the extension (entropy-side diagnostics need them). w2inf
    bounds the sup of fn and its derivatives up to second order.
    """

    fn: Callable
    w2inf: float
    fn_t: Optional[Callable] = None
    fn_grad: Optional[Callable] = None

    def faces(self, grid: Grid, t: float, order: int = 2) -> BoundaryFaceField:
        return project_boundary_faces(lambda x: self.fn(t, x), grid, order=order)

    def time_derivative(self, t, x):
        if self.fn_t is None:
            return np.zeros(np.shape(x)[:-1])
        return self.fn_t(t, x)

    def gradient(self, t, x):
        if self.fn_grad is None:
            return np.zeros(np.shape(x))
        return self.fn_grad(t, x)


def constant_walls(value: float) -> WallTemperature:
    value = float(value)
    if value <= 0.0:
        raise ValueError("wall temperature must be positive")
    return WallTemperature(fn=lambda t, x: np.full(np.shape(x)[:-1], value), w2inf=value)


def two_plate_walls(bottom: float, top: float, H: float) -> WallTemperature:
    """Distinct plate temperatures, extended affinely in the wall coordinate."""
    bottom, top = float(bottom), float(top)
    if bottom <= 0.0 or top <= 0.0:
        raise ValueError("plate temperatures must be positive")
    mid = 0.5 * (bottom + top)
    slope = (top - bottom) / (2.0 * H)

    def fn(t, x):
        return mid + slope * np.asarray(x)[..., -1]

    def fn_grad(t, x):
        g = np.zeros(np.shape(x))
        g[..., -1] = slope
        return g

    return WallTemperature(fn=fn, w2inf=max(bottom, top) + abs(slope), fn_grad=fn_grad)


@dataclass(frozen=True)
class PhysParams:
    mu: float
    eta: float
    kappa: float
    c_v: float
    g: Sequence[float]
    theta_b: WallTemperature

    def __post_init__(self):
        if self.mu <= 0.0:
            raise ValueError("shear viscosity mu must be positive")
        if self.eta < 0.0:
            raise ValueError("bulk viscosity eta must be nonnegative")
        if self.kappa <= 0.0:
            raise ValueError("heat conductivity kappa must be positive")
        if self.c_v <= 0.0:
            raise ValueError("heat capacity c_v must be positive")

    def stress_params(self, d: int) -> StressParams:
        return StressParams(self.mu, self.eta, d)


@dataclass(frozen=True)
class NumParams:
    alpha: float
    dt: float
    eps_newton: float = 1e-10
    max_iter: int = 40
    damping_min: float = 1e-4

    def __post_init__(self):
        if not -1.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (-1, 1), got {self.alpha}")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.eps_newton <= 0.0 or self.max_iter < 1 or self.damping_min <= 0.0:
            raise ValueError("invalid solver controls")

    @classmethod
    def from_ct(cls, alpha: float, h: float, c_t: float = 0.1, **kw) -> "NumParams":
        if c_t <= 0.0:
            raise ValueError("c_t must be positive")
        return cls(alpha=alpha, dt=c_t * h, **kw)


# --- state construction ---


def init_state(rho0, u0, theta0, grid: Grid, phys: PhysParams, order: int = 3,
               t0: float = 0.0) -> State:
    """Project pointwise initial data onto cell averages (tensor Gauss rule)."""
    rho = project_cell_average(rho0, grid, order=order)
    theta = project_cell_average(theta0, grid, order=order)
    u = np.zeros(grid.shape + (grid.d,))
    if callable(u0):
        for j in range(grid.d):
            u[..., j] = project_cell_average(
                lambda x, jj=j: np.asarray(u0(x))[..., jj], grid, order=order
            )
    elif isinstance(u0, (tuple, list)):
        for j, f in enumerate(u0):
            u[..., j] = project_cell_average(f, grid, order=order) if callable(f) else float(f)
    elif u0:
        raise TypeError("u0 must be callable, a sequence of components, or 0")
    if float(rho.min()) <= 0.0 or float(theta.min()) <= 0.0:
        raise ValueError("projected initial density and temperature must be positive")
    return State(rho, u, theta, phys.theta_b.faces(grid, t0), 0)


def total_mass(state: State, grid: Grid) -> float:
    return grid.cell_volume * float(state.rho.sum())


# --- residual ---


@dataclass
class Residual:
    mass: np.ndarray
    momentum: np.ndarray
    energy: np.ndarray

    def flat(self) -> np.ndarray:
        parts = [self.mass.ravel()]
        parts += [self.momentum[..., j].ravel() for j in range(self.momentum.shape[-1])]
        parts.append(self.energy.ravel())
        return np.concatenate(parts)

    def inf_norm(self) -> float:
        m = max(
            float(np.max(np.abs(self.mass))),
            float(np.max(np.abs(self.momentum))),
            float(np.max(np.abs(self.energy))),
        )
        return m


def upwind_masks(state: State, grid: Grid) -> list:
    """Donor side per face and axis: True picks the lower cell; ties go there too."""
    return [
        ops.face_traces(state.u[..., a], grid, a, MirrorOdd()).avg >= 0.0
        for a in range(grid.d)
    ]


def _scatter_flux(flux: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    # each cell gains its upper-face flux and loses its lower-face flux
    if axis != grid.wall:
        return np.roll(flux, -1, axis=axis) - flux
    return flux[..., 1:] - flux[..., :-1]


def assemble_residual(prev: State, guess: State, t_k: float, grid: Grid,
                      phys: PhysParams, num: NumParams, masks=None,
                      theta_b: Optional[BoundaryFaceField] = None) -> Residual:
    """Evaluate the discrete balance residuals at the guess state.

    masks overrides the donor-side choice (used to freeze upwind directions
    for derivative checks); theta_b overrides the projected plate data
    (passed by the solver to avoid reprojection inside line searches).
    """
    d, h = grid.d, grid.h
    vol, fa = grid.cell_volume, grid.face_area
    z = vol / num.dt
    if theta_b is None:
        theta_b = phys.theta_b.faces(grid, t_k)
    if masks is None:
        masks = upwind_masks(guess, grid)
    rho, u, theta = guess.rho, guess.u, guess.theta
    rtheta = rho * theta

    mass = z * (rho - prev.rho)
    mom = z * (rho[..., None] * u - prev.rho[..., None] * prev.u)
    ene = phys.c_v * z * (rtheta - prev.rho * prev.theta)

    halpha = h ** num.alpha
    kdiff = phys.kappa * h ** (d - 2)
    for a in range(d):
        w = ops.face_traces(u[..., a], grid, a, MirrorOdd()).avg
        mask = masks[a]
        is_wall = a == grid.wall

        def conv(r):
            t = ops.face_traces(r, grid, a, Even())
            flux = np.where(mask, t.v_in, t.v_out) * w - halpha * t.jump
            if is_wall:
                flux[..., 0] = 0.0
                flux[..., -1] = 0.0
            return fa * _scatter_flux(flux, grid, a)

        mass += conv(rho)
        for j in range(d):
            mom[..., j] += conv(rho * u[..., j])
        ene += phys.c_v * conv(rtheta)

        hflux = -kdiff * ops.face_traces(theta, grid, a, Even()).jump
        if is_wall:
            hflux[..., 0] = 0.0
            hflux[..., -1] = 0.0
        ene += _scatter_flux(hflux, grid, a)

    ene[..., 0] += 2.0 * kdiff * (theta[..., 0] - theta_b.bottom)
    ene[..., -1] += 2.0 * kdiff * (theta[..., -1] - theta_b.top)

    S = ops.stress(u, grid, phys.stress_params(d), MirrorOdd())
    gradu = ops.grad_h_vec(u, grid, MirrorOdd())
    A = S.copy()
    for j in range(d):
        A[..., j, j] -= rtheta
    mom += ops.tensor_flux_div(A, grid)
    mom -= vol * rho[..., None] * np.asarray(phys.g, dtype=float)
    ene -= vol * np.einsum("...ja,...ja->...", A, gradu)
    return Residual(mass, mom, ene)


# --- sparse operator cache ---


def _kron_chain(mats):
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out.tocsr()


def _periodic_centered(N: int, h: float):
    rows = np.arange(N)
    up = sp.csr_matrix((np.ones(N), (rows, (rows + 1) % N)), shape=(N, N))
    dn = sp.csr_matrix((np.ones(N), (rows, (rows - 1) % N)), shape=(N, N))
    return (up - dn) * (0.5 / h)

def _mirror_odd_centered(N: int, h: float):
    # centered differences with odd reflection: the face average against the
    # mirror ghost vanishes, which folds the boundary rows onto two cells
    if N == 1:
        return sp.csr_matrix((1, 1))
    m = sp.lil_matrix((N, N))
    c = 0.5 / h
    m[0, 0] = c
    m[0, 1] = c
    for i in range(1, N - 1):
        m[i, i - 1] = -c
        m[i, i + 1] = c
    m[N - 1, N - 2] = -c
    m[N - 1, N - 1] = -c
    return m.tocsr()


class _OperatorCache:
    """Per-grid sparse building blocks for the Newton matrix.

    For each axis, I_in/I_out select the two cells of every interior face;
    the derived averages, jumps, face-to-cell scatters, and the pressure /
    stress scatter GHAT = (I_in + I_out)^T JMP are what the Jacobian blocks
    are composed from. G[a] is the centered gradient with odd mirror walls,
    matching the cell-gradient operator used in the residual.
    """

    def __init__(self, grid: Grid):
        d, h = grid.d, grid.h
        self.I_in, self.I_out = [], []
        self.JMP, self.AVG, self.SCAT, self.GHAT, self.G = [], [], [], [], []
        for a in range(d):
            mats_in, mats_out, mats_g = [], [], []
            for ax, N in enumerate(grid.shape):
                if ax != a:
                    e = sp.identity(N, format="csr")
                    mats_in.append(e)
                    mats_out.append(e)
                    mats_g.append(e)
                elif ax == grid.wall:
                    mats_in.append(sp.eye(N - 1, N, k=0, format="csr"))
                    mats_out.append(sp.eye(N - 1, N, k=1, format="csr"))
                    mats_g.append(_mirror_odd_centered(N, h))
                else:
                    rows = np.arange(N)
                    mats_in.append(
                        sp.csr_matrix((np.ones(N), (rows, (rows - 1) % N)), shape=(N, N))
                    )
                    mats_out.append(sp.identity(N, format="csr"))
                    mats_g.append(_periodic_centered(N, h))
            I_in, I_out = _kron_chain(mats_in), _kron_chain(mats_out)
            jmp = (I_out - I_in).tocsr()
            self.I_in.append(I_in)
            self.I_out.append(I_out)
            self.JMP.append(jmp)
            self.AVG.append((0.5 * (I_in + I_out)).tocsr())
            self.SCAT.append((I_in - I_out).T.tocsr())
            self.GHAT.append(((I_in + I_out).T @ jmp).tocsr())
            self.G.append(_kron_chain(mats_g))
        self.heat_sym = sum(self.JMP[a].T @ self.JMP[a] for a in range(d)).tocsr()
        ind = np.zeros(grid.shape)
        ind[..., 0] = 1.0
        ind[..., -1] = 1.0
        self.bnd = sp.diags(ind.ravel()).tocsr()
        self.eye = sp.identity(grid.n_cells, format="csr")


_CACHES: dict = {}


def _cache_for(grid: Grid) -> _OperatorCache:
    c = _CACHES.get(grid.spec)
    if c is None:
        c = _OperatorCache(grid)
        _CACHES[grid.spec] = c
    return c


def _interior_mask_flat(mask: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    if axis != grid.wall:
        return mask.ravel()
    return mask[..., 1:-1].ravel()


def _assemble_jacobian(guess: State, grid: Grid, phys: PhysParams, num: NumParams,
                       cache: _OperatorCache, masks) -> sp.csc_matrix:
    """Frozen-donor Newton matrix in block order (rho, u_1..u_d, theta)."""
    d, h = grid.d, grid.h
    vol, fa = grid.cell_volume, grid.face_area
    z = vol / num.dt
    halpha = h ** num.alpha
    cv, mu = phys.c_v, phys.mu
    lam = phys.stress_params(d).lam
    rho = guess.rho.ravel()
    th = guess.theta.ravel()
    us = [guess.u[..., j].ravel() for j in range(d)]

    UP = []
    conv = None
    for a in range(d):
        w = cache.AVG[a] @ us[a]
        mflat = _interior_mask_flat(masks[a], grid, a)
        up = sp.diags(mflat.astype(float)) @ cache.I_in[a] \
            + sp.diags((~mflat).astype(float)) @ cache.I_out[a]
        UP.append(up.tocsr())
        term = cache.SCAT[a] @ (sp.diags(w) @ UP[a] - halpha * cache.JMP[a])
        conv = term if conv is None else conv + term
    C = (fa * conv).tocsr()
    ZC = (z * cache.eye + C).tocsr()

    def Wm(field_flat, a):
        return fa * cache.SCAT[a] @ sp.diags(UP[a] @ field_flat) @ cache.AVG[a]

    gradu = ops.grad_h_vec(guess.u, grid, MirrorOdd())
    divu = np.trace(gradu, axis1=-2, axis2=-1).ravel()
    Dsym = 0.5 * (gradu + np.swapaxes(gradu, -1, -2))
    gsum = sum(cache.GHAT[a] @ cache.G[a] for a in range(d))

    B = [[None] * (d + 2) for _ in range(d + 2)]
    B[0][0] = ZC
    for m in range(d):
        B[0][1 + m] = Wm(rho, m)
    for j in range(d):
        row = 1 + j
        B[row][0] = ZC @ sp.diags(us[j]) + 0.5 * fa * cache.GHAT[j] @ sp.diags(th) \
            - vol * float(phys.g[j]) * cache.eye
        for m in range(d):
            blk = Wm(rho * us[j], m) - 0.5 * fa * (
                mu * cache.GHAT[m] @ cache.G[j] + lam * cache.GHAT[j] @ cache.G[m]
            )
            if m == j:
                blk = blk + ZC @ sp.diags(rho) - 0.5 * fa * mu * gsum
            B[row][1 + m] = blk
        B[row][d + 1] = 0.5 * fa * cache.GHAT[j] @ sp.diags(rho)
    heat = phys.kappa * h ** (d - 2) * (cache.heat_sym + 2.0 * cache.bnd)
    B[d + 1][0] = cv * ZC @ sp.diags(th) + vol * sp.diags(th * divu)
    B[d + 1][d + 1] = cv * ZC @ sp.diags(rho) + heat + vol * sp.diags(rho * divu)
    for m in range(d):
        visc = sum(sp.diags(Dsym[..., m, a].ravel()) @ cache.G[a] for a in range(d))
        B[d + 1][1 + m] = cv * Wm(rho * th, m) \
            - vol * (4.0 * mu * visc + 2.0 * lam * sp.diags(divu) @ cache.G[m]) \
            + vol * sp.diags(rho * th) @ cache.G[m]
    return sp.bmat(B, format="csc")


def _split_update(v: np.ndarray, grid: Grid):
    n = grid.n_cells
    dr = v[:n].reshape(grid.shape)
    du = np.stack([v[n * (1 + j): n * (2 + j)].reshape(grid.shape) for j in range(grid.d)],
                  axis=-1)
    dth = v[n * (1 + grid.d):].reshape(grid.shape)
    return dr, du, dth


# --- nonlinear solve ---


@dataclass
class SolveStats:
    iterations: int
    residual_norm: float
    backtracks: int = 0


def _line_search(prev: State, guess: State, dx: np.ndarray, rn: float, t_k: float,
                 grid: Grid, phys: PhysParams, num: NumParams,
                 theta_b: BoundaryFaceField):
    """Damped update along dx: halve until positive and strictly decreasing."""
    dr, du, dth = _split_update(dx, grid)
    step = 1.0
    backtracks = 0
    nonpositive = False
    while step >= num.damping_min:
        trial = State(guess.rho + step * dr, guess.u + step * du,
                      guess.theta + step * dth, theta_b, guess.t_index)
        nonpositive = not (float(trial.rho.min()) > 0.0 and float(trial.theta.min()) > 0.0)
        if not nonpositive:
            res = assemble_residual(prev, trial, t_k, grid, phys, num, theta_b=theta_b)
            trn = res.inf_norm()
            if trn < rn or trn <= num.eps_newton:
                return trial, res, trn, backtracks
        step *= 0.5
        backtracks += 1
    if nonpositive:
        raise PositivityLoss(
            "line search reached the damping floor without positive density and temperature"
        )
    raise NonConvergence("line search found no residual decrease", 0, rn)


def solve_step(prev: State, t_k: float, grid: Grid, phys: PhysParams,
               num: NumParams):
    """Advance one backward-Euler level; returns (state, SolveStats)."""
    cache = _cache_for(grid)
    theta_b = phys.theta_b.faces(grid, t_k)
    guess = State(prev.rho.copy(), prev.u.copy(), prev.theta.copy(), theta_b,
                  prev.t_index + 1)
    res = assemble_residual(prev, guess, t_k, grid, phys, num, theta_b=theta_b)
    rn = res.inf_norm()
    iters = 0
    backtracks = 0
    while rn > num.eps_newton:
        if iters >= num.max_iter:
            raise NonConvergence(
                f"residual {rn:.3e} above tolerance {num.eps_newton:.1e} "
                f"after {iters} Newton iterations",
                iters, rn,
            )
        masks = upwind_masks(guess, grid)
        J = _assemble_jacobian(guess, grid, phys, num, cache, masks)
        dx = splu(J).solve(-res.flat())
        try:
            guess, res, rn, bt = _line_search(prev, guess, dx, rn, t_k, grid, phys,
                                              num, theta_b)
        except NonConvergence as e:
            raise NonConvergence(str(e), iters, rn) from None
        iters += 1
        backtracks += bt
    return guess, SolveStats(iterations=iters, residual_norm=rn, backtracks=backtracks)


# --- trajectories ---


@dataclass
class Trajectory:
    grid: Grid
    dt: float
    states: list
    stats: list
    failure: Optional[SolverError] = None

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.states))

    @property
    def final_time(self) -> float:
        return self.dt * (len(self.states) - 1)

    def state_at(self, t: float, mode: str = "constant") -> State:
        from .fields import interpolate_time

        return interpolate_time(self.states, self.dt, t, mode)


def advance(state0: State, n_steps: int, grid: Grid, phys: PhysParams,
            num: NumParams, hooks=None) -> Trajectory:
    """Run n_steps backward-Euler levels, refreshing wall data at each level.

    Solver failures are returned on the trajectory, not raised: the partial
    run up to the failing level is preserved for inspection.
    """
    states = [state0]
    stats: list = []
    failure = None
    for k in range(1, n_steps + 1):
        try:
            s, st = solve_step(states[-1], k * num.dt, grid, phys, num)
        except SolverError as e:
            failure = e
            break
        states.append(s)
        stats.append(st)
        for hook in hooks or ():
            hook(k, s, st)
    return Trajectory(grid, num.dt, states, stats, failure)
