import numpy as np
import pytest

from slabfv.fields import (
    BoundaryFaceField,
    State,
    VertexLift,
    interpolate_time,
    project_boundary_faces,
    project_cell_average,
    project_dual_average,
    project_face_average,
    write_vtk,
)
from slabfv.grid import Grid, GridSpec
from slabfv.operators import Even, MirrorOdd


@pytest.fixture
def g44():
    return Grid(GridSpec(d=2, L=0.5, H=0.5, h=0.25))


def test_cell_average_constant(g44):
    r = project_cell_average(lambda x: np.full(x.shape[:-1], 3.25), g44)
    np.testing.assert_allclose(r, 3.25)


def test_cell_average_affine_midpoint(g44):
    r = project_cell_average(lambda x: x[..., 0], g44, order=1)
    # cell [0, 0.25] in axis 0 is index 2; midpoint exact for affine data
    assert r[2, 0] == pytest.approx(0.125)


def test_cell_average_quadratic(g44):
    f = lambda x: x[..., 0] ** 2
    mid = project_cell_average(f, g44, order=1)
    gauss = project_cell_average(f, g44, order=2)
    # exact average of x^2 over [0, 0.25] is 1/48
    assert mid[2, 0] == pytest.approx(0.015625)
    assert gauss[2, 0] == pytest.approx(1.0 / 48.0, rel=1e-13)


def test_cell_average_projection_property(g44):
    # projecting a function that is already piecewise constant reproduces it
    c = g44.cell_centers()
    vals = np.sin(c[..., 0]) + c[..., 1]

    def f(x):
        i = np.floor((x[..., 0] + 0.5) / 0.25).astype(int) % 4
        j = np.clip(np.floor((x[..., 1] + 0.5) / 0.25).astype(int), 0, 3)
        return vals[i, j]

    r = project_cell_average(f, g44, order=2)
    np.testing.assert_allclose(r, vals, rtol=1e-14)


def test_face_average_affine(g44):
    r = project_face_average(lambda x: x[..., 0], g44, axis=0)
    # axis-0 faces sit on planes x_0 = -0.5 + i h
    assert r[0, 0] == pytest.approx(-0.5)
    assert r[3, 2] == pytest.approx(0.25)
    rw = project_face_average(lambda x: x[..., 1], g44, axis=1)
    assert rw[1, 0] == pytest.approx(-0.5)
    assert rw[1, 4] == pytest.approx(0.5)


def test_face_average_sine(g44):
    r = project_face_average(lambda x: np.sin(2 * np.pi * x[..., 0]), g44, axis=0)
    # the integrand is constant on axis-0 faces, so the value is exact
    assert r[3, 1] == pytest.approx(1.0)


def test_boundary_faces(g44):
    bf = project_boundary_faces(lambda x: 1.0 + x[..., 1], g44)
    assert isinstance(bf, BoundaryFaceField)
    np.testing.assert_allclose(bf.bottom, 0.5)
    np.testing.assert_allclose(bf.top, 1.5)
    assert bf.bottom.shape == (4,)


def test_dual_average_interior_mean(g44):
    r = np.ones(g44.shape)
    r[1, :] = 2.0
    w = project_dual_average(r, g44, axis=0, ghost=Even())
    assert w[1, 0] == pytest.approx(1.5)  # between cells 0 and 1
    assert w[2, 0] == pytest.approx(1.5)
    assert w[3, 0] == pytest.approx(1.0)


def test_dual_average_ghosts(g44):
    r = np.full(g44.shape, 2.0)
    w_even = project_dual_average(r, g44, axis=1, ghost=Even())
    assert w_even[0, 0] == pytest.approx(2.0)
    w_odd = project_dual_average(r, g44, axis=1, ghost=MirrorOdd())
    assert w_odd[0, 0] == pytest.approx(0.0)
    assert w_odd[0, 2] == pytest.approx(2.0)


def test_dual_average_constant(g44):
    r = np.full(g44.shape, 7.0)
    for ax in range(2):
        w = project_dual_average(r, g44, axis=ax, ghost=Even())
        np.testing.assert_allclose(w, 7.0)


def test_vertex_lift_constant(g44):
    lift = VertexLift(np.full(g44.shape, 4.0), g44)
    np.testing.assert_allclose(lift.vertex_values, 4.0)
    assert lift.grad_l2_norm() == pytest.approx(0.0, abs=1e-14)
    assert lift.l2_error() == pytest.approx(0.0, abs=1e-14)


def test_vertex_lift_interior_mean(g44):
    r = np.zeros(g44.shape)
    r[0, 0], r[1, 0], r[0, 1], r[1, 1] = 1.0, 2.0, 3.0, 4.0
    lift = VertexLift(r, g44)
    # interior vertex shared by those four cells
    assert lift.vertex_values[1, 1] == pytest.approx(2.5)


def test_vertex_lift_wall_vertex_counts_existing_cells(g44):
    r = np.zeros(g44.shape)
    r[0, 0], r[1, 0] = 1.0, 3.0
    lift = VertexLift(r, g44)
    # a bottom-wall vertex only touches the two real cells
    assert lift.vertex_values[1, 0] == pytest.approx(2.0)


def test_vertex_lift_linear_gradient(g44):
    c = g44.cell_centers()
    lift = VertexLift(c[..., 0].copy(), g44)
    gpc = lift.grad_per_cell_l2()
    # unit slope away from the periodic seam
    for i in (1, 2):
        for j in (1, 2):
            assert gpc[i, j] == pytest.approx(g44.h, rel=1e-12)  # |grad|=1 over one cell


def test_es_lift_ratios_bounded():
    rng = np.random.default_rng(5)
    coef = rng.normal(size=(3, 3))

    def smooth(x):
        out = np.zeros(x.shape[:-1])
        for p in range(3):
            for q in range(3):
                out += coef[p, q] * np.cos(
                    np.pi * (p * x[..., 0] + 0.5 * q * x[..., 1])
                )
        return out

    ratios_g, ratios_e = [], []
    for h in (0.25, 0.125, 0.0625):
        g = Grid(GridSpec(d=2, L=0.5, H=0.5, h=h))
        r = project_cell_average(smooth, g, order=2)
        lift = VertexLift(r, g)
        semin = _jump_seminorm(r, g)
        ratios_g.append(lift.grad_l2_norm() / semin)
        ratios_e.append(lift.l2_error() / (h * semin))
    assert max(ratios_g) <= 4 * ratios_g[0]
    assert max(ratios_e) <= 4 * ratios_e[0]


def _jump_seminorm(r, g):
    # sum over interior faces of |sigma| [[r]]^2 / h
    total = 0.0
    for ax in range(g.d):
        if ax == g.wall:
            jumps = r[..., 1:] - r[..., :-1]
        else:
            jumps = r - np.roll(r, 1, axis=ax)
        total += g.face_area * np.sum(jumps**2) / g.h
    return np.sqrt(total)


def _mk_state(g, rho, t_index):
    zb = BoundaryFaceField(np.ones(g.shape[:-1]), np.ones(g.shape[:-1]))
    return State(
        rho=np.full(g.shape, float(rho)),
        u=np.zeros(g.shape + (g.d,)),
        theta=np.ones(g.shape),
        theta_b=zb,
        t_index=t_index,
    )


def test_interpolate_time_linear_midpoint(g44):
    states = [_mk_state(g44, 1.0, 0), _mk_state(g44, 2.0, 1)]
    rho, _, _ = interpolate_time(states, dt=0.1, t=0.05, mode="linear")
    np.testing.assert_allclose(rho, 1.5)


def test_interpolate_time_constant_midpoint(g44):
    states = [_mk_state(g44, 1.0, 0), _mk_state(g44, 2.0, 1)]
    rho, _, _ = interpolate_time(states, dt=0.1, t=0.05, mode="constant")
    np.testing.assert_allclose(rho, 1.0)


def test_interpolate_time_nodes_and_ends(g44):
    states = [_mk_state(g44, v, k) for k, v in enumerate((1.0, 2.0, 4.0))]
    rho, _, _ = interpolate_time(states, dt=0.1, t=0.1, mode="linear")
    np.testing.assert_allclose(rho, 2.0)
    rho, _, _ = interpolate_time(states, dt=0.1, t=0.2, mode="constant")
    np.testing.assert_allclose(rho, 4.0)  # final time returns the last level
    rho, _, _ = interpolate_time(states, dt=0.1, t=0.15, mode="constant")
    np.testing.assert_allclose(rho, 2.0)
    rho, _, _ = interpolate_time(states, dt=0.1, t=0.0, mode="constant")
    np.testing.assert_allclose(rho, 1.0)
    with pytest.raises(ValueError):
        interpolate_time(states, dt=0.1, t=0.25, mode="constant")


def test_write_vtk(tmp_path, g44):
    st = _mk_state(g44, 1.0, 0)
    st.rho[:] = np.arange(16.0).reshape(4, 4)
    st.u[..., 0] = 2.0
    path = tmp_path / "snap_0000.vtk"
    write_vtk(path, g44, st)
    text = path.read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    assert "DATASET STRUCTURED_POINTS" in text
    assert "DIMENSIONS 5 5 1" in text
    assert any(l.startswith("ORIGIN -0.5 -0.5") for l in text)
    assert "CELL_DATA 16" in text
    i = text.index("SCALARS rho double") + 2
    vals = []
    while len(vals) < 16:
        vals.extend(float(v) for v in text[i].split())
        i += 1
    np.testing.assert_allclose(vals, st.rho.ravel(order="F"))
    j = next(k for k, l in enumerate(text) if l.startswith("VECTORS u"))
    first = [float(v) for v in text[j + 1].split()][:3]
    np.testing.assert_allclose(first, [2.0, 0.0, 0.0])
