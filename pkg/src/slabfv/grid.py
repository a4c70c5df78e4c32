"""Uniform cube mesh on the periodic slab.

The domain is a box that is periodic in the first d-1 axes and bounded by
two walls in the last axis.  Cells are cubes of size h, indexed by a d-tuple
with C-order ravel as the global ordering.  Faces are grouped per axis:

* periodic axis a: N_a face layers, face i sitting between cell i-1 and
  cell i (wrap-around), intrinsic normal +e_a;
* wall axis: N_d+1 layers; layers 1..N_d-1 are interior with the same
  between-cells convention, layers 0 and N_d are the exterior wall faces.

At an exterior face the "in" side is always the unique interior cell and
the "out" side is ghost space, which matches the outward normal there.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

__all__ = ["GridSpec", "Grid", "GridError"]


class GridError(ValueError):
    pass


def _count(extent: float, h: float, name: str) -> int:
    n = extent / h
    n_int = round(n)
    if n_int < 1 or abs(n - n_int) > 1e-9 * max(1.0, n):
        raise GridError(f"{name} = {extent} is not an integer multiple of h = {h}")
    return n_int


@dataclasses.dataclass(frozen=True)
class GridSpec:
    """Geometry: d in {2,3}, horizontal half-period L, half-height H, cell size h."""

    d: int
    L: float
    H: float
    h: float

    def __post_init__(self):
        if self.d not in (2, 3):
            raise GridError(f"d must be 2 or 3, got {self.d}")
        if not (self.h > 0 and self.L > 0 and self.H > 0):
            raise GridError("L, H, h must be positive")
        _count(2 * self.L, self.h, "2L")
        _count(2 * self.H, self.h, "2H")

    @property
    def shape(self) -> tuple[int, ...]:
        n_per = _count(2 * self.L, self.h, "2L")
        n_wall = _count(2 * self.H, self.h, "2H")
        return (n_per,) * (self.d - 1) + (n_wall,)


class Grid:
    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.d = spec.d
        self.h = spec.h
        self.shape = spec.shape
        self.n_cells = int(np.prod(self.shape))
        self.cell_volume = spec.h**spec.d
        self.face_area = spec.h ** (spec.d - 1)
        self.wall = spec.d - 1
        self.periodic_axes = tuple(range(spec.d - 1))
        self.lows = (-spec.L,) * (spec.d - 1) + (-spec.H,)

    def __repr__(self):
        return f"Grid(d={self.d}, shape={self.shape}, h={self.h})"

    # --- face bookkeeping ---

    def face_shape(self, axis: int) -> tuple[int, ...]:
        s = list(self.shape)
        if axis == self.wall:
            s[axis] += 1
        return tuple(s)

    def n_faces(self, axis: int) -> int:
        return int(np.prod(self.face_shape(axis)))

    @property
    def n_exterior_faces(self) -> int:
        return 2 * int(np.prod(self.shape[:-1]))

    def interior_face_mask(self, axis: int) -> np.ndarray:
        m = np.ones(self.face_shape(axis), dtype=bool)
        if axis == self.wall:
            m[..., 0] = False
            m[..., -1] = False
        return m

    def boundary_dual_mask(self, axis: int) -> np.ndarray:
        """Dual cells straddling the walls (their outer half is ghost space)."""
        return ~self.interior_face_mask(axis)

    def face_cells(self, axis: int, idx: tuple[int, ...]):
        """(in_cell, out_cell) of one face; out_cell is None at a wall face."""
        idx = tuple(idx)
        k = idx[axis]
        below = list(idx)
        below[axis] = (k - 1) % self.shape[axis] if axis != self.wall else k - 1
        above = list(idx)
        above[axis] = k
        if axis == self.wall:
            if k == 0:
                return tuple(above), None
            if k == self.shape[axis]:
                return tuple(below), None
        return tuple(below), tuple(above)

    def faces_of(self, cell: tuple[int, ...]):
        """The 2d faces of one cell as (axis, face_index, outward_sign)."""
        cell = tuple(cell)
        out = []
        for a in range(self.d):
            lower = list(cell)
            upper = list(cell)
            upper[a] = (cell[a] + 1) % self.shape[a] if a != self.wall else cell[a] + 1
            out.append((a, tuple(lower), -1))
            out.append((a, tuple(upper), +1))
        return out

    # --- geometry ---

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.lows[axis] + (np.arange(self.shape[axis]) + 0.5) * self.h

    def face_axis_coords(self, axis: int) -> np.ndarray:
        n = self.face_shape(axis)[axis]
        return self.lows[axis] + np.arange(n) * self.h

    def cell_centers(self) -> np.ndarray:
        axes = [self.axis_coords(a) for a in range(self.d)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def face_centers(self, axis: int) -> np.ndarray:
        axes = [
            self.face_axis_coords(a) if a == axis else self.axis_coords(a)
            for a in range(self.d)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def wall_plane_points(self, side: int) -> np.ndarray:
        """Centers of the exterior faces at the bottom (side=0) or top (side=1)."""
        axes = [self.axis_coords(a) for a in self.periodic_axes]
        x_wall = -self.spec.H if side == 0 else self.spec.H
        grids = np.meshgrid(*axes, indexing="ij") if axes else []
        pts = np.stack([*grids, np.full(self.shape[:-1], x_wall)], axis=-1)
        return pts
