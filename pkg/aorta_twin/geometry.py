"""Masked Cartesian grids of the idealized bifurcating vessel and sensor placement."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from pydantic import ValidationError
from scipy import ndimage

from .errors import GeometryError, InterpolationError, ResolutionTooCoarseError, SensorSelectionError
from .models import VesselShape
from .random_streams import Stream, keyed_generator

logger = logging.getLogger(__name__)

PATCH_NAMES = ("inlet", "outlet_upper", "outlet_lower", "wall")


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class BoundaryPatch:
    """A named set of boundary faces.

    x_faces are vertical faces (u locations, index (i, j) with 0 <= i <= nx);
    y_faces are horizontal faces (v locations, index (i, j) with 0 <= j <= ny).
    The fluid_side arrays hold +1 when the fluid cell lies on the positive
    side of the face and -1 otherwise.
    """
    name: str
    x_faces: np.ndarray
    y_faces: np.ndarray
    x_fluid_side: np.ndarray
    y_fluid_side: np.ndarray

    @property
    def n_faces(self) -> int:
        return len(self.x_faces) + len(self.y_faces)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Uniform masked staggered grid. Arrays are indexed [i, j] with i along x."""
    shape: VesselShape
    nx: int
    ny: int
    dx: float
    dy: float
    cell_flags: np.ndarray
    fluid_ij: np.ndarray
    cell_centers: np.ndarray
    fluid_index: np.ndarray
    boundary_patches: dict[str, BoundaryPatch]
    u_open: np.ndarray
    u_wall: np.ndarray
    u_active: np.ndarray
    u_inlet: np.ndarray
    u_outlet: np.ndarray
    v_open: np.ndarray
    v_wall: np.ndarray
    v_active: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def fluid(self) -> np.ndarray:
        return self.cell_flags.astype(bool)

    @property
    def n_fluid(self) -> int:
        return len(self.fluid_ij)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def length(self) -> float:
        return self.nx * self.dx

    @property
    def height(self) -> float:
        return self.ny * self.dy

    @property
    def u_shape(self) -> tuple[int, int]:
        return self.nx + 1, self.ny

    @property
    def v_shape(self) -> tuple[int, int]:
        return self.nx, self.ny + 1

    @property
    def face_y(self) -> np.ndarray:
        """y coordinate of vertical-face centres (one per row)."""
        return (np.arange(self.ny) + 0.5) * self.dy

    def to_grid(self, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Scatter per-fluid-cell values into an (nx, ny) array."""
        grid = np.full((self.nx, self.ny), fill, dtype=float)
        grid[self.fluid_ij[:, 0], self.fluid_ij[:, 1]] = values
        return grid

    def from_grid(self, grid: np.ndarray) -> np.ndarray:
        """Gather an (nx, ny) array into per-fluid-cell values."""
        return grid[self.fluid_ij[:, 0], self.fluid_ij[:, 1]]


@dataclass(frozen=True)
class SensorSet:
    """Observed cells and inlet stabilization cells (fluid-cell indices)."""
    sensor_cells: tuple[int, ...]
    stabilization_cells: tuple[int, ...]

    @property
    def n_sensors(self) -> int:
        return len(self.sensor_cells)


def _validated_shape(shape: VesselShape) -> VesselShape:
    try:
        shape = VesselShape.model_validate(shape.model_dump())
    except ValidationError as e:
        raise GeometryError(f"invalid vessel shape: {e.errors()[0]['msg']}") from e
    if shape.has_splitter and shape.trunk_length <= 0:
        raise GeometryError("a divided vessel needs a trunk of positive length")
    return shape


def _solid_mask(shape: VesselShape, xc: np.ndarray, yc: np.ndarray) -> np.ndarray:
    if not shape.has_splitter:
        return np.zeros(xc.shape, dtype=bool)
    x0, x1 = shape.splitter_x_range
    y0, y1 = shape.splitter_y_range
    return (xc >= x0) & (xc < x1) & (yc >= y0) & (yc < y1)


def build_vessel_mesh(shape: VesselShape, nx: int, ny: int) -> Mesh:
    """Rasterize the vessel onto an nx-by-ny grid and classify every face."""
    shape = _validated_shape(shape)
    if nx < 2 or ny < 2:
        raise GeometryError(f"grid needs at least 2x2 cells, got {nx}x{ny}")

    dx = shape.total_length / nx
    dy = shape.total_height / ny
    xc = (np.arange(nx) + 0.5) * dx
    yc = (np.arange(ny) + 0.5) * dy
    X, Y = np.meshgrid(xc, yc, indexing="ij")
    solid = _solid_mask(shape, X, Y)

    if shape.has_splitter:
        solid_rows = np.flatnonzero(solid.any(axis=0))
        if solid_rows.size == 0:
            raise ResolutionTooCoarseError(
                f"splitter of thickness {shape.splitter_thickness} m maps to zero solid rows at ny={ny}"
            )
        below = solid_rows.min()
        above = ny - 1 - solid_rows.max()
        if below != above:
            raise GeometryError(f"outlet channels differ in height at ny={ny} ({below} vs {above} rows)")

    fluid = ~solid
    labels, _ = ndimage.label(fluid)
    inlet_labels = set(np.unique(labels[0][fluid[0]]))
    if len(inlet_labels) != 1 or np.any(fluid & (labels != next(iter(inlet_labels)))):
        raise GeometryError("fluid region is not a single domain connected to the inlet")

    fluid_ij = np.argwhere(fluid)
    fluid_index = np.full((nx, ny), -1, dtype=int)
    fluid_index[fluid_ij[:, 0], fluid_ij[:, 1]] = np.arange(len(fluid_ij))
    cell_centers = np.column_stack([xc[fluid_ij[:, 0]], yc[fluid_ij[:, 1]]])

    pad_row = np.zeros((1, ny), dtype=bool)
    left = np.vstack([pad_row, fluid])
    right = np.vstack([fluid, pad_row])
    interior_u = np.zeros((nx + 1, ny), dtype=bool)
    interior_u[1:nx] = True
    u_inlet = np.zeros((nx + 1, ny), dtype=bool)
    u_inlet[0] = fluid[0]
    u_outlet = np.zeros((nx + 1, ny), dtype=bool)
    u_outlet[nx] = fluid[nx - 1]
    u_open = left & right
    u_wall = interior_u & (left ^ right)
    u_active = left | right

    pad_col = np.zeros((nx, 1), dtype=bool)
    below_cell = np.hstack([pad_col, fluid])
    above_cell = np.hstack([fluid, pad_col])
    v_open = below_cell & above_cell
    v_wall = below_cell ^ above_cell
    v_active = below_cell | above_cell

    def faces(mask: np.ndarray) -> np.ndarray:
        return np.argwhere(mask).reshape(-1, 2)

    empty = np.zeros((0, 2), dtype=int)
    inlet_faces = faces(u_inlet)
    outlet_faces = faces(u_outlet)
    upper = yc[outlet_faces[:, 1]] >= 0.5 * shape.total_height
    wall_x = faces(u_wall)
    wall_y = faces(v_wall)
    patches = {
        "inlet": BoundaryPatch("inlet", inlet_faces, empty, np.ones(len(inlet_faces), dtype=int), np.zeros(0, dtype=int)),
        "outlet_upper": BoundaryPatch(
            "outlet_upper", outlet_faces[upper], empty, -np.ones(int(upper.sum()), dtype=int), np.zeros(0, dtype=int)
        ),
        "outlet_lower": BoundaryPatch(
            "outlet_lower", outlet_faces[~upper], empty, -np.ones(int((~upper).sum()), dtype=int), np.zeros(0, dtype=int)
        ),
        "wall": BoundaryPatch(
            "wall",
            wall_x,
            wall_y,
            np.where(right[wall_x[:, 0], wall_x[:, 1]], 1, -1),
            np.where(above_cell[wall_y[:, 0], wall_y[:, 1]], 1, -1),
        ),
    }
    for patch in patches.values():
        for arr in (patch.x_faces, patch.y_faces, patch.x_fluid_side, patch.y_fluid_side):
            _frozen(arr)

    mesh = Mesh(
        shape=shape,
        nx=nx,
        ny=ny,
        dx=dx,
        dy=dy,
        cell_flags=_frozen(fluid.astype(np.int8)),
        fluid_ij=_frozen(fluid_ij),
        cell_centers=_frozen(cell_centers),
        fluid_index=_frozen(fluid_index),
        boundary_patches=patches,
        u_open=_frozen(u_open),
        u_wall=_frozen(u_wall),
        u_active=_frozen(u_active),
        u_inlet=_frozen(u_inlet),
        u_outlet=_frozen(u_outlet),
        v_open=_frozen(v_open),
        v_wall=_frozen(v_wall),
        v_active=_frozen(v_active),
    )
    logger.info(f"Built {nx}x{ny} vessel mesh: {mesh.n_fluid} fluid cells, {mesh.n_cells - mesh.n_fluid} solid")
    return mesh


def fluid_area(mesh: Mesh) -> float:
    return mesh.n_fluid * mesh.dx * mesh.dy


def analytic_fluid_area(shape: VesselShape) -> float:
    return shape.analytic_area


def nearest_fluid_cell(mesh: Mesh, x: float, y: float) -> int:
    """Fluid-cell index whose centre is closest to (x, y); ties go to the lowest index."""
    d2 = (mesh.cell_centers[:, 0] - x) ** 2 + (mesh.cell_centers[:, 1] - y) ** 2
    return int(np.argmin(d2))


def stabilization_cells(mesh: Mesh) -> tuple[int, ...]:
    """Fluid cells of the first column behind the inlet patch."""
    rows = np.flatnonzero(mesh.fluid[0])
    return tuple(int(mesh.fluid_index[0, j]) for j in rows)


def _leading_edge(mesh: Mesh) -> tuple[float, float, float] | None:
    """(x, y_low, y_high) of the divider's upstream face, or None for a plain channel."""
    solid = ~mesh.fluid
    if not solid.any():
        return None
    cols = np.flatnonzero(solid.any(axis=1))
    rows = np.flatnonzero(solid.any(axis=0))
    return cols.min() * mesh.dx, rows.min() * mesh.dy, (rows.max() + 1) * mesh.dy


def select_sensors(
    mesh: Mesh,
    fraction: float,
    seed: int,
    count: int | None = None,
    near_divider_quota: float = 0.2,
    near_divider_radius: int = 5,
) -> SensorSet:
    """Stratified sensor placement: a quota near the divider, the rest spread over the domain."""
    if not 0 < fraction < 1:
        raise SensorSelectionError(f"sensor fraction must lie in (0, 1), got {fraction}")
    n_sensors = count if count is not None else int(math.floor(fraction * mesh.n_fluid + 0.5))
    if n_sensors < 1:
        raise SensorSelectionError(f"fraction {fraction} of {mesh.n_fluid} cells yields no sensor")
    if n_sensors > mesh.n_fluid:
        raise SensorSelectionError(f"{n_sensors} sensors requested but mesh has {mesh.n_fluid} fluid cells")

    rng = keyed_generator(seed, Stream.SENSORS)
    chosen: list[int] = []
    edge = _leading_edge(mesh)
    if edge is not None and near_divider_quota > 0:
        x_le, y_lo, y_hi = edge
        cx, cy = mesh.cell_centers[:, 0], mesh.cell_centers[:, 1]
        gap_y = np.maximum(0.0, np.maximum(y_lo - cy, cy - y_hi))
        distance = np.hypot(cx - x_le, gap_y)
        near = np.flatnonzero(distance <= near_divider_radius * max(mesh.dx, mesh.dy))
        n_near = min(int(math.ceil(near_divider_quota * n_sensors)), len(near))
        if n_near > 0:
            anchor = nearest_fluid_cell(mesh, x_le, 0.5 * (y_lo + y_hi))
            chosen.append(anchor)
            pool = near[near != anchor]
            if n_near > 1:
                chosen.extend(int(c) for c in rng.choice(pool, size=n_near - 1, replace=False))

    remaining = n_sensors - len(chosen)
    if remaining > 0:
        candidates = np.setdiff1d(np.arange(mesh.n_fluid), np.asarray(chosen, dtype=int))
        for stratum in np.array_split(candidates, remaining):
            chosen.append(int(rng.choice(stratum)))

    sensors = SensorSet(sensor_cells=tuple(sorted(chosen)), stabilization_cells=stabilization_cells(mesh))
    logger.info(
        f"Selected {sensors.n_sensors} sensors ({len(sensors.stabilization_cells)} stabilization cells), seed={seed}"
    )
    return sensors


def near_divider_count(mesh: Mesh, cells: Sequence[int], radius: int = 5) -> int:
    """How many of the given cells lie within `radius` cells of the divider's leading edge."""
    edge = _leading_edge(mesh)
    if edge is None:
        return 0
    x_le, y_lo, y_hi = edge
    centers = mesh.cell_centers[np.asarray(cells, dtype=int)]
    gap_y = np.maximum(0.0, np.maximum(y_lo - centers[:, 1], centers[:, 1] - y_hi))
    distance = np.hypot(centers[:, 0] - x_le, gap_y)
    return int(np.sum(distance <= radius * max(mesh.dx, mesh.dy)))


def restrict_to_coarse(
    field: np.ndarray, fine_mesh: Mesh, coarse_mesh: Mesh, cells: Sequence[int] | None = None
) -> np.ndarray:
    """Average a per-fine-fluid-cell field over the fine centres inside each requested coarse cell."""
    if fine_mesh.shape != coarse_mesh.shape:
        raise InterpolationError("fine and coarse meshes were built from different vessel shapes")
    field = np.asarray(field, dtype=float)
    if field.shape != (fine_mesh.n_fluid,):
        raise InterpolationError(f"field has shape {field.shape}, expected ({fine_mesh.n_fluid},)")
    cells = np.arange(coarse_mesh.n_fluid) if cells is None else np.asarray(cells, dtype=int)

    ic = np.clip(np.floor(fine_mesh.cell_centers[:, 0] / coarse_mesh.dx).astype(int), 0, coarse_mesh.nx - 1)
    jc = np.clip(np.floor(fine_mesh.cell_centers[:, 1] / coarse_mesh.dy).astype(int), 0, coarse_mesh.ny - 1)
    flat = ic * coarse_mesh.ny + jc
    n = coarse_mesh.nx * coarse_mesh.ny
    sums = np.bincount(flat, weights=field, minlength=n)
    counts = np.bincount(flat, minlength=n)

    ij = coarse_mesh.fluid_ij[cells]
    target = ij[:, 0] * coarse_mesh.ny + ij[:, 1]
    if np.any(counts[target] == 0):
        empty = cells[counts[target] == 0]
        raise InterpolationError(f"coarse cells {empty.tolist()} contain no fine cell centres")
    return sums[target] / counts[target]


def interpolate_to_sensors(field: np.ndarray, coarse_sensors: SensorSet, fine_mesh: Mesh, coarse_mesh: Mesh) -> np.ndarray:
    """Fine-mesh field averaged over each coarse sensor cell."""
    return restrict_to_coarse(field, fine_mesh, coarse_mesh, coarse_sensors.sensor_cells)
