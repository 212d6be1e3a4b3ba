"""Explicit projection solver for incompressible flow on the masked staggered grid.

Layout: u lives on vertical faces (nx+1, ny), v on horizontal faces (nx, ny+1),
p at cell centres (nx, ny). Momentum uses first-order upwind convection in
advective form and a central viscous term div(mu grad u) with cell-centred
viscosity. No-slip walls are imposed through ghost values -u across dead
faces; faces lying on a wall carry exactly 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import CFLViolationError, SolverError
from .geometry import Mesh
from .models import FluidModel, InletSpec, OutletSpec, PoissonMethod, RheologyKind
from .poisson import solve_pressure

logger = logging.getLogger(__name__)

CFL_ADVECTIVE = 0.5
CFL_DIFFUSIVE = 0.25
SAFETY = 0.9

SubstepListener = Callable[["FlowState"], None]


@dataclass(frozen=True)
class FlowState:
    """Velocity and pressure at time t."""
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    t: float = 0.0

    def max_speed(self) -> float:
        return float(max(np.max(np.abs(self.u), initial=0.0), np.max(np.abs(self.v), initial=0.0)))


@dataclass(frozen=True, eq=False)
class _Stencil:
    """Per-mesh neighbour masks for ghost handling."""
    u_north: np.ndarray
    u_south: np.ndarray
    v_east: np.ndarray
    v_west: np.ndarray
    v_east_outlet: np.ndarray
    node_count: np.ndarray
    cell_east: np.ndarray
    cell_west: np.ndarray
    cell_north: np.ndarray
    cell_south: np.ndarray
    outlet_rows: np.ndarray
    inlet_rows: np.ndarray


@lru_cache(maxsize=16)
def _stencil(mesh: Mesh) -> _Stencil:
    nx, ny = mesh.nx, mesh.ny
    fluid = mesh.fluid

    u_north = np.zeros(mesh.u_shape, dtype=bool)
    u_north[:, :-1] = mesh.u_active[:, 1:]
    u_south = np.zeros(mesh.u_shape, dtype=bool)
    u_south[:, 1:] = mesh.u_active[:, :-1]

    v_east = np.zeros(mesh.v_shape, dtype=bool)
    v_east[:-1] = mesh.v_active[1:]
    v_west = np.zeros(mesh.v_shape, dtype=bool)
    v_west[1:] = mesh.v_active[:-1]
    v_east_outlet = np.zeros(mesh.v_shape, dtype=bool)
    v_east_outlet[-1] = True

    padded = np.pad(fluid.astype(int), 1)
    node_count = padded[:-1, :-1] + padded[1:, :-1] + padded[:-1, 1:] + padded[1:, 1:]

    cell_east = np.zeros((nx, ny), dtype=bool)
    cell_east[:-1] = fluid[1:]
    cell_west = np.zeros((nx, ny), dtype=bool)
    cell_west[1:] = fluid[:-1]
    cell_north = np.zeros((nx, ny), dtype=bool)
    cell_north[:, :-1] = fluid[:, 1:]
    cell_south = np.zeros((nx, ny), dtype=bool)
    cell_south[:, 1:] = fluid[:, :-1]

    return _Stencil(
        u_north=u_north,
        u_south=u_south,
        v_east=v_east,
        v_west=v_west,
        v_east_outlet=v_east_outlet,
        node_count=node_count,
        cell_east=cell_east,
        cell_west=cell_west,
        cell_north=cell_north,
        cell_south=cell_south,
        outlet_rows=np.flatnonzero(mesh.u_outlet[-1]),
        inlet_rows=np.flatnonzero(mesh.u_inlet[0]),
    )


def zero_state(mesh: Mesh, t: float = 0.0) -> FlowState:
    return FlowState(np.zeros(mesh.u_shape), np.zeros(mesh.v_shape), np.zeros((mesh.nx, mesh.ny)), t)


def initial_state(mesh: Mesh, inlet: InletSpec, t: float = 0.0) -> FlowState:
    """Fluid at rest with the inlet faces already carrying the prescribed profile at t."""
    state = zero_state(mesh, t)
    apply_inlet(state.u, mesh, inlet, t)
    return state


def apply_inlet(u: np.ndarray, mesh: Mesh, inlet: InletSpec, t: float) -> None:
    """Write the inlet profile at time t into the inlet faces of u (in place)."""
    rows = _stencil(mesh).inlet_rows
    u[0, rows] = inlet.profile(mesh.face_y[rows], t, mesh.height)


def check_state(state: FlowState, mesh: Mesh) -> None:
    if state.u.shape != mesh.u_shape or state.v.shape != mesh.v_shape or state.p.shape != (mesh.nx, mesh.ny):
        raise SolverError(
            f"state shapes u{state.u.shape} v{state.v.shape} p{state.p.shape} do not match "
            f"{mesh.nx}x{mesh.ny} mesh"
        )
    if not (np.all(np.isfinite(state.u)) and np.all(np.isfinite(state.v))):
        raise SolverError(f"non-finite velocity at t={state.t:.4f}")


def _cell_centred(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return 0.5 * (u[:-1] + u[1:]), 0.5 * (v[:, :-1] + v[:, 1:])


def cell_velocities(state: FlowState, mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centred (u, v) per fluid cell, averaged from the two bounding faces."""
    uc, vc = _cell_centred(state.u, state.v)
    return mesh.from_grid(uc), mesh.from_grid(vc)


def divergence(state: FlowState, mesh: Mesh) -> np.ndarray:
    """Face-flux divergence per fluid cell (1/s)."""
    return mesh.from_grid(_divergence_grid(state.u, state.v, mesh))


def _divergence_grid(u: np.ndarray, v: np.ndarray, mesh: Mesh) -> np.ndarray:
    return (u[1:] - u[:-1]) / mesh.dx + (v[:, 1:] - v[:, :-1]) / mesh.dy


def fluxes(state: FlowState, mesh: Mesh) -> tuple[float, float]:
    """(inlet, outlet) volumetric flux per unit depth (m^2/s)."""
    inlet = float(np.sum(state.u[0][mesh.u_inlet[0]]) * mesh.dy)
    outlet = float(np.sum(state.u[-1][mesh.u_outlet[-1]]) * mesh.dy)
    return inlet, outlet


def _shear_rate_grid(u: np.ndarray, v: np.ndarray, mesh: Mesh) -> np.ndarray:
    st = _stencil(mesh)
    uc, vc = _cell_centred(u, v)

    def neighbours(q: np.ndarray, inlet_face: np.ndarray) -> tuple[np.ndarray, ...]:
        east = np.empty_like(q)
        east[:-1] = q[1:]
        east[-1] = q[-1]
        east = np.where(st.cell_east, east, -q)
        east[-1] = q[-1]  # outlet: zero gradient
        west = np.empty_like(q)
        west[1:] = q[:-1]
        west = np.where(st.cell_west, west, -q)
        west[0] = 2.0 * inlet_face - q[0]
        north = np.empty_like(q)
        north[:, :-1] = q[:, 1:]
        north = np.where(st.cell_north, north, -q)
        south = np.empty_like(q)
        south[:, 1:] = q[:, :-1]
        south = np.where(st.cell_south, south, -q)
        return east, west, north, south

    ue, uw, un, us = neighbours(uc, u[0])
    ve, vw, vn, vs = neighbours(vc, np.zeros(mesh.ny))
    dudx = (ue - uw) / (2.0 * mesh.dx)
    dudy = (un - us) / (2.0 * mesh.dy)
    dvdx = (ve - vw) / (2.0 * mesh.dx)
    dvdy = (vn - vs) / (2.0 * mesh.dy)
    d12 = 0.5 * (dudy + dvdx)
    gamma = np.sqrt(0.5 * (dudx**2 + dvdy**2 + 2.0 * d12**2))
    return np.where(mesh.fluid, gamma, 0.0)


def shear_rate(state: FlowState, mesh: Mesh) -> np.ndarray:
    """gamma_dot = sqrt(1/2 D_ij D_ij) per fluid cell, D the strain-rate tensor."""
    return mesh.from_grid(_shear_rate_grid(state.u, state.v, mesh))


def casson_viscosity(gamma_dot, model: FluidModel):
    """Casson viscosity tau0/g + sqrt(mu_inf tau0 / g) + mu_inf with g floored at gamma_min."""
    g = np.maximum(np.asarray(gamma_dot, dtype=float), model.gamma_min)
    mu = model.tau0 / g + np.sqrt(model.mu_inf * model.tau0) / np.sqrt(g) + model.mu_inf
    return float(mu) if np.ndim(mu) == 0 else mu


def _viscosity_grid(u: np.ndarray, v: np.ndarray, mesh: Mesh, model: FluidModel) -> np.ndarray:
    if model.kind == RheologyKind.NEWTONIAN:
        return np.full((mesh.nx, mesh.ny), model.mu)
    mu = np.minimum(casson_viscosity(_shear_rate_grid(u, v, mesh), model), model.mu_max)
    return np.where(mesh.fluid, mu, model.mu_inf)


def effective_viscosity(state: FlowState, mesh: Mesh, model: FluidModel) -> np.ndarray:
    """Per-fluid-cell viscosity used by the solver (Casson values capped at mu_max)."""
    return mesh.from_grid(_viscosity_grid(state.u, state.v, mesh, model))


def _node_viscosity(mu_c: np.ndarray, mesh: Mesh) -> np.ndarray:
    weighted = np.pad(np.where(mesh.fluid, mu_c, 0.0), 1)
    total = weighted[:-1, :-1] + weighted[1:, :-1] + weighted[:-1, 1:] + weighted[1:, 1:]
    count = _stencil(mesh).node_count
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def _momentum_rates(
    u: np.ndarray, v: np.ndarray, mesh: Mesh, model: FluidModel
) -> tuple[np.ndarray, np.ndarray]:
    """Time derivative of u and v from convection and viscous stress (zero on non-open faces)."""
    st = _stencil(mesh)
    dx, dy, rho = mesh.dx, mesh.dy, model.density
    mu_c = _viscosity_grid(u, v, mesh, model)
    mu_n = _node_viscosity(mu_c, mesh)

    # u on interior vertical faces
    u_north = np.empty_like(u)
    u_north[:, :-1] = u[:, 1:]
    u_north[:, -1] = 0.0
    u_north = np.where(st.u_north, u_north, -u)
    u_south = np.empty_like(u)
    u_south[:, 1:] = u[:, :-1]
    u_south[:, 0] = 0.0
    u_south = np.where(st.u_south, u_south, -u)

    uc, vc = _cell_centred(u, v)
    ui = u[1:-1]
    v_at_u = 0.5 * (vc[:-1] + vc[1:])
    u_west, u_east = u[:-2], u[2:]
    n_i, s_i = u_north[1:-1], u_south[1:-1]
    conv_u = ui * np.where(ui > 0, ui - u_west, u_east - ui) / dx + v_at_u * np.where(
        v_at_u > 0, ui - s_i, n_i - ui
    ) / dy
    visc_u = (mu_c[1:] * (u_east - ui) - mu_c[:-1] * (ui - u_west)) / dx**2 + (
        mu_n[1:-1, 1:] * (n_i - ui) - mu_n[1:-1, :-1] * (ui - s_i)
    ) / dy**2
    du = np.zeros_like(u)
    du[1:-1] = -conv_u + visc_u / rho
    du = np.where(mesh.u_open, du, 0.0)

    # v on interior horizontal faces
    v_east = np.empty_like(v)
    v_east[:-1] = v[1:]
    v_east[-1] = 0.0
    v_east = np.where(st.v_east, v_east, np.where(st.v_east_outlet, v, -v))
    v_west = np.empty_like(v)
    v_west[1:] = v[:-1]
    v_west[0] = 0.0
    v_west = np.where(st.v_west, v_west, -v)

    vj = v[:, 1:-1]
    u_at_v = 0.5 * (uc[:, :-1] + uc[:, 1:])
    v_south, v_north = v[:, :-2], v[:, 2:]
    e_j, w_j = v_east[:, 1:-1], v_west[:, 1:-1]
    conv_v = u_at_v * np.where(u_at_v > 0, vj - w_j, e_j - vj) / dx + vj * np.where(
        vj > 0, vj - v_south, v_north - vj
    ) / dy
    visc_v = (mu_n[1:, 1:-1] * (e_j - vj) - mu_n[:-1, 1:-1] * (vj - w_j)) / dx**2 + (
        mu_c[:, 1:] * (v_north - vj) - mu_c[:, :-1] * (vj - v_south)
    ) / dy**2
    dv = np.zeros_like(v)
    dv[:, 1:-1] = -conv_v + visc_v / rho
    dv = np.where(mesh.v_open, dv, 0.0)
    return du, dv


def project(
    state: FlowState,
    mesh: Mesh,
    dt: float,
    density: float,
    outlet_pressure: float,
    method: PoissonMethod = PoissonMethod.DIRECT,
) -> FlowState:
    """Remove the divergent part of the velocity and return the pressure that did it.

    Args:
        state: Intermediate velocity (the pressure field is ignored)
        mesh: Mesh the state lives on
        dt: Step the pressure acts over
        density: Fluid density
        outlet_pressure: Dirichlet pressure at both outlets
        method: Poisson backend

    Returns:
        Divergence-free state with the projection pressure
    """
    u = state.u.copy()
    v = state.v.copy()
    scale = dt / density
    rhs = mesh.from_grid(_divergence_grid(u, v, mesh))
    phi_out = scale * outlet_pressure
    phi, _ = solve_pressure(mesh, rhs, phi_out, method)
    phi_grid = mesh.to_grid(phi)

    ui, uj = np.nonzero(mesh.u_open)
    u[ui, uj] -= (phi_grid[ui, uj] - phi_grid[ui - 1, uj]) / mesh.dx
    oi, oj = np.nonzero(mesh.u_outlet)
    u[oi, oj] -= (phi_out - phi_grid[oi - 1, oj]) / (0.5 * mesh.dx)
    vi, vj = np.nonzero(mesh.v_open)
    v[vi, vj] -= (phi_grid[vi, vj] - phi_grid[vi, vj - 1]) / mesh.dy

    p = np.where(mesh.fluid, phi_grid / scale, 0.0)
    return FlowState(u, v, p, state.t)


def stable_dt(state: FlowState, mesh: Mesh, model: FluidModel, inlet: InletSpec | None = None) -> float:
    """Largest dt meeting both the advective and diffusive bounds for this state."""
    h = min(mesh.dx, mesh.dy)
    u_max = float(np.max(np.abs(state.u), initial=0.0))
    v_max = float(np.max(np.abs(state.v), initial=0.0))
    if inlet is not None:
        u_max = max(u_max, abs(inlet.amplitude(state.t)))
    nu = float(np.max(_viscosity_grid(state.u, state.v, mesh, model)[mesh.fluid])) / model.density
    # combined upwind + diffusion bound of the forward-Euler scheme
    rate = u_max / mesh.dx + v_max / mesh.dy + 2.0 * nu * (1.0 / mesh.dx**2 + 1.0 / mesh.dy**2)
    limits = [CFL_DIFFUSIVE * h**2 / nu, 1.0 / rate]
    speed = max(u_max, v_max)
    if speed > 0:
        limits.append(CFL_ADVECTIVE * h / speed)
    return min(limits)


def _check_cfl(state: FlowState, dt: float, mesh: Mesh, model: FluidModel) -> None:
    h = min(mesh.dx, mesh.dy)
    advective = state.max_speed() * dt / h
    nu = float(np.max(_viscosity_grid(state.u, state.v, mesh, model)[mesh.fluid])) / model.density
    diffusive = nu * dt / h**2
    if advective > CFL_ADVECTIVE * (1 + 1e-12):
        raise CFLViolationError(f"advective CFL {advective:.3f} > {CFL_ADVECTIVE} (dt={dt:.3e}, t={state.t:.4f})")
    if diffusive > CFL_DIFFUSIVE * (1 + 1e-12):
        raise CFLViolationError(f"diffusive number {diffusive:.3f} > {CFL_DIFFUSIVE} (dt={dt:.3e}, t={state.t:.4f})")


def _predict(
    base: FlowState, rates_from: FlowState, h: float, t_target: float,
    mesh: Mesh, model: FluidModel, inlet: InletSpec,
) -> tuple[np.ndarray, np.ndarray]:
    du, dv = _momentum_rates(rates_from.u, rates_from.v, mesh, model)
    u = base.u + h * du
    v = base.v + h * dv
    apply_inlet(u, mesh, inlet, t_target)
    rows = _stencil(mesh).outlet_rows
    u[-1, rows] = np.where(mesh.u_open[-2, rows], u[-2, rows], base.u[-1, rows])
    return u, v


def step(
    state: FlowState,
    dt: float,
    mesh: Mesh,
    model: FluidModel,
    inlet: InletSpec,
    outlet: OutletSpec,
    stages: int = 1,
    poisson: PoissonMethod = PoissonMethod.DIRECT,
) -> FlowState:
    """Advance one projection step (stages=2 gives the explicit midpoint variant).

    Raises:
        CFLViolationError: dt breaks the advective or diffusive bound
        PoissonConvergenceError: pressure solve did not reach tolerance
    """
    check_state(state, mesh)
    _check_cfl(state, dt, mesh, model)
    t_new = state.t + dt
    if stages == 2:
        t_half = state.t + 0.5 * dt
        u, v = _predict(state, state, 0.5 * dt, t_half, mesh, model, inlet)
        half = project(FlowState(u, v, state.p, t_half), mesh, 0.5 * dt, model.density, outlet.pressure(t_half), poisson)
        u, v = _predict(state, half, dt, t_new, mesh, model, inlet)
    elif stages == 1:
        u, v = _predict(state, state, dt, t_new, mesh, model, inlet)
    else:
        raise SolverError(f"stages must be 1 or 2, got {stages}")
    return project(FlowState(u, v, state.p, t_new), mesh, dt, model.density, outlet.pressure(t_new), poisson)


def advance(
    state: FlowState,
    dt: float,
    mesh: Mesh,
    model: FluidModel,
    inlet: InletSpec,
    outlet: OutletSpec,
    stages: int = 1,
    poisson: PoissonMethod = PoissonMethod.DIRECT,
    listener: SubstepListener | None = None,
) -> FlowState:
    """Advance by dt using as many stable sub-steps as needed; lands exactly on t + dt."""
    t_end = state.t + dt
    n_sub = 0
    while (remaining := t_end - state.t) > 1e-12 * dt:
        h = min(remaining, SAFETY * stable_dt(state, mesh, model, inlet))
        if remaining - h < 1e-9 * dt:
            h = remaining
        state = step(state, h, mesh, model, inlet, outlet, stages=stages, poisson=poisson)
        n_sub += 1
        if listener is not None:
            listener(state)
    logger.debug(f"Advanced to t={t_end:.4f} in {n_sub} sub-steps")
    return replace(state, t=t_end)


def wall_shear_stress(state: FlowState, mesh: Mesh, model: FluidModel) -> np.ndarray:
    """Signed wall shear stress per wall face, in the order of the wall patch (x faces, then y faces).

    tau_w = mu_eff(adjacent cell) * tangential velocity at that cell centre / half-cell distance.
    """
    patch = mesh.boundary_patches["wall"]
    uc, vc = _cell_centred(state.u, state.v)
    mu = _viscosity_grid(state.u, state.v, mesh, model)

    xi, xj = patch.x_faces[:, 0], patch.x_faces[:, 1]
    x_cells = np.where(patch.x_fluid_side > 0, xi, xi - 1)
    tau_x = mu[x_cells, xj] * vc[x_cells, xj] / (0.5 * mesh.dx)

    yi, yj = patch.y_faces[:, 0], patch.y_faces[:, 1]
    y_cells = np.where(patch.y_fluid_side > 0, yj, yj - 1)
    tau_y = mu[yi, y_cells] * uc[yi, y_cells] / (0.5 * mesh.dy)
    return np.concatenate([tau_x, tau_y])


def wall_face_centers(mesh: Mesh) -> np.ndarray:
    """Coordinates of the wall faces, matching wall_shear_stress ordering."""
    patch = mesh.boundary_patches["wall"]
    x = np.column_stack([patch.x_faces[:, 0] * mesh.dx, (patch.x_faces[:, 1] + 0.5) * mesh.dy])
    y = np.column_stack([(patch.y_faces[:, 0] + 0.5) * mesh.dx, patch.y_faces[:, 1] * mesh.dy])
    return np.vstack([x, y])


def wss_per_cell(state: FlowState, mesh: Mesh, model: FluidModel) -> np.ndarray:
    """Per-fluid-cell magnitude of the largest adjacent wall shear stress (0 away from walls)."""
    patch = mesh.boundary_patches["wall"]
    tau = np.abs(wall_shear_stress(state, mesh, model))
    grid = np.zeros((mesh.nx, mesh.ny))
    xi, xj = patch.x_faces[:, 0], patch.x_faces[:, 1]
    x_cells = np.where(patch.x_fluid_side > 0, xi, xi - 1)
    yi, yj = patch.y_faces[:, 0], patch.y_faces[:, 1]
    y_cells = np.where(patch.y_fluid_side > 0, yj, yj - 1)
    n_x = len(xi)
    np.maximum.at(grid, (x_cells, xj), tau[:n_x])
    np.maximum.at(grid, (yi, y_cells), tau[n_x:])
    return mesh.from_grid(grid)


def time_averaged_wss(samples: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of per-wall-face shear stress samples over a run."""
    if len(samples) == 0:
        raise SolverError("no wall shear samples to average")
    return np.mean(np.stack(samples), axis=0)
