"""Time-split integrator for the mean-flow equations with porosity drag.

Stage order per step: advect momentum (MacCormack) and k/omega (upwind),
explicit diffusion with the stability-limited eddy viscosity, porosity drag,
boundary enforcement, pressure projection, turbulence sources, boundaries
again. The pressure matrix and its preconditioner are precomputed and reused
across steps and interior edits.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .advection import Advector
from .grid import CellLabel, FlowState, GridSpec, interior_mask
from .linalg import PcgReport, Preconditioner, PressureSystem, pcg_solve
from .turbulence import inlet_turbulence, nu_stable, update_turbulence

VON_KARMAN = 0.41


@dataclass
class SolverParams:
    """Physical and model constants; defaults follow the standard k-omega
    closure coefficients and the validated building-drag fit."""

    dt: float = 0.1
    nu: float = 1.57e-5            # molecular kinematic viscosity of air
    cd_tree: float = 0.2
    cd_building: float = 1.0
    drag_a: float = 0.62
    drag_b: float = 2.5
    drag_eps: float = 1e-10
    c_mu: float = 0.09
    alpha: float = 0.52
    beta: float = 0.0708
    sigma: float = 0.5
    sigma_star: float = 0.6
    c_lim: float = 7.0 / 8.0
    turb_intensity: float = 0.05
    u_ref: float = 1.0
    length_scale: float = 10.0
    turbulence: bool = True

    def inlet_k_omega(self) -> tuple[float, float]:
        return inlet_turbulence(self.turb_intensity, self.u_ref,
                                self.length_scale, self.c_mu)


@dataclass
class InletProfile:
    """Inlet wind: uniform speed or a logarithmic boundary-layer profile
    u(z) = (u_star / kappa) ln(z / z0), blowing along a horizontal
    direction vector."""

    kind: str = "uniform"
    speed: float = 1.0              # uniform profile speed
    u_star: float = 0.5             # friction speed, log profile
    z0: float = 0.5                 # roughness length, log profile
    kappa: float = VON_KARMAN
    direction: tuple[float, float] = (1.0, 0.0)

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)[:2]
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("inlet direction must be non-zero")
        self.direction = (float(d[0] / n), float(d[1] / n))
        if self.kind not in ("uniform", "logarithmic"):
            raise ValueError(f"unknown inlet profile kind {self.kind!r}")

    def speed_at(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.kind == "uniform":
            return np.full_like(z, self.speed)
        out = np.zeros_like(z)
        above = z > self.z0
        out[above] = self.u_star / self.kappa * np.log(z[above] / self.z0)
        return out

    def reference_speed(self, grid: GridSpec) -> float:
        if self.kind == "uniform":
            return self.speed
        z_top = grid.origin[2] + grid.nz * grid.dz
        return float(self.speed_at(np.array([max(z_top, self.z0 * np.e)]))[0])

    def rotated(self, degrees: float) -> "InletProfile":
        a = np.deg2rad(degrees)
        dx, dy = self.direction
        return InletProfile(
            kind=self.kind, speed=self.speed, u_star=self.u_star, z0=self.z0,
            kappa=self.kappa,
            direction=(dx * np.cos(a) - dy * np.sin(a),
                       dx * np.sin(a) + dy * np.cos(a)))


@dataclass
class StepReport:
    timings: dict = field(default_factory=dict)
    pcg: PcgReport | None = None
    cfl: float = 0.0
    div_before: float = 0.0
    div_after: float = 0.0

    @property
    def wall_time(self) -> float:
        return sum(self.timings.values())


class ProjectionError(RuntimeError):
    def __init__(self, report: PcgReport):
        super().__init__(f"pressure solve did not converge: {report}")
        self.report = report


# ---------------------------------------------------------------------------
# Drag


def drag_factor_cells(state: FlowState, params: SolverParams) -> np.ndarray:
    """Per-cell C_d * G: LAD drag on tree cells, the porosity fit
    a ((1-phi)/(phi+e))^b on building cells, zero in free air."""
    phi = state.porosity.phi
    g = np.zeros_like(phi)
    building = state.labels == int(CellLabel.BUILDING)
    if building.any():
        ratio = (1.0 - phi[building]) / (phi[building] + params.drag_eps)
        g[building] = params.cd_building * params.drag_a * ratio ** params.drag_b
    tree = state.labels == int(CellLabel.TREE)
    if tree.any():
        g[tree] = params.cd_tree * state.porosity.lad[tree]
    return g


def _avg_to_faces(c: np.ndarray, axis: int) -> np.ndarray:
    """Cell field -> face field along one axis (edge faces copy the cell)."""
    pad = [(0, 0)] * 3
    pad[axis] = (1, 1)
    padded = np.pad(c, pad, mode="edge")
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    return 0.5 * (padded[tuple(lo)] + padded[tuple(hi)])


def apply_drag(state: FlowState, params: SolverParams, dt: float) -> FlowState:
    """Forward-Euler drag step u <- max(0, 1 - dt Cd G |u|) u per face.

    Face factors average the two adjacent cells' Cd*G; the clamp at zero
    means fully opaque cells drive their velocity exactly to rest.
    """
    cdg = drag_factor_cells(state, params)
    if not cdg.any():
        return state
    vel = state.cell_velocity()
    speed = np.sqrt(np.sum(vel * vel, axis=-1))
    for axis, comp in ((0, "u"), (1, "v"), (2, "w")):
        if state.grid.is_2d and comp == "w":
            continue
        arr = getattr(state, comp)
        g_face = _avg_to_faces(cdg, axis)
        s_face = _avg_to_faces(speed, axis)
        arr *= np.maximum(0.0, 1.0 - dt * g_face * s_face)
    return state


# ---------------------------------------------------------------------------
# Diffusion


def _component_laplacian(arr: np.ndarray, grid: GridSpec) -> np.ndarray:
    out = np.zeros_like(arr)
    for axis, h in ((0, grid.dx), (1, grid.dy), (2, grid.dz)):
        if arr.shape[axis] == 1 or (grid.is_2d and axis == 2):
            continue
        pad = [(0, 0)] * 3
        pad[axis] = (1, 1)
        padded = np.pad(arr, pad, mode="edge")
        lo = [slice(None)] * 3
        mid = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -2)
        mid[axis] = slice(1, -1)
        hi[axis] = slice(2, None)
        out += (padded[tuple(lo)] - 2.0 * padded[tuple(mid)] + padded[tuple(hi)]) / h ** 2
    return out


def diffuse(state: FlowState, params: SolverParams, dt: float) -> FlowState:
    """Explicit momentum diffusion with effective viscosity nu + nu_t, the
    eddy part capped at the von Neumann stability bound."""
    cap = nu_stable(state.grid, dt) - params.nu
    if cap <= 0:
        warnings.warn(
            f"time step {dt} exceeds the molecular-diffusion stability bound; "
            "eddy viscosity fully suppressed this step", stacklevel=2)
        cap = 0.0
    nu_eff = params.nu + np.clip(state.nu_t, 0.0, cap)
    for axis, comp in ((0, "u"), (1, "v"), (2, "w")):
        if state.grid.is_2d and comp == "w":
            continue
        arr = getattr(state, comp)
        arr += dt * _avg_to_faces(nu_eff, axis) * _component_laplacian(arr, state.grid)
    return state


# ---------------------------------------------------------------------------
# Divergence and projection


def divergence(state: FlowState) -> np.ndarray:
    g = state.grid
    div = (state.u[1:] - state.u[:-1]) / g.dx \
        + (state.v[:, 1:] - state.v[:, :-1]) / g.dy
    if not g.is_2d:
        div = div + (state.w[:, :, 1:] - state.w[:, :, :-1]) / g.dz
    return div


def max_interior_divergence(state: FlowState) -> float:
    div = divergence(state)
    mask = interior_mask(state.labels)
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(div[mask])))


DIV_REDUCTION_TARGET = 10.0 ** -4.5  # per-step divergence drop, with margin


def default_projection_tol(preconditioner: Preconditioner | None) -> float:
    """Criterion threshold equivalent to roughly ||r||/||b|| ~ 1e-4,
    compensating for the preconditioner's scale. The projection adds a
    max-norm residual target on top, so this only needs to be in the
    right ballpark."""
    mscale = 1.0
    if preconditioner is not None and hasattr(preconditioner, "W"):
        mscale = float(np.mean(preconditioner.W.diagonal()))
    return 1e-8 * max(mscale, 1e-300)


def project(state: FlowState, psys: PressureSystem, dt: float,
            preconditioner: Preconditioner | None = None,
            tol: float | None = None,
            max_iter: int = 10_000) -> tuple[FlowState, PcgReport]:
    """Solve A p = -div(u)/dt over flow cells, then u <- u - dt grad(p).

    Outlet ghost pressure is 0; inlet/wall ghosts copy the interior value so
    those face gradients vanish and Dirichlet velocities stay untouched.
    """
    g = state.grid
    index = psys.index
    unknown = index >= 0
    div = divergence(state)
    b = np.zeros(psys.n)
    b[index[unknown]] = -div[unknown] / dt

    if tol is None:
        tol = default_projection_tol(preconditioner)
    # the post-projection divergence equals -dt * (residual), so a max-norm
    # residual target enforces the per-step divergence reduction exactly
    res_target = DIV_REDUCTION_TARGET * float(np.max(np.abs(b))) if b.any() else None
    # warm start from the previous step's pressure: the field changes little
    # between steps, cutting the iteration count several-fold
    x0 = np.zeros(psys.n)
    x0[index[unknown]] = state.p[unknown]
    if not x0.any():
        x0 = None
    x, report = pcg_solve(psys.A, b, preconditioner, tol=tol, max_iter=max_iter,
                          x0=x0, res_inf_target=res_target)
    if not report.converged:
        raise ProjectionError(report)

    p = np.zeros(g.shape)
    p[unknown] = x[index[unknown]]
    state.p = p

    outlet = state.labels == int(CellLabel.OUTLET)
    for axis, comp, h in ((0, "u", g.dx), (1, "v", g.dy), (2, "w", g.dz)):
        if g.is_2d and comp == "w":
            continue
        arr = getattr(state, comp)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        a_unk = unknown[lo]
        b_unk = unknown[hi]
        grad = np.zeros_like(p[lo])
        both = a_unk & b_unk
        grad[both] = (p[hi][both] - p[lo][both]) / h
        to_outlet = a_unk & outlet[hi]
        grad[to_outlet] = -p[lo][to_outlet] / h
        from_outlet = b_unk & outlet[lo]
        grad[from_outlet] = p[hi][from_outlet] / h
        inner = [slice(None)] * 3
        inner[axis] = slice(1, -1)
        arr[tuple(inner)] -= dt * grad
    return state, report


# ---------------------------------------------------------------------------
# Boundary conditions


def _face_adjacent_mask(cells: np.ndarray, axis: int) -> np.ndarray:
    """Face-shaped mask: true where either adjacent cell is flagged."""
    pad = [(0, 0)] * 3
    pad[axis] = (1, 1)
    padded = np.pad(cells, pad, mode="edge")
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    return padded[tuple(lo)] | padded[tuple(hi)]


def _domain_sides(grid: GridSpec):
    sides = [(0, 0), (0, grid.nx - 1), (1, 0), (1, grid.ny - 1)]
    if not grid.is_2d:
        sides += [(2, 0), (2, grid.nz - 1)]
    return sides


def apply_boundary_conditions(state: FlowState, profile: InletProfile,
                              params: SolverParams) -> FlowState:
    """Inlet faces take the profile velocity; outlet cells copy their
    interior neighbor (zero normal gradient); all faces touching solid-wall
    cells are zeroed. Inlet cells carry the configured k and omega."""
    g = state.grid
    labels = state.labels
    k_in, om_in = params.inlet_k_omega()
    dir_x, dir_y = profile.direction

    inlet_cells = labels == int(CellLabel.INLET)
    wall_cells = labels == int(CellLabel.SOLID_WALL)
    outlet_cells = labels == int(CellLabel.OUTLET)

    # outlet: copy scalars and velocity from the adjacent interior slab
    for axis, pos in _domain_sides(g):
        cell_sl = [slice(None)] * 3
        cell_sl[axis] = pos
        cell_sl = tuple(cell_sl)
        inner_pos = pos + 1 if pos == 0 else pos - 1
        inner_sl = [slice(None)] * 3
        inner_sl[axis] = inner_pos
        inner_sl = tuple(inner_sl)
        out2d = outlet_cells[cell_sl]
        if not out2d.any():
            continue
        for name in ("k", "omega", "nu_t", "p"):
            arr = getattr(state, name)
            arr[cell_sl][out2d] = arr[inner_sl][out2d]
        for caxis, comp in ((0, "u"), (1, "v"), (2, "w")):
            if g.is_2d and comp == "w":
                continue
            arr = getattr(state, comp)
            if caxis == axis:
                # normal component: outer face copies the inner face
                outer = pos + 1 if pos > 0 else 0
                src = pos if pos > 0 else 1
                f_out = [slice(None)] * 3
                f_src = [slice(None)] * 3
                f_out[axis] = outer
                f_src[axis] = src
                arr[tuple(f_out)][out2d] = arr[tuple(f_src)][out2d]
            else:
                # tangential faces of the outlet slab copy the neighbor slab
                m = _face_adjacent_mask(outlet_cells, caxis)[cell_sl]
                arr[cell_sl][m] = arr[inner_sl][m]

    # inlet scalars
    if inlet_cells.any():
        state.k[inlet_cells] = k_in
        state.omega[inlet_cells] = om_in
        state.nu_t[inlet_cells] = k_in / om_in

    # inlet velocity: all faces of inlet cells take the profile value
    uz = profile.speed_at(g.origin[2] + (np.arange(g.nz) + 0.5) * g.dz)
    if inlet_cells.any():
        m_u = _face_adjacent_mask(inlet_cells, 0)
        state.u[m_u] = (np.ones(state.u.shape) * uz[None, None, :] * dir_x)[m_u]
        m_v = _face_adjacent_mask(inlet_cells, 1)
        state.v[m_v] = (np.ones(state.v.shape) * uz[None, None, :] * dir_y)[m_v]
        if not g.is_2d:
            m_w = _face_adjacent_mask(inlet_cells, 2)
            state.w[m_w] = 0.0

    # solid walls win last: no-slip on every touching face
    if wall_cells.any():
        state.u[_face_adjacent_mask(wall_cells, 0)] = 0.0
        state.v[_face_adjacent_mask(wall_cells, 1)] = 0.0
        if not g.is_2d:
            state.w[_face_adjacent_mask(wall_cells, 2)] = 0.0
    return state


# ---------------------------------------------------------------------------
# Full step


def step(state: FlowState, params: SolverParams, psys: PressureSystem,
         preconditioner: Preconditioner | None, profile: InletProfile,
         advector: Advector | None = None,
         pcg_tol: float | None = None) -> StepReport:
    """One time-split step; returns per-stage timings and solver stats."""
    report = StepReport()
    dt = params.dt
    if dt == 0.0:
        return report
    adv = advector or Advector(state.grid)

    t = time.perf_counter()
    if params.turbulence:
        k_new = adv.upwind_scalar(state, state.k, dt)
        om_new = adv.upwind_scalar(state, state.omega, dt)
    u, v, w = adv.advect_velocity(state, dt)
    state.u, state.v, state.w = u, v, w
    if params.turbulence:
        state.k, state.omega = k_new, om_new
    report.timings["advect"] = time.perf_counter() - t

    t = time.perf_counter()
    diffuse(state, params, dt)
    report.timings["diffuse"] = time.perf_counter() - t

    t = time.perf_counter()
    apply_drag(state, params, dt)
    report.timings["drag"] = time.perf_counter() - t

    t = time.perf_counter()
    apply_boundary_conditions(state, profile, params)
    report.timings["boundary"] = time.perf_counter() - t

    t = time.perf_counter()
    report.div_before = max_interior_divergence(state)
    _, pcg_report = project(state, psys, dt, preconditioner, tol=pcg_tol)
    report.div_after = max_interior_divergence(state)
    report.pcg = pcg_report
    report.timings["project"] = time.perf_counter() - t

    t = time.perf_counter()
    if params.turbulence:
        update_turbulence(state, params, dt)
    report.timings["turbulence"] = time.perf_counter() - t

    t = time.perf_counter()
    apply_boundary_conditions(state, profile, params)
    report.timings["boundary2"] = time.perf_counter() - t

    speed_max = max(float(np.max(np.abs(state.u))), float(np.max(np.abs(state.v))),
                    float(np.max(np.abs(state.w))), 1e-300)
    report.cfl = speed_max * dt / min(state.grid.dx, state.grid.dy, state.grid.dz)
    state.time += dt
    state.step_count += 1
    return report


def make_initial_state(grid: GridSpec, labels: np.ndarray, porosity,
                       params: SolverParams, profile: InletProfile,
                       mode: str = "inflow") -> FlowState:
    """Fresh state: at rest, or pre-filled with the inlet profile so the
    startup transient is short."""
    k_in, om_in = params.inlet_k_omega()
    state = FlowState.zeros(grid, labels, porosity, k0=k_in, omega0=om_in)
    if not params.turbulence:
        state.nu_t[:] = 0.0
    if mode == "inflow":
        uz = profile.speed_at(grid.origin[2] + (np.arange(grid.nz) + 0.5) * grid.dz)
        dir_x, dir_y = profile.direction
        state.u[:] = uz[None, None, :] * dir_x
        state.v[:] = uz[None, None, :] * dir_y
    elif mode != "rest":
        raise ValueError(f"unknown init mode {mode!r}")
    apply_boundary_conditions(state, profile, params)
    return state


# ---------------------------------------------------------------------------
# Diagnostics on the solution


def trace_streamlines(state: FlowState, seeds, step_len: float,
                      max_steps: int = 2000,
                      min_speed: float = 1e-6) -> list[np.ndarray]:
    """Midpoint (RK2) streamline integration of the instantaneous velocity.

    A polyline ends on domain exit, after max_steps, or where the local
    speed drops below min_speed. Seeds outside the domain yield empty
    polylines.
    """
    g = state.grid
    adv = Advector(g)
    lo, hi = g.extent()
    spacing = g.spacing
    origin = np.asarray(g.origin)

    def vel(points: np.ndarray) -> np.ndarray:
        c = (points - origin) / spacing
        us, vs, ws = adv.velocity_at(state, c[:, 0], c[:, 1], c[:, 2])
        return np.stack([us, vs, ws], axis=1)

    polylines: list[np.ndarray] = []
    for seed in np.atleast_2d(np.asarray(seeds, dtype=float)):
        if np.any(seed < lo) or np.any(seed > hi):
            polylines.append(np.empty((0, 3)))
            continue
        pts = [seed.copy()]
        p = seed.copy()
        for _ in range(max_steps):
            v1 = vel(p[None, :])[0]
            s1 = np.linalg.norm(v1)
            if s1 < min_speed:
                break
            mid = p + 0.5 * step_len * v1 / s1
            if np.any(mid < lo) or np.any(mid > hi):
                break
            v2 = vel(mid[None, :])[0]
            s2 = np.linalg.norm(v2)
            if s2 < min_speed:
                break
            p = p + step_len * v2 / s2
            if np.any(p < lo) or np.any(p > hi):
                break
            pts.append(p.copy())
        polylines.append(np.array(pts))
    return polylines


def region_average_speed(state: FlowState, box_lo, box_hi,
                         z_band: tuple[float, float] | None = None) -> float:
    """Mean |u| over centers of Air cells inside an axis-aligned box."""
    g = state.grid
    lo = np.asarray(box_lo, dtype=float)
    hi = np.asarray(box_hi, dtype=float)
    centers = g.cell_centers()
    mask = np.all((centers >= lo) & (centers <= hi), axis=-1)
    if z_band is not None:
        z = centers[..., 2]
        mask &= (z >= z_band[0]) & (z <= z_band[1])
    mask &= state.labels == int(CellLabel.AIR)
    if not mask.any():
        raise ValueError("region contains no air cells")
    return float(np.mean(state.speed()[mask]))
