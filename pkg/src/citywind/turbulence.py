"""Two-equation k-omega closure: transport sources, stress-limited eddy
viscosity, and inlet turbulence levels.

Time integration is forward-difference with the quadratic sinks folded into
the denominator (Patankar form), which keeps k and omega positive at any
step size; both fields are floored as a last resort.
"""
from __future__ import annotations

import numpy as np

from .grid import FlowState, GridSpec

K_FLOOR = 1e-12
OMEGA_FLOOR = 1e-8


def nu_stable(grid: GridSpec, dt: float) -> float:
    """Largest viscosity an explicit diffusion step tolerates (von Neumann)."""
    s = 1.0 / grid.dx ** 2 + 1.0 / grid.dy ** 2
    if not grid.is_2d:
        s += 1.0 / grid.dz ** 2
    return 1.0 / (2.0 * dt * s)


def inlet_turbulence(intensity: float, u_ref: float, length_scale: float,
                     c_mu: float = 0.09) -> tuple[float, float]:
    """Inlet k and omega from turbulence intensity, reference speed and
    length scale: k = 1.5 (I U)^2, omega = C_mu^-1/4 sqrt(k) / L."""
    k = 1.5 * (intensity * u_ref) ** 2
    k = max(k, K_FLOOR)
    om = c_mu ** (-0.25) * np.sqrt(k) / length_scale
    return k, max(om, OMEGA_FLOOR)


def _pad_laplacian(f: np.ndarray, grid: GridSpec) -> np.ndarray:
    """7-point Laplacian with replicated edges (zero normal gradient)."""
    out = np.zeros_like(f)
    for axis, h in ((0, grid.dx), (1, grid.dy), (2, grid.dz)):
        n = f.shape[axis]
        if n == 1:
            continue
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        mid = [slice(None)] * 3
        lo[axis] = slice(0, -2)
        mid[axis] = slice(1, -1)
        hi[axis] = slice(2, None)
        inner = [slice(None)] * 3
        inner[axis] = slice(1, -1)
        core = (f[tuple(lo)] - 2.0 * f[tuple(mid)] + f[tuple(hi)]) / h ** 2
        edge0 = [slice(None)] * 3
        edge0[axis] = slice(0, 1)
        edge1 = [slice(None)] * 3
        edge1[axis] = slice(1, 2)
        edgeN = [slice(None)] * 3
        edgeN[axis] = slice(n - 1, n)
        edgeN1 = [slice(None)] * 3
        edgeN1[axis] = slice(n - 2, n - 1)
        out[tuple(inner)] += core
        out[tuple(edge0)] += (f[tuple(edge1)] - f[tuple(edge0)]) / h ** 2
        out[tuple(edgeN)] += (f[tuple(edgeN1)] - f[tuple(edgeN)]) / h ** 2
    return out


def strain_rate_sq(state: FlowState) -> np.ndarray:
    """|S|^2 = S_ij S_ij at cell centers. Diagonal entries come from exact
    face differences; cross terms use centered gradients of the
    cell-averaged velocity."""
    g = state.grid
    dudx = (state.u[1:] - state.u[:-1]) / g.dx
    dvdy = (state.v[:, 1:] - state.v[:, :-1]) / g.dy
    dwdz = (state.w[:, :, 1:] - state.w[:, :, :-1]) / g.dz

    vel = state.cell_velocity()
    def grad(fc, axis, h):
        if fc.shape[axis] == 1:
            return np.zeros_like(fc)
        return np.gradient(fc, h, axis=axis)

    dudy = grad(vel[..., 0], 1, g.dy)
    dudz = grad(vel[..., 0], 2, g.dz)
    dvdx = grad(vel[..., 1], 0, g.dx)
    dvdz = grad(vel[..., 1], 2, g.dz)
    dwdx = grad(vel[..., 2], 0, g.dx)
    dwdy = grad(vel[..., 2], 1, g.dy)

    s2 = dudx ** 2 + dvdy ** 2 + dwdz ** 2
    s2 = s2 + 0.5 * ((dudy + dvdx) ** 2 + (dudz + dwdx) ** 2 + (dvdz + dwdy) ** 2)
    return s2


def eddy_viscosity(k: np.ndarray, omega: np.ndarray, s2: np.ndarray,
                   c_mu: float, c_lim: float) -> np.ndarray:
    """nu_t = k / max(omega, C_lim |S| / (C_mu / 2))."""
    omega_tilde = np.maximum(omega, c_lim * np.sqrt(s2) / (c_mu / 2.0))
    return k / np.maximum(omega_tilde, OMEGA_FLOOR)


def update_turbulence(state: FlowState, params, dt: float) -> FlowState:
    """Advance k and omega by one step (sources, sinks, diffusion) and
    refresh nu_t. Advection of k and omega happens in the advection stage.

    Production P_k = 2 nu_t |S|^2 feeds k; omega production is 2 alpha |S|^2.
    Sinks C_mu k omega and beta omega^2 are integrated with the implicit
    denominator so both fields stay positive.
    """
    g = state.grid
    s2 = strain_rate_sq(state)
    nu_cap = max(nu_stable(g, dt) - params.nu, 0.0)

    p_k = 2.0 * state.nu_t * s2
    diff_k_coeff = params.nu + np.minimum(params.sigma_star * state.nu_t, nu_cap)
    diff_w_coeff = params.nu + np.minimum(params.sigma * state.nu_t, nu_cap)
    lap_k = _pad_laplacian(state.k, g)
    lap_w = _pad_laplacian(state.omega, g)

    k_new = (state.k + dt * (p_k + diff_k_coeff * lap_k)) \
        / (1.0 + dt * params.c_mu * state.omega)
    w_new = (state.omega + dt * (2.0 * params.alpha * s2 + diff_w_coeff * lap_w)) \
        / (1.0 + dt * params.beta * state.omega)

    for name, arr in (("k", k_new), ("omega", w_new)):
        if not np.all(np.isfinite(arr)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
            raise FloatingPointError(
                f"turbulence update produced non-finite {name} at cell {bad}")

    state.k = np.maximum(k_new, K_FLOOR)
    state.omega = np.maximum(w_new, OMEGA_FLOOR)
    state.nu_t = eddy_viscosity(state.k, state.omega, s2, params.c_mu, params.c_lim)
    return state
