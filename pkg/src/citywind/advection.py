"""Semi-Lagrangian advection: MacCormack for momentum, upwind for scalars.

All sampling is trilinear with indices clamped to the domain, so backtraces
that exit the grid read the nearest boundary value. The MacCormack corrector
is limited to the min/max of the trilinear stencil at the backtraced point,
which keeps the scheme unconditionally stable and overshoot-free.
"""
from __future__ import annotations

import numpy as np

from ._kernels import HAVE_NUMBA, trilinear_gather
from .grid import FlowState, GridSpec

# staggered sample positions, in cell units relative to the cell corner
_OFFSETS = {
    "u": (0.0, 0.5, 0.5),
    "v": (0.5, 0.0, 0.5),
    "w": (0.5, 0.5, 0.0),
    "c": (0.5, 0.5, 0.5),
}


def _axis_positions(grid: GridSpec, comp: str):
    nx, ny, nz = grid.shape
    shape = {"u": (nx + 1, ny, nz), "v": (nx, ny + 1, nz),
             "w": (nx, ny, nz + 1), "c": (nx, ny, nz)}[comp]
    off = _OFFSETS[comp]
    return tuple(np.arange(n) + o for n, o in zip(shape, off))


class Advector:
    """Caches per-component sample positions (in cell units) for one grid."""

    def __init__(self, grid: GridSpec):
        self.grid = grid
        self.pos = {}
        for comp in ("u", "v", "w", "c"):
            x, y, z = _axis_positions(grid, comp)
            self.pos[comp] = (x[:, None, None], y[None, :, None], z[None, None, :])

    # -- trilinear sampling ------------------------------------------------

    def _fractional(self, comp: str, X, Y, Z):
        off = _OFFSETS[comp]
        return X - off[0], Y - off[1], Z - off[2]

    @staticmethod
    def _gather(arr: np.ndarray, fx, fy, fz, want_minmax: bool = False):
        fx, fy, fz = np.broadcast_arrays(fx, fy, fz)
        nx, ny, nz = arr.shape
        i0 = np.clip(np.floor(fx).astype(np.int64), 0, max(nx - 2, 0))
        j0 = np.clip(np.floor(fy).astype(np.int64), 0, max(ny - 2, 0))
        k0 = np.clip(np.floor(fz).astype(np.int64), 0, max(nz - 2, 0))
        tx = np.clip(fx - i0, 0.0, 1.0)
        ty = np.clip(fy - j0, 0.0, 1.0)
        tz = np.clip(fz - k0, 0.0, 1.0)

        flat = np.ascontiguousarray(arr).ravel()
        sy, sz = ny * nz, nz
        shape = fx.shape
        base = (i0 * sy + j0 * sz + k0).ravel()
        # i0 <= n-2 already, so the +1 neighbor never leaves the array;
        # size-1 axes use stride 0 (interpolation degenerates correctly)
        dxs = sy if nx > 1 else 0
        dys = sz if ny > 1 else 0
        dzs = 1 if nz > 1 else 0

        if HAVE_NUMBA:
            res = trilinear_gather(flat, sy, sz, base, dxs, dys, dzs,
                                   tx.ravel(), ty.ravel(), tz.ravel(), want_minmax)
            if want_minmax:
                val, mn, mx = res
                return val.reshape(shape), mn.reshape(shape), mx.reshape(shape)
            return res.reshape(shape)

        def at(off):
            return flat.take(base + off if off else base).reshape(shape)

        c000 = at(0)
        c100 = at(dxs)
        c010 = at(dys)
        c110 = at(dxs + dys)
        c001 = at(dzs)
        c101 = at(dxs + dzs)
        c011 = at(dys + dzs)
        c111 = at(dxs + dys + dzs)

        c00 = c000 * (1 - tx) + c100 * tx
        c10 = c010 * (1 - tx) + c110 * tx
        c01 = c001 * (1 - tx) + c101 * tx
        c11 = c011 * (1 - tx) + c111 * tx
        c0 = c00 * (1 - ty) + c10 * ty
        c1 = c01 * (1 - ty) + c11 * ty
        val = c0 * (1 - tz) + c1 * tz
        if not want_minmax:
            return val
        stack = (c000, c100, c010, c110, c001, c101, c011, c111)
        mn = np.minimum.reduce(stack)
        mx = np.maximum.reduce(stack)
        return val, mn, mx

    def sample(self, arr: np.ndarray, comp: str, X, Y, Z, want_minmax=False):
        fx, fy, fz = self._fractional(comp, X, Y, Z)
        return self._gather(arr, fx, fy, fz, want_minmax)

    def velocity_at(self, state: FlowState, X, Y, Z):
        us = self.sample(state.u, "u", X, Y, Z)
        vs = self.sample(state.v, "v", X, Y, Z)
        ws = self.sample(state.w, "w", X, Y, Z)
        return us, vs, ws

    # -- schemes -------------------------------------------------------------

    def semi_lagrangian(self, state: FlowState, arr: np.ndarray, comp: str,
                        dt: float, want_minmax: bool = False):
        g = self.grid
        X, Y, Z = self.pos[comp]
        us, vs, ws = self.velocity_at(state, X, Y, Z)
        bx = X - dt * us / g.dx
        by = Y - dt * vs / g.dy
        bz = Z - dt * ws / g.dz
        return self.sample(arr, comp, bx, by, bz, want_minmax)

    def maccormack(self, state: FlowState, arr: np.ndarray, comp: str,
                   dt: float) -> np.ndarray:
        """Predictor-corrector semi-Lagrangian update with stencil clamping."""
        g = self.grid
        X, Y, Z = self.pos[comp]
        us, vs, ws = self.velocity_at(state, X, Y, Z)
        bx = X - dt * us / g.dx
        by = Y - dt * vs / g.dy
        bz = Z - dt * ws / g.dz
        ahead, mn, mx = self.sample(arr, comp, bx, by, bz, want_minmax=True)
        # reverse advection of the prediction recovers an estimate of arr;
        # half the defect corrects the first-order error
        fx = X + dt * us / g.dx
        fy = Y + dt * vs / g.dy
        fz = Z + dt * ws / g.dz
        back = self.sample(ahead, comp, fx, fy, fz)
        corrected = ahead + 0.5 * (arr - back)
        return np.clip(corrected, mn, mx)

    def advect_velocity(self, state: FlowState, dt: float):
        """MacCormack-advect all velocity components; returns (u, v, w)."""
        u = self.maccormack(state, state.u, "u", dt)
        v = self.maccormack(state, state.v, "v", dt)
        if self.grid.is_2d:
            w = state.w.copy()
        else:
            w = self.maccormack(state, state.w, "w", dt)
        return u, v, w

    def upwind_scalar(self, state: FlowState, field: np.ndarray, dt: float) -> np.ndarray:
        """First-order upwind advection of a cell-centered scalar."""
        g = self.grid
        vel = state.cell_velocity()
        out = field.copy()
        for axis, h in ((0, g.dx), (1, g.dy), (2, g.dz)):
            if g.shape[axis] == 1:
                continue
            a = vel[..., axis]
            fwd = np.zeros_like(field)
            bwd = np.zeros_like(field)
            sl_lo = [slice(None)] * 3
            sl_hi = [slice(None)] * 3
            sl_lo[axis] = slice(0, -1)
            sl_hi[axis] = slice(1, None)
            diff = (field[tuple(sl_hi)] - field[tuple(sl_lo)]) / h
            bwd[tuple(sl_hi)] = diff   # (f_i - f_{i-1}) / h at cell i
            fwd[tuple(sl_lo)] = diff   # (f_{i+1} - f_i) / h at cell i
            out -= dt * (np.maximum(a, 0.0) * bwd + np.minimum(a, 0.0) * fwd)
        return out
