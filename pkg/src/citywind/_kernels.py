"""Optional numba kernels for the two hot paths: CSR matvec (PCG) and
trilinear gathers (semi-Lagrangian advection). Everything falls back to
numpy/scipy when numba is unavailable. Thread count follows the
CITYWIND_THREADS environment variable."""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit

    _threads = os.environ.get("CITYWIND_THREADS")
    if _threads:
        numba.set_num_threads(max(1, int(_threads)))
    HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is normally present
    HAVE_NUMBA = False


if HAVE_NUMBA:

    @njit(cache=True)
    def _trilinear(flat, sy, sz, base, dxs, dys, dzs, tx, ty, tz, out, mn, mx,
                   want_minmax):
        n = base.shape[0]
        for i in range(n):
            b = base[i]
            c000 = flat[b]
            c100 = flat[b + dxs]
            c010 = flat[b + dys]
            c110 = flat[b + dxs + dys]
            c001 = flat[b + dzs]
            c101 = flat[b + dxs + dzs]
            c011 = flat[b + dys + dzs]
            c111 = flat[b + dxs + dys + dzs]
            a = tx[i]
            bb = ty[i]
            c = tz[i]
            c00 = c000 * (1 - a) + c100 * a
            c10 = c010 * (1 - a) + c110 * a
            c01 = c001 * (1 - a) + c101 * a
            c11 = c011 * (1 - a) + c111 * a
            c0 = c00 * (1 - bb) + c10 * bb
            c1 = c01 * (1 - bb) + c11 * bb
            out[i] = c0 * (1 - c) + c1 * c
            if want_minmax:
                lo = c000
                hi = c000
                for v in (c100, c010, c110, c001, c101, c011, c111):
                    if v < lo:
                        lo = v
                    if v > hi:
                        hi = v
                mn[i] = lo
                mx[i] = hi


class FastCsr:
    """Thin matvec wrapper caching the CSR arrays of a scipy matrix."""

    def __init__(self, A):
        A = A.tocsr()
        self.A = A
        self.indptr = A.indptr
        self.indices = A.indices
        self.data = A.data
        self.n = A.shape[0]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x


def trilinear_gather(flat, sy, sz, base, dxs, dys, dzs, tx, ty, tz,
                     want_minmax: bool):
    """Numba path used by the advector; caller handles the numpy fallback."""
    out = np.empty(base.shape[0])
    if want_minmax:
        mn = np.empty_like(out)
        mx = np.empty_like(out)
        _trilinear(flat, sy, sz, base, dxs, dys, dzs, tx, ty, tz, out, mn, mx, True)
        return out, mn, mx
    _trilinear(flat, sy, sz, base, dxs, dys, dzs, tx, ty, tz, out, out, out, False)
    return out
