"""Pressure Poisson assembly, preconditioners, PCG, and condition numbers.

The pressure matrix depends only on the grid and the boundary/wall labels,
never on porosity or drag, so it and its approximate-inverse preconditioner
are precomputed once and survive arbitrary interior edits. Matrices are
scipy CSR; all preconditioner algebra here is explicit.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._kernels import FastCsr
from .grid import CellLabel, GridSpec, interior_mask

_NEIGHBOR_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


class SingularSystemError(ValueError):
    """Pressure system has the all-constants nullspace (no outlet anywhere)."""


@dataclass
class PcgReport:
    iterations: int
    converged: bool
    criterion: float


@dataclass
class PressureSystem:
    """Assembled Poisson operator plus the cell <-> unknown index maps."""

    A: sp.csr_matrix
    index: np.ndarray  # grid-shaped; unknown number or -1
    grid: GridSpec

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.A.indptr, self.A.indices, self.A.data):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _flat_index_f(grid: GridSpec) -> np.ndarray:
    return np.arange(grid.n_cells).reshape(grid.shape, order="F")


def build_pressure_matrix(grid: GridSpec, labels: np.ndarray,
                          pin_if_singular: bool = False) -> PressureSystem:
    """7-point (5-point in 2D) Laplacian (negated, SPD) over flow cells.

    Outlet neighbors act as Dirichlet p = 0 (off-diagonal dropped, diagonal
    kept); inlet and solid-wall neighbors act as Neumann ghosts (off-diagonal
    dropped, diagonal reduced). Entries carry the physical 1/h^2 weights.
    Interior Building/Tree cells are ordinary unknowns; only labels in
    {Inlet, Outlet, SolidWall} shape the matrix.
    """
    unknown = interior_mask(labels)
    n = int(unknown.sum())
    if n == 0:
        raise ValueError("no flow cells to solve for")
    index = np.full(grid.shape, -1, dtype=np.int64)
    index[unknown] = np.argsort(np.argsort(_flat_index_f(grid)[unknown]))

    spacing = grid.spacing
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    diag = np.zeros(n)
    n_dirichlet = 0

    for di, dj, dk in _NEIGHBOR_OFFSETS:
        if grid.is_2d and dk != 0:
            continue
        axis = 0 if di else (1 if dj else 2)
        w = 1.0 / spacing[axis] ** 2
        step = (di, dj, dk)[axis]
        src = [slice(None)] * 3
        dst = [slice(None)] * 3
        if step > 0:
            src[axis] = slice(0, grid.shape[axis] - 1)
            dst[axis] = slice(1, grid.shape[axis])
        else:
            src[axis] = slice(1, grid.shape[axis])
            dst[axis] = slice(0, grid.shape[axis] - 1)
        src, dst = tuple(src), tuple(dst)

        a_idx = index[src]
        b_idx = index[dst]
        a_lab = labels[src]
        b_lab = labels[dst]
        a_unknown = a_idx >= 0

        pair = a_unknown & (b_idx >= 0)
        rows.append(a_idx[pair])
        cols.append(b_idx[pair])
        vals.append(np.full(int(pair.sum()), -w))
        np.add.at(diag, a_idx[pair], w)

        outlet = a_unknown & (b_lab == int(CellLabel.OUTLET))
        np.add.at(diag, a_idx[outlet], w)
        n_dirichlet += int(outlet.sum())
        # inlet / solid wall neighbors: Neumann ghost, nothing added

    if n_dirichlet == 0:
        if not pin_if_singular:
            raise SingularSystemError(
                "no outlet cells: pressure defined only up to a constant")
        diag[0] += 1.0 / grid.dx ** 2  # ground one cell, keeps the operator SPD

    all_rows = np.concatenate(rows + [np.arange(n)])
    all_cols = np.concatenate(cols + [np.arange(n)])
    all_vals = np.concatenate(vals + [diag])
    A = sp.csr_matrix((all_vals, (all_rows, all_cols)), shape=(n, n))
    A.sum_duplicates()
    A.sort_indices()
    return PressureSystem(A=A, index=index, grid=grid)


def check_symmetric(A: sp.spmatrix, rtol: float = 1e-12) -> bool:
    d = abs(A - A.T)
    scale = max(abs(A).max(), 1e-300)
    return d.max() <= rtol * scale


# ---------------------------------------------------------------------------
# Preconditioners


class Preconditioner:
    """apply(r) -> M^-1 r; apply_m(x) -> M x (the preconditioner's inverse),
    used for condition-number estimation."""

    name = "identity"

    def apply(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_m(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class IdentityPreconditioner(Preconditioner):
    def apply(self, r):
        return r

    def apply_m(self, x):
        return x


class MatrixPreconditioner(Preconditioner):
    """Explicit sparse M^-1 applied as a single matrix-vector product."""

    def __init__(self, W: sp.spmatrix, name: str = "matrix"):
        self.W = W.tocsr()
        self.name = name
        self._lu = None
        self._fast = FastCsr(self.W)

    def apply(self, r):
        return self._fast.matvec(r)

    def apply_m(self, x):
        if self._lu is None:
            self._lu = spla.splu(self.W.tocsc())
        return self._lu.solve(x)


class FactorPreconditioner(Preconditioner):
    """M = G G^T with sparse triangular G; apply() runs two triangular
    solves, which is inherently serial per application."""

    def __init__(self, G: sp.spmatrix, name: str):
        self.G = G.tocsr()
        self.name = name
        self._lu = spla.splu(G.tocsc(), permc_spec="NATURAL")

    def apply(self, r):
        return self._lu.solve(self._lu.solve(r), trans="T")

    def apply_m(self, x):
        return self.G @ (self.G.T @ x)


def build_jacobi(A: sp.spmatrix) -> MatrixPreconditioner:
    d = A.diagonal()
    if np.any(d == 0):
        raise ValueError("zero diagonal entry")
    return MatrixPreconditioner(sp.diags(1.0 / d).tocsr(), name="jacobi")


def build_ai_preconditioner(A: sp.spmatrix, omega: float = 1.65,
                            order: int = 1, truncate: bool = True) -> MatrixPreconditioner:
    """Approximate inverse M^-1 = K^T K from the truncated Neumann series of
    the SSOR splitting; applied as one sparse matrix-vector product.

    K = sqrt(2 - omega) * Dbar^-1/2 (I - L Dbar^-1 [+ (L Dbar^-1)^2]) with
    Dbar = D / omega. With ``truncate`` the product is masked back to A's
    sparsity pattern; the full product is kept otherwise.
    """
    if not 0.0 < omega < 2.0:
        raise ValueError(f"omega must lie in (0, 2), got {omega}")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    d = A.diagonal()
    if np.any(d <= 0):
        raise ValueError("AI preconditioner requires a positive diagonal")
    A = A.tocsr()
    dbar_inv = omega / d
    L = sp.tril(A, k=-1, format="csr")
    LD = L @ sp.diags(dbar_inv)
    eye = sp.identity(A.shape[0], format="csr")
    inner = eye - LD
    if order == 2:
        inner = inner + LD @ LD
    K = sp.diags(np.sqrt((2.0 - omega) * dbar_inv)) @ inner
    W = (K.T @ K).tocsr()
    if truncate:
        pattern = A.copy()
        pattern.data = np.ones_like(pattern.data)
        W = W.multiply(pattern).tocsr()
    W = ((W + W.T) * 0.5).tocsr()  # kill round-off asymmetry exactly
    return MatrixPreconditioner(W, name=f"ai{order}")


# Relaxation weight for the modified incomplete factorization: the dropped
# fill moved onto the diagonal is scaled by this. Full modification (1.0)
# drives near-Neumann pivots towards zero; 0.93 reproduces the reference
# benchmark conditioning.
MIC_RELAXATION = 0.93


def _ic_factor(A: sp.spmatrix, tau: float) -> sp.csr_matrix:
    """Incomplete Cholesky factor G (lower triangular, A's lower pattern).

    Left-looking LDL^T restricted to the pattern; fill dropped outside the
    pattern is moved onto the diagonals of its row and column scaled by
    ``tau`` (0 = plain IC(0), 1 = fully modified row-sum-preserving MIC).
    """
    n = A.shape[0]
    Acsc = sp.tril(A, format="csc")
    diag = A.diagonal().astype(float).copy()
    cols: list[dict[int, float]] = []
    indptr, indices, data = Acsc.indptr, Acsc.indices, Acsc.data
    for k in range(n):
        sel = slice(indptr[k], indptr[k + 1])
        cols.append({int(r): float(v) for r, v in zip(indices[sel], data[sel]) if r > k})

    for k in range(n):
        dk = diag[k]
        if dk <= 0:
            raise ValueError(f"incomplete Cholesky breakdown at row {k}: pivot {dk:.3e}")
        items = sorted(cols[k].items())
        for idx_a, (r, vr) in enumerate(items):
            diag[r] -= vr * vr / dk
            for s, vs in items[idx_a + 1:]:
                upd = vr * vs / dk
                # fill lands at (s, r) with s > r
                if s in cols[r]:
                    cols[r][s] -= upd
                elif tau > 0.0:
                    diag[r] -= tau * upd
                    diag[s] -= tau * upd

    gr, gc, gv = [], [], []
    for k in range(n):
        s = np.sqrt(diag[k])
        gr.append(k); gc.append(k); gv.append(s)
        for r, v in cols[k].items():
            gr.append(r); gc.append(k); gv.append(v / s)
    return sp.csr_matrix((gv, (gr, gc)), shape=A.shape)


def build_reference_preconditioner(A: sp.spmatrix, kind: str, omega: float = 1.0,
                                   mic_tau: float = MIC_RELAXATION) -> FactorPreconditioner:
    """SSOR / IC / MIC comparison preconditioners (benchmark-scale only).

    These need forward/backward triangular substitutions per application,
    so they are restricted to n <= 1e5.
    """
    kind = kind.lower()
    if A.shape[0] > 100_000:
        raise ValueError("reference preconditioners are benchmark-only (n <= 1e5)")
    if kind == "ssor":
        d = A.diagonal()
        L = sp.tril(A, k=-1, format="csr")
        # M = (Dbar + L) [ (2-omega) Dbar ]^-1 (Dbar + L)^T, Dbar = D/omega
        G = (sp.diags(d / omega) + L) @ sp.diags(np.sqrt(omega / ((2 - omega) * d)))
        return FactorPreconditioner(G.tocsr(), name="ssor")
    if kind == "ic":
        return FactorPreconditioner(_ic_factor(A, 0.0), name="ic")
    if kind == "mic":
        return FactorPreconditioner(_ic_factor(A, mic_tau), name="mic")
    raise ValueError(f"unknown reference preconditioner kind {kind!r}")


# ---------------------------------------------------------------------------
# PCG


def pcg_solve(A: sp.spmatrix, b: np.ndarray,
              preconditioner: Preconditioner | None = None,
              tol: float = 1e-5, max_iter: int = 10_000,
              x0: np.ndarray | None = None,
              res_inf_target: float | None = None) -> tuple[np.ndarray, PcgReport]:
    """Preconditioned conjugate gradients with the stopping rule
    (M^-1 r) . r / ||b||^2 < tol.

    ``res_inf_target`` adds a max-norm residual requirement on top of the
    criterion (used by the projection to guarantee its divergence budget).
    A non-positive criterion (indefinite preconditioner) or a non-positive
    curvature p.Ap ends the solve as non-converged rather than silently
    accepting garbage.
    """
    M = preconditioner or IdentityPreconditioner()
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side contains non-finite entries")
    b2 = float(b @ b)
    if b2 == 0.0:
        return np.zeros_like(b), PcgReport(0, True, 0.0)

    def done(r, crit):
        if not 0.0 <= crit < tol:
            return False
        if res_inf_target is not None:
            return float(np.max(np.abs(r))) <= res_inf_target
        return True

    fast_a = FastCsr(A) if sp.issparse(A) else None
    amul = fast_a.matvec if fast_a is not None else (lambda v: A @ v)
    x = np.zeros_like(b) if x0 is None else x0.astype(float).copy()
    r = b - amul(x) if x0 is not None else b.copy()
    z = M.apply(r)
    rz = float(r @ z)
    crit = rz / b2
    if done(r, crit):
        return x, PcgReport(0, True, crit)
    if rz < 0.0:
        return x, PcgReport(0, False, crit)
    p = z.copy()
    for it in range(1, max_iter + 1):
        Ap = amul(p)
        pAp = float(p @ Ap)
        if pAp <= 0:
            return x, PcgReport(it - 1, False, crit)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = M.apply(r)
        rz_new = float(r @ z)
        crit = rz_new / b2
        if done(r, crit):
            return x, PcgReport(it, True, crit)
        if rz_new < 0.0:
            return x, PcgReport(it, False, crit)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, PcgReport(max_iter, False, crit)


# ---------------------------------------------------------------------------
# Condition-number estimation


def _lanczos_extreme(op, ip_apply, n: int, seed: int = 0, max_iter: int = 200,
                     rtol: float = 1e-9) -> tuple[float, bool]:
    """Largest eigenvalue of an operator self-adjoint w.r.t. the inner
    product <x, y> = x . ip_apply(y), by Lanczos with full
    reorthogonalization. Returns (value, converged)."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    mv = ip_apply(v)
    beta = float(np.sqrt(v @ mv))
    # ip_apply may return its argument (identity); divide out-of-place
    qs = [v / beta]
    mqs = [mv / beta]
    alphas: list[float] = []
    betas: list[float] = []
    prev = None
    stable = 0
    for j in range(max_iter):
        w = op(qs[-1])
        alpha = float(w @ mqs[-1])
        alphas.append(alpha)
        w = w - alpha * qs[-1]
        if j > 0:
            w = w - betas[-1] * qs[-2]
        for qi, mqi in zip(qs, mqs):  # full reorthogonalization
            w = w - float(w @ mqi) * qi
        mw = ip_apply(w)
        beta = float(np.sqrt(max(w @ mw, 0.0)))
        from scipy.linalg import eigh_tridiagonal

        ev = eigh_tridiagonal(np.array(alphas), np.array(betas),
                              eigvals_only=True) if betas else np.array(alphas)
        top = float(ev[-1])
        if prev is not None and abs(top - prev) <= rtol * max(abs(top), 1e-300):
            stable += 1
            if stable >= 3:
                return top, True
        else:
            stable = 0
        prev = top
        if beta <= 1e-14 * max(abs(alpha), 1.0) or j == max_iter - 1:
            return top, j < max_iter - 1
        betas.append(beta)
        qs.append(w / beta)
        mqs.append(mw / beta)
    return prev if prev is not None else 0.0, False


def estimate_condition_number(A: sp.spmatrix,
                              preconditioner: Preconditioner | None = None,
                              norm: str = "eig",
                              max_iter: int = 200) -> float:
    """kappa of the preconditioned operator M^-1 A.

    norm="eig": ratio of extreme eigenvalues, computed by Lanczos with full
    reorthogonalization on the symmetrized form (the M-inner-product makes
    M^-1 A self-adjoint); the smallest eigenvalue comes from Lanczos on the
    inverse operator, where the inverted spectrum converges in a few steps.

    norm="2": sigma_max/sigma_min of M^-1 A (the 2-norm condition number of
    the nonsymmetric product), via Lanczos on the normal-equation operators.
    """
    M = preconditioner or IdentityPreconditioner()
    n = A.shape[0]
    A = A.tocsr()
    lu = spla.splu(A.tocsc())

    if norm == "eig":
        lmax, ok1 = _lanczos_extreme(lambda x: M.apply(A @ x), M.apply_m, n,
                                     seed=1, max_iter=max_iter)
        inv_lmin, ok2 = _lanczos_extreme(lambda x: lu.solve(M.apply_m(x)), M.apply_m,
                                         n, seed=2, max_iter=max_iter)
    elif norm == "2":
        lmax, ok1 = _lanczos_extreme(lambda x: A @ M.apply(M.apply(A @ x)),
                                     lambda x: x, n, seed=1, max_iter=max_iter)
        inv_lmin, ok2 = _lanczos_extreme(
            lambda x: lu.solve(M.apply_m(M.apply_m(lu.solve(x)))),
            lambda x: x, n, seed=2, max_iter=max_iter)
        lmax = np.sqrt(lmax)
        inv_lmin = np.sqrt(inv_lmin)
    else:
        raise ValueError(f"unknown norm {norm!r}")

    if not (ok1 and ok2):
        import warnings

        warnings.warn("condition-number Lanczos hit the iteration budget; "
                      "estimate may be outside the 5% target", stacklevel=2)
    return float(max(lmax * inv_lmin, 1.0))
