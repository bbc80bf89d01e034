"""Uniform staggered grid, marked-cell labels, and the unified porosity field.

Buildings and trees live on the grid as per-cell porosity (phi, volume
fraction open to flow) and leaf area density (LAD). Opaque geometry is
phi = 0; free air is phi = 1. Cut cells carry fractional phi so object
boundaries can slide smoothly through cells.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .geometry import TriangleMesh, mesh_aabb, points_in_mesh


class CellLabel(IntEnum):
    AIR = 0
    BUILDING = 1
    TREE = 2
    INLET = 3
    OUTLET = 4
    SOLID_WALL = 5


INTERIOR_LABELS = (CellLabel.AIR, CellLabel.BUILDING, CellLabel.TREE)
BOUNDARY_LABELS = (CellLabel.INLET, CellLabel.OUTLET, CellLabel.SOLID_WALL)


@dataclass(frozen=True)
class GridSpec:
    """Uniform staggered Cartesian grid; nz = 1 selects 2D mode."""

    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("cell counts must be >= 1")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ValueError("cell spacings must be > 0")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def is_2d(self) -> bool:
        return self.nz == 1

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.dz

    @property
    def spacing(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])

    def axis_centers(self, axis: int) -> np.ndarray:
        n = self.shape[axis]
        h = self.spacing[axis]
        return self.origin[axis] + (np.arange(n) + 0.5) * h

    def cell_centers(self) -> np.ndarray:
        """(nx, ny, nz, 3) array of cell-center coordinates."""
        x, y, z = (self.axis_centers(a) for a in range(3))
        return np.stack(np.meshgrid(x, y, z, indexing="ij"), axis=-1)

    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.origin, dtype=float)
        hi = lo + self.spacing * np.array(self.shape)
        return lo, hi


@dataclass
class PorosityField:
    """phi in [0, 1] per cell (1 = open air) and LAD >= 0 in 1/m."""

    phi: np.ndarray
    lad: np.ndarray

    @classmethod
    def open_air(cls, grid: GridSpec) -> "PorosityField":
        return cls(np.ones(grid.shape), np.zeros(grid.shape))

    def validate(self) -> None:
        if np.any(self.phi < 0) or np.any(self.phi > 1):
            raise ValueError("phi outside [0, 1]")
        if np.any(self.lad < 0):
            raise ValueError("LAD must be >= 0")

    def copy(self) -> "PorosityField":
        return PorosityField(self.phi.copy(), self.lad.copy())


@dataclass
class GridObject:
    """One building or tree: either a closed mesh or an exact axis box.

    Buildings carry a porosity phi (0 = opaque); trees carry LAD and leave
    phi at 1 (they act on the flow through drag only).
    """

    kind: CellLabel
    mesh: TriangleMesh | None = None
    box: tuple | None = None  # (lo, hi) in meters
    phi: float = 0.0
    lad: float = 0.0
    name: str = ""

    def __post_init__(self):
        if (self.mesh is None) == (self.box is None):
            raise ValueError("GridObject needs exactly one of mesh or box")
        if self.kind not in (CellLabel.BUILDING, CellLabel.TREE):
            raise ValueError("object kind must be Building or Tree")
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError("object phi must be in [0, 1]")
        if self.lad < 0:
            raise ValueError("object LAD must be >= 0")


def _candidate_ranges(grid: GridSpec, lo, hi):
    """Per-axis cell indices whose center lies in the half-cell-padded AABB."""
    pad = 0.5 * grid.spacing
    ranges = []
    for a in range(3):
        c = grid.axis_centers(a)
        sel = np.nonzero((c >= lo[a] - pad[a]) & (c <= hi[a] + pad[a]))[0]
        ranges.append(sel)
    return ranges


def _classify_columns(mesh: TriangleMesh, xs: np.ndarray, ys: np.ndarray,
                      zs: np.ndarray) -> np.ndarray:
    """Even-odd classification of a lattice of sample points by casting one
    +z ray per (x, y) column and counting surface crossings above each z.

    Grazing columns (through an edge/vertex, inside a vertical face plane, or
    crossing exactly at a sample height) fall back to the robust re-casting
    point query. Returns inside flags shaped (len(xs), len(ys), len(zs)).
    """
    v0, v1, v2 = mesh.corners()
    e1 = v1 - v0
    e2 = v2 - v0
    # projected (xy) signed areas; vertical triangles never cross a +z ray
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    area2d_scale = np.maximum(
        np.abs(e1[:, 0] * e2[:, 1]) + np.abs(e1[:, 1] * e2[:, 0]), 1e-300)
    vertical = np.abs(det) <= 1e-12 * area2d_scale
    safe_det = np.where(vertical, 1.0, det)
    xy = np.stack([v0[:, :2], v1[:, :2], v2[:, :2]])
    tri_xy_lo = xy.min(axis=0)
    tri_xy_hi = xy.max(axis=0)

    ncx, ncy, nz = len(xs), len(ys), len(zs)
    inside = np.zeros((ncx * ncy, nz), dtype=bool)
    ambiguous = np.zeros(ncx * ncy, dtype=bool)
    cols = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)

    eps_b = 1e-10
    eps_z = 1e-9
    chunk = max(1, int(4_000_000 // max(len(v0), 1)))
    for lo_i in range(0, len(cols), chunk):
        p = cols[lo_i:lo_i + chunk]
        rx = p[:, 0:1] - v0[None, :, 0]
        ry = p[:, 1:2] - v0[None, :, 1]
        u = (rx * e2[None, :, 1] - ry * e2[None, :, 0]) / safe_det
        v = (ry * e1[None, :, 0] - rx * e1[None, :, 1]) / safe_det
        w = 1.0 - u - v
        in_loose = (u >= -eps_b) & (v >= -eps_b) & (w >= -eps_b) & ~vertical[None, :]
        graze = in_loose & ((u <= eps_b) | (v <= eps_b) | (w <= eps_b))
        # column touching the xy footprint of a vertical triangle -> suspect
        near_vert = vertical[None, :] \
            & (p[:, 0:1] >= tri_xy_lo[None, :, 0] - eps_z) \
            & (p[:, 0:1] <= tri_xy_hi[None, :, 0] + eps_z) \
            & (p[:, 1:2] >= tri_xy_lo[None, :, 1] - eps_z) \
            & (p[:, 1:2] <= tri_xy_hi[None, :, 1] + eps_z)
        amb = graze.any(axis=1) | near_vert.any(axis=1)

        zc = v0[None, :, 2] + u * e1[None, :, 2] + v * e2[None, :, 2]
        for n in range(len(p)):
            row = lo_i + n
            if amb[n]:
                ambiguous[row] = True
                continue
            crossings = np.sort(zc[n][in_loose[n]])
            if crossings.size and np.min(np.abs(crossings[None, :] - zs[:, None])) <= eps_z:
                ambiguous[row] = True
                continue
            above = crossings.size - np.searchsorted(crossings, zs)
            inside[row] = (above % 2) == 1

    if ambiguous.any():
        rows = np.nonzero(ambiguous)[0]
        pts = np.empty((len(rows) * nz, 3))
        pts[:, 0] = np.repeat(cols[rows, 0], nz)
        pts[:, 1] = np.repeat(cols[rows, 1], nz)
        pts[:, 2] = np.tile(zs, len(rows))
        inside[rows] = points_in_mesh(pts, mesh).reshape(len(rows), nz)
    return inside.reshape(ncx, ncy, nz)


def _box_coverage(grid: GridSpec, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    """Exact covered volume fraction for every cell intersecting box [lo, hi].

    Returns (flat cell indices, fractions). Exact and smooth in the box
    coordinates, which keeps objective functions differentiable as object
    faces slide through cells.
    """
    fractions = []
    for a in range(3):
        c = grid.axis_centers(a)
        h = grid.spacing[a]
        cell_lo = c - 0.5 * h
        overlap = np.minimum(hi[a], cell_lo + h) - np.maximum(lo[a], cell_lo)
        fractions.append(np.clip(overlap / h, 0.0, 1.0))
    cov = fractions[0][:, None, None] * fractions[1][None, :, None] * fractions[2][None, None, :]
    idx = np.nonzero(cov.ravel() > 0.0)[0]
    return idx, cov.ravel()[idx]


def voxelize(objects: list[GridObject], grid: GridSpec, subdiv: int = 4):
    """Two-pass voxelization of buildings and trees onto the grid.

    Pass 1 selects cells near each object's AABB; pass 2 classifies the
    subdiv^3 sub-cell sample points with the even-odd rule. A cell's phi is
    the mean sample porosity (1 outside all objects, the object's phi
    inside), so fully covered cells take the object's phi exactly and cut
    cells take fractional values. Tree LAD scales with the covered fraction.

    Returns (labels, PorosityField). Where objects of different kinds
    overlap, the lower phi wins and its label is kept (with a warning).
    """
    if not 1 <= subdiv <= 8:
        raise ValueError("subdiv must be in [1, 8]")
    labels = np.full(grid.shape, int(CellLabel.AIR), dtype=np.int8)
    poros = PorosityField.open_air(grid)

    nsamp = subdiv ** 3
    # per touched cell: sample-level phi (union across mesh objects) and lad
    sample_phi: dict[int, np.ndarray] = {}
    sample_lad: dict[int, np.ndarray] = {}
    cell_kind: dict[int, tuple[float, CellLabel]] = {}  # min sample phi seen, kind

    def note_kind(flat: int, obj_phi: float, kind: CellLabel):
        prev = cell_kind.get(flat)
        if prev is None or obj_phi < prev[0]:
            if prev is not None and prev[1] != kind:
                warnings.warn(
                    f"overlapping {prev[1].name}/{kind.name} objects in cell {flat}; "
                    f"keeping the lower-phi kind {kind.name}",
                    stacklevel=2,
                )
            cell_kind[flat] = (obj_phi, kind)

    def subsample_coords(axis: int, cells: np.ndarray) -> np.ndarray:
        h = grid.spacing[axis]
        base = grid.origin[axis] + cells * h
        offs = (np.arange(subdiv) + 0.5) * h / subdiv
        return (base[:, None] + offs[None, :]).ravel()

    for obj in objects:
        eff_phi = 1.0 if obj.kind == CellLabel.TREE else obj.phi
        if obj.mesh is not None:
            obj.mesh.validate_closed()
            box = mesh_aabb(obj.mesh)
            cand = _candidate_ranges(grid, box.min, box.max)
            if any(len(r) == 0 for r in cand):
                continue
            xs = subsample_coords(0, cand[0])
            ys = subsample_coords(1, cand[1])
            zs = subsample_coords(2, cand[2])
            inside = _classify_columns(obj.mesh, xs, ys, zs)
            ncx, ncy, ncz = len(cand[0]), len(cand[1]), len(cand[2])
            blocks = inside.reshape(ncx, subdiv, ncy, subdiv, ncz, subdiv)
            blocks = blocks.transpose(0, 2, 4, 1, 3, 5).reshape(ncx, ncy, ncz, nsamp)
            covered = blocks.any(axis=-1)
            for cx, cy, cz in zip(*np.nonzero(covered)):
                flat = int(np.ravel_multi_index(
                    (cand[0][cx], cand[1][cy], cand[2][cz]), grid.shape))
                ins = blocks[cx, cy, cz]
                sp = sample_phi.setdefault(flat, np.ones(nsamp))
                np.minimum(sp, np.where(ins, eff_phi, 1.0), out=sp)
                if obj.kind == CellLabel.TREE and obj.lad > 0:
                    sl = sample_lad.setdefault(flat, np.zeros(nsamp))
                    np.maximum(sl, np.where(ins, obj.lad, 0.0), out=sl)
                note_kind(flat, eff_phi, obj.kind)
        else:
            lo = np.asarray(obj.box[0], dtype=float)
            hi = np.asarray(obj.box[1], dtype=float)
            idx, cov = _box_coverage(grid, lo, hi)
            for flat, c in zip(idx, cov):
                sp = sample_phi.setdefault(int(flat), np.ones(nsamp))
                # exact coverage: emulate as uniform dilution over samples
                target = 1.0 - c * (1.0 - eff_phi)
                sp *= target
                if obj.kind == CellLabel.TREE and obj.lad > 0:
                    sl = sample_lad.setdefault(int(flat), np.zeros(nsamp))
                    sl += obj.lad * c
                note_kind(int(flat), eff_phi, obj.kind)

    shape = grid.shape
    for flat, sp in sample_phi.items():
        ijk = np.unravel_index(flat, shape)
        poros.phi[ijk] = sp.mean()
    for flat, sl in sample_lad.items():
        ijk = np.unravel_index(flat, shape)
        poros.lad[ijk] = sl.mean()
    for flat, (_, kind) in cell_kind.items():
        ijk = np.unravel_index(flat, shape)
        touched = poros.phi[ijk] < 1.0 - 1e-12 or poros.lad[ijk] > 0.0
        if touched:
            labels[ijk] = int(kind)
    return labels, poros


def solid_volume(grid: GridSpec, poros: PorosityField) -> float:
    """Total solid volume represented by the porosity field, in m^3."""
    return float(np.sum(1.0 - poros.phi) * grid.cell_volume)


# ---------------------------------------------------------------------------
# Painted porosity


def decode_painted_porosity(image: np.ndarray, grid: GridSpec,
                            tree_mask: np.ndarray | None = None,
                            extrude_height: float | None = None,
                            tree_lad: float = 1.0):
    """Decode a grayscale raster into labels + porosity: phi = pixel / 255.

    The raster is (ny, nx) with row 0 at the grid's minimum-y row. In 3D the
    paint extrudes uniformly up to ``extrude_height`` meters above the grid
    origin (cells above stay air). Dark pixels become buildings unless the
    optional binary tree mask marks them as trees (LAD from ``tree_lad``).
    """
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError(f"painted porosity must be 8-bit, got {image.dtype}")
    if image.shape != (grid.ny, grid.nx):
        raise ValueError(f"raster shape {image.shape} != (ny, nx) = {(grid.ny, grid.nx)}")
    if tree_mask is not None:
        tree_mask = np.asarray(tree_mask) != 0
        if tree_mask.shape != image.shape:
            raise ValueError("tree mask shape differs from image")
    else:
        tree_mask = np.zeros_like(image, dtype=bool)

    phi2d = image.astype(float).T / 255.0  # -> (nx, ny)
    tree2d = tree_mask.T
    painted2d = (phi2d < 1.0) | tree2d

    labels = np.full(grid.shape, int(CellLabel.AIR), dtype=np.int8)
    poros = PorosityField.open_air(grid)
    if grid.is_2d or extrude_height is None:
        kmax = grid.nz
    else:
        zc = grid.axis_centers(2) - grid.origin[2]
        kmax = int(np.sum(zc <= extrude_height))
    for k in range(kmax):
        poros.phi[:, :, k] = phi2d
        lab = np.where(tree2d, int(CellLabel.TREE),
                       np.where(painted2d, int(CellLabel.BUILDING), int(CellLabel.AIR)))
        labels[:, :, k] = lab
        poros.lad[:, :, k] = np.where(tree2d, tree_lad, 0.0)
    return labels, poros


def encode_porosity_raster(poros: PorosityField, k: int = 0) -> np.ndarray:
    """Inverse of decode: one z-slice of phi to a (ny, nx) uint8 raster."""
    return np.round(poros.phi[:, :, k].T * 255.0).astype(np.uint8)


def read_pgm(path) -> np.ndarray:
    """Binary PGM (P5, 8-bit). Row 0 of the file maps to the grid's min-y row."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM: magic {tokens[0]!r}")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"PGM depth must be 8-bit (maxval 255), got {maxval}")
    pos += 1
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return pixels.reshape(height, width)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(image.tobytes())


def load_raster(path) -> np.ndarray:
    """PGM or 8-bit grayscale PNG."""
    path = str(path)
    if path.lower().endswith(".pgm"):
        return read_pgm(path)
    from PIL import Image

    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.uint8)


# ---------------------------------------------------------------------------
# Boundary labeling


_FACE_KEYS = ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max")


def classify_boundary(grid: GridSpec, faces: dict) -> np.ndarray:
    """Label the one-cell-thick boundary layer from a per-face assignment.

    ``faces`` maps face names (x_min, x_max, y_min, y_max and, in 3D, z_min,
    z_max) to Inlet/Outlet/SolidWall. Edge and corner cells take the
    priority Inlet > SolidWall > Outlet so inflow is never starved.
    """
    required = _FACE_KEYS[:4] if grid.is_2d else _FACE_KEYS
    missing = [k for k in required if k not in faces]
    if missing:
        raise ValueError(f"missing boundary face assignment(s): {missing}")
    for key, lab in faces.items():
        if key not in _FACE_KEYS:
            raise ValueError(f"unknown face {key!r}")
        if CellLabel(lab) not in BOUNDARY_LABELS:
            raise ValueError(f"face {key} must be Inlet/Outlet/SolidWall, got {lab}")

    labels = np.full(grid.shape, int(CellLabel.AIR), dtype=np.int8)
    slabs = {
        "x_min": (slice(0, 1), slice(None), slice(None)),
        "x_max": (slice(grid.nx - 1, grid.nx), slice(None), slice(None)),
        "y_min": (slice(None), slice(0, 1), slice(None)),
        "y_max": (slice(None), slice(grid.ny - 1, grid.ny), slice(None)),
        "z_min": (slice(None), slice(None), slice(0, 1)),
        "z_max": (slice(None), slice(None), slice(grid.nz - 1, grid.nz)),
    }
    # ascending priority: later writes win
    for want in (CellLabel.OUTLET, CellLabel.SOLID_WALL, CellLabel.INLET):
        for key in required:
            if CellLabel(faces[key]) == want:
                labels[slabs[key]] = int(want)
    return labels


def merge_labels(boundary: np.ndarray, interior: np.ndarray) -> np.ndarray:
    """Overlay interior object labels onto the boundary frame."""
    out = boundary.copy()
    mask = (boundary == int(CellLabel.AIR)) & (interior != int(CellLabel.AIR))
    out[mask] = interior[mask]
    return out


def interior_mask(labels: np.ndarray) -> np.ndarray:
    """Cells that participate in the flow solve (not boundary, not walls)."""
    return (labels == int(CellLabel.AIR)) | (labels == int(CellLabel.BUILDING)) \
        | (labels == int(CellLabel.TREE))


# ---------------------------------------------------------------------------
# Flow state


@dataclass
class FlowState:
    """All simulation fields on one grid. Velocities are face-centered
    (u: (nx+1, ny, nz), v: (nx, ny+1, nz), w: (nx, ny, nz+1)); pressure,
    turbulence quantities, labels and porosity are cell-centered."""

    grid: GridSpec
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    p: np.ndarray
    k: np.ndarray
    omega: np.ndarray
    nu_t: np.ndarray
    labels: np.ndarray
    porosity: PorosityField
    time: float = 0.0
    step_count: int = 0

    @classmethod
    def zeros(cls, grid: GridSpec, labels: np.ndarray | None = None,
              porosity: PorosityField | None = None,
              k0: float = 1e-6, omega0: float = 1.0) -> "FlowState":
        nx, ny, nz = grid.shape
        if labels is None:
            labels = np.full(grid.shape, int(CellLabel.AIR), dtype=np.int8)
        if porosity is None:
            porosity = PorosityField.open_air(grid)
        return cls(
            grid=grid,
            u=np.zeros((nx + 1, ny, nz)),
            v=np.zeros((nx, ny + 1, nz)),
            w=np.zeros((nx, ny, nz + 1)),
            p=np.zeros(grid.shape),
            k=np.full(grid.shape, k0),
            omega=np.full(grid.shape, omega0),
            nu_t=np.full(grid.shape, k0 / omega0),
            labels=labels,
            porosity=porosity,
        )

    def validate(self) -> None:
        nx, ny, nz = self.grid.shape
        expect = {
            "u": (nx + 1, ny, nz), "v": (nx, ny + 1, nz), "w": (nx, ny, nz + 1),
            "p": (nx, ny, nz), "k": (nx, ny, nz), "omega": (nx, ny, nz),
            "nu_t": (nx, ny, nz), "labels": (nx, ny, nz),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if np.any(self.k < 0):
            raise ValueError("negative turbulent kinetic energy")
        if np.any(self.omega <= 0):
            raise ValueError("non-positive specific dissipation")
        if np.any(self.nu_t < 0):
            raise ValueError("negative eddy viscosity")
        self.porosity.validate()

    def copy(self) -> "FlowState":
        return FlowState(
            grid=self.grid,
            u=self.u.copy(), v=self.v.copy(), w=self.w.copy(),
            p=self.p.copy(), k=self.k.copy(), omega=self.omega.copy(),
            nu_t=self.nu_t.copy(), labels=self.labels.copy(),
            porosity=self.porosity.copy(),
            time=self.time, step_count=self.step_count,
        )

    def cell_velocity(self) -> np.ndarray:
        """(nx, ny, nz, 3) velocity interpolated to cell centers."""
        uc = 0.5 * (self.u[:-1] + self.u[1:])
        vc = 0.5 * (self.v[:, :-1] + self.v[:, 1:])
        wc = 0.5 * (self.w[:, :, :-1] + self.w[:, :, 1:])
        return np.stack([uc, vc, wc], axis=-1)

    def speed(self) -> np.ndarray:
        """Cell-centered |u|."""
        vel = self.cell_velocity()
        return np.sqrt(np.sum(vel * vel, axis=-1))
