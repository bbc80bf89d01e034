"""Closed-triangle-mesh kernel: ray casting, inside/outside tests, bounding boxes.

Meshes are watertight triangle surfaces in meters. Inside/outside queries use
the even-odd rule on ray crossings, with randomized re-casts when a ray grazes
an edge or vertex.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

# Relative determinant threshold below which a ray counts as parallel to the
# triangle plane, and the absolute barycentric band treated as "grazing".
_EPS_PARALLEL = 1e-10
_EPS_BARY = 1e-10
_EPS_T = 1e-9  # meters

# Fixed primary cast direction; deliberately irrational-ish so axis-aligned
# geometry is never parallel or edge-on for the first cast.
_PRIMARY_DIR = np.array([0.285601, 0.571808, 0.769137])
_PRIMARY_DIR /= np.linalg.norm(_PRIMARY_DIR)


class MeshError(ValueError):
    """Raised for malformed meshes (open surfaces, bad indices, empty)."""


class ClassificationError(RuntimeError):
    """Raised when a point cannot be classified after all re-cast retries."""


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box, min <= max componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", np.asarray(self.min, dtype=float))
        object.__setattr__(self, "max", np.asarray(self.max, dtype=float))
        if np.any(self.min > self.max):
            raise ValueError(f"Aabb min {self.min} exceeds max {self.max}")

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.min) & (p <= self.max), axis=1)

    def expanded(self, margin: float) -> "Aabb":
        return Aabb(self.min - margin, self.max + margin)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, |d| = {n}")
        object.__setattr__(self, "direction", d)


@dataclass
class TriangleMesh:
    """Indexed triangle surface. Must be closed (every edge shared by exactly
    two triangles) for inside/outside queries to be meaningful."""

    vertices: np.ndarray  # (V, 3) float64, meters
    triangles: np.ndarray  # (T, 3) int
    _tri_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.vertices) == 0 or len(self.triangles) == 0:
            raise MeshError("empty mesh")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise MeshError("triangle vertex index out of range")

    def validate_closed(self) -> None:
        """Edge-manifold check: every undirected edge on exactly 2 triangles."""
        t = self.triangles
        edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        if np.any(counts != 2):
            bad = int(np.sum(counts != 2))
            raise MeshError(f"mesh is not closed: {bad} edges not shared by exactly 2 triangles")

    def corners(self):
        """Per-triangle corner arrays (v0, v1, v2), cached."""
        if "corners" not in self._tri_cache:
            v = self.vertices
            t = self.triangles
            self._tri_cache["corners"] = (v[t[:, 0]], v[t[:, 1]], v[t[:, 2]])
        return self._tri_cache["corners"]

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=float), self.triangles.copy())


def mesh_aabb(mesh: TriangleMesh) -> Aabb:
    """Tight componentwise bounding box over all vertices."""
    if len(mesh.vertices) == 0:
        raise MeshError("empty mesh has no bounding box")
    return Aabb(mesh.vertices.min(axis=0), mesh.vertices.max(axis=0))


def ray_triangle_intersect(ray: Ray, tri) -> float | None:
    """Moller-Trumbore intersection; returns hit distance t >= 0 or None.

    Degenerate triangles (area below 1e-12 m^2) report no-hit.
    """
    v0, v1, v2 = (np.asarray(p, dtype=float) for p in tri)
    edge1 = v1 - v0
    edge2 = v2 - v0
    area2 = np.linalg.norm(np.cross(edge1, edge2))
    if area2 * 0.5 <= 1e-12:
        return None
    pvec = np.cross(ray.direction, edge2)
    det = edge1 @ pvec
    if abs(det) <= _EPS_PARALLEL * area2:
        return None
    inv_det = 1.0 / det
    tvec = ray.origin - v0
    u = (tvec @ pvec) * inv_det
    if u < 0.0 or u > 1.0:
        return None
    qvec = np.cross(tvec, edge1)
    v = (ray.direction @ qvec) * inv_det
    if v < 0.0 or u + v > 1.0:
        return None
    t = (edge2 @ qvec) * inv_det
    if t < 0.0:
        return None
    return float(t)


def _cast_batch(points: np.ndarray, direction: np.ndarray, mesh: TriangleMesh):
    """Count crossings for many origins along one direction.

    Returns (counts, ambiguous): ambiguous marks points whose ray grazed a
    triangle edge/vertex, started on the surface, or ran parallel within a
    face plane, i.e. whose parity cannot be trusted.
    """
    v0, v1, v2 = mesh.corners()
    edge1 = v1 - v0
    edge2 = v2 - v0
    normal = np.cross(edge1, edge2)
    area2 = np.linalg.norm(normal, axis=1)
    ok = area2 * 0.5 > 1e-12  # drop degenerate triangles entirely
    v0, edge1, edge2, normal, area2 = v0[ok], edge1[ok], edge2[ok], normal[ok], area2[ok]
    ntri = len(v0)
    counts = np.zeros(len(points), dtype=np.int64)
    ambiguous = np.zeros(len(points), dtype=bool)
    if ntri == 0:
        return counts, ambiguous

    pvec = np.cross(direction, edge2)  # (T, 3)
    det = np.einsum("tj,tj->t", edge1, pvec)  # (T,)
    parallel = np.abs(det) <= _EPS_PARALLEL * area2
    safe_det = np.where(parallel, 1.0, det)

    chunk = max(1, int(4_000_000 // ntri))
    for lo in range(0, len(points), chunk):
        p = points[lo:lo + chunk]
        tvec = p[:, None, :] - v0[None, :, :]  # (N, T, 3)
        u = np.einsum("ntj,tj->nt", tvec, pvec) / safe_det
        qvec = np.cross(tvec, edge1[None, :, :])
        v = np.einsum("ntj,j->nt", qvec, direction) / safe_det
        t = np.einsum("ntj,tj->nt", qvec, edge2) / safe_det
        w = 1.0 - u - v

        inside_loose = (u >= -_EPS_BARY) & (v >= -_EPS_BARY) & (w >= -_EPS_BARY)
        hit = ~parallel[None, :] & inside_loose & (t > _EPS_T)
        grazing = ~parallel[None, :] & inside_loose & (
            (u <= _EPS_BARY) | (v <= _EPS_BARY) | (w <= _EPS_BARY) | (np.abs(t) <= _EPS_T)
        )
        # parallel within the face plane: origin close to the plane is wholly
        # suspect for this direction
        plane_dist = np.abs(np.einsum("ntj,tj->nt", tvec, normal)) / area2
        grazing |= parallel[None, :] & (plane_dist <= _EPS_T)

        counts[lo:lo + chunk] = hit.sum(axis=1)
        ambiguous[lo:lo + chunk] = grazing.any(axis=1)
    return counts, ambiguous


def _retry_direction(point: np.ndarray, attempt: int) -> np.ndarray:
    """Deterministic pseudo-random unit direction for a re-cast."""
    key = np.asarray(point, dtype=np.float64).tobytes() + attempt.to_bytes(4, "little")
    seed = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
    rng = np.random.default_rng(seed)
    d = rng.normal(size=3)
    return d / np.linalg.norm(d)


def points_in_mesh(points: np.ndarray, mesh: TriangleMesh, max_retries: int = 8) -> np.ndarray:
    """Even-odd classification of many points against one closed mesh.

    Points outside the mesh AABB are classified False without casting.
    Grazing rays are re-cast along deterministic perturbed directions, up to
    ``max_retries`` times, after which ClassificationError is raised.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    result = np.zeros(len(points), dtype=bool)
    box = mesh_aabb(mesh).expanded(_EPS_T)
    active = box.contains(points)
    if not active.any():
        return result

    idx = np.nonzero(active)[0]
    counts, ambiguous = _cast_batch(points[idx], _PRIMARY_DIR, mesh)
    result[idx] = counts % 2 == 1

    for attempt in range(1, max_retries + 1):
        bad = idx[ambiguous]
        if len(bad) == 0:
            return result
        still = np.zeros(len(bad), dtype=bool)
        for n, i in enumerate(bad):
            d = _retry_direction(points[i], attempt)
            c, amb = _cast_batch(points[i:i + 1], d, mesh)
            result[i] = c[0] % 2 == 1
            still[n] = amb[0]
        idx = bad
        ambiguous = still

    bad = idx[ambiguous]
    if len(bad) > 0:
        p = points[bad[0]]
        raise ClassificationError(
            f"{len(bad)} point(s) unclassifiable after {max_retries} re-casts; first: {p}"
        )
    return result


def point_in_mesh(p, mesh: TriangleMesh, max_retries: int = 8) -> bool:
    """Single-point even-odd query. See points_in_mesh."""
    return bool(points_in_mesh(np.asarray(p, dtype=float)[None, :], mesh, max_retries)[0])


# ---------------------------------------------------------------------------
# Mesh construction helpers


def load_obj(path) -> TriangleMesh:
    """Minimal OBJ reader: 'v' and 'f' records only; polygons are fanned."""
    vertices = []
    faces = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                ids = [int(tok.split("/")[0]) for tok in parts[1:]]
                ids = [i - 1 if i > 0 else len(vertices) + i for i in ids]
                for a, b in zip(ids[1:-1], ids[2:]):
                    faces.append([ids[0], a, b])
    if not vertices or not faces:
        raise MeshError(f"{path}: no usable v/f records")
    mesh = TriangleMesh(np.array(vertices), np.array(faces))
    mesh.validate_closed()
    return mesh


def box_mesh(lo, hi) -> TriangleMesh:
    """Closed axis-aligned box [lo, hi]."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    verts = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ])
    quads = [
        (0, 3, 2, 1),  # bottom (outward -z)
        (4, 5, 6, 7),  # top
        (0, 1, 5, 4),  # front (-y)
        (2, 3, 7, 6),  # back (+y)
        (0, 4, 7, 3),  # left (-x)
        (1, 2, 6, 5),  # right (+x)
    ]
    tris = []
    for a, b, c, d in quads:
        tris.append([a, b, c])
        tris.append([a, c, d])
    return TriangleMesh(verts, np.array(tris))


def cylinder_mesh(center, radius, z0, z1, segments: int = 48) -> TriangleMesh:
    """Closed vertical cylinder with fan caps."""
    cx, cy = center
    ang = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    ring = np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)], axis=1)
    verts = [[x, y, z0] for x, y in ring] + [[x, y, z1] for x, y in ring]
    verts += [[cx, cy, z0], [cx, cy, z1]]
    b0, t0, cb, ct = 0, segments, 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris.append([b0 + i, b0 + j, t0 + j])
        tris.append([b0 + i, t0 + j, t0 + i])
        tris.append([cb, b0 + j, b0 + i])  # bottom cap faces -z
        tris.append([ct, t0 + i, t0 + j])  # top cap faces +z
    return TriangleMesh(np.array(verts, dtype=float), np.array(tris))


def icosphere(radius: float = 1.0, center=(0.0, 0.0, 0.0), subdivisions: int = 2) -> TriangleMesh:
    """Geodesic sphere by subdividing an icosahedron."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts[0])
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                verts.append(m)
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=float)
    return TriangleMesh(v, np.array(faces))
