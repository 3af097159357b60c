"""Triangular meshes and piecewise-linear finite element matrices.

Meshes live either on a planar domain (2-D vertex coordinates) or on the
unit sphere (3-D unit vectors).  Sphere triangles are treated as flat
triangles of the embedded polyhedron, so every element integral below is an
exact closed form for linear shape functions.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

PLANE = "plane"
SPHERE = "sphere"

MAX_SUBDIVISIONS = 8
# relative area below which a triangle counts as degenerate
DEGENERATE_AREA_RATIO = 1e-14
# barycentric slack when deciding point-in-triangle
_BARY_TOL = 1e-12


class MeshError(ValueError):
    """Raised for malformed meshes or failed point location."""


class TriangularMesh:
    """A triangulated 2-manifold carrying the piecewise-linear basis.

    Parameters
    ----------
    vertices : (n, 2) or (n, 3) array
        Planar coordinates, or unit vectors for a sphere mesh.
    triangles : (m, 3) int array
        Zero-based vertex indices of each triangle.
    manifold : {"plane", "sphere"}
    validate : bool
        Check the manifold invariants on construction.

    Instances hash by identity and are treated as immutable.
    """

    def __init__(self, vertices, triangles, manifold: str = PLANE, validate: bool = True):
        if manifold not in (PLANE, SPHERE):
            raise MeshError(f"unknown manifold kind {manifold!r}")
        vertices = np.array(vertices, dtype=float)
        triangles = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        dim = 2 if manifold == PLANE else 3
        if vertices.ndim != 2 or vertices.shape[1] != dim:
            raise MeshError(f"{manifold} mesh needs vertices of shape (n, {dim}), got {vertices.shape}")
        vertices.setflags(write=False)
        triangles.setflags(write=False)
        self.vertices = vertices
        self.triangles = triangles
        self.manifold = manifold
        if validate:
            validate_mesh(self)

    def __repr__(self):
        return f"TriangularMesh({self.manifold}, {self.n_vertices} vertices, {self.n_triangles} triangles)"

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def dim(self) -> int:
        """Number of ambient coordinates (2 for planes, 3 for the sphere)."""
        return self.vertices.shape[1]

    @property
    def is_sphere(self) -> bool:
        return self.manifold == SPHERE

    @cached_property
    def points3d(self) -> np.ndarray:
        """Vertices embedded in R^3 (planar meshes get z = 0)."""
        if self.is_sphere:
            return self.vertices
        return np.column_stack([self.vertices, np.zeros(self.n_vertices)])

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (i, j) pairs."""
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Vertex adjacency (without the diagonal) as a boolean CSR matrix."""
        e = self.edges
        n = self.n_vertices
        data = np.ones(2 * len(e), dtype=bool)
        A = sp.coo_matrix((data, (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n))
        return A.tocsr()

    @cached_property
    def vertex_triangles(self) -> list[np.ndarray]:
        """Triangles incident to each vertex."""
        order = np.argsort(self.triangles.ravel(), kind="stable")
        tri_of = order // 3
        counts = np.bincount(self.triangles.ravel(), minlength=self.n_vertices)
        return np.split(tri_of, np.cumsum(counts)[:-1])

    @cached_property
    def triangle_neighbors(self) -> np.ndarray:
        """(m, 3) array; entry (t, a) is the triangle across the edge opposite
        local vertex a, or -1 on the boundary."""
        tri = self.triangles
        m = len(tri)
        nbr = -np.ones((m, 3), dtype=np.int64)
        owner = {}
        for t in range(m):
            for a in range(3):
                i, j = tri[t, (a + 1) % 3], tri[t, (a + 2) % 3]
                key = (i, j) if i < j else (j, i)
                other = owner.pop(key, None)
                if other is None:
                    owner[key] = (t, a)
                else:
                    nbr[t, a] = other[0]
                    nbr[other[0], other[1]] = t
        return nbr

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.points3d[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    @cached_property
    def _kdtree(self) -> cKDTree:
        return cKDTree(self.vertices)

    @cached_property
    def _bary_maps(self) -> np.ndarray:
        """Per-triangle inverse matrices mapping a point to barycentric weights.

        For planes the system is [x; y; 1] = V @ lam, for the sphere it is
        p = V @ c with lam = c / sum(c) (gnomonic projection).
        """
        if self.is_sphere:
            V = np.transpose(self.vertices[self.triangles], (0, 2, 1))
        else:
            V = np.ones((self.n_triangles, 3, 3))
            V[:, :2, :] = np.transpose(self.vertices[self.triangles], (0, 2, 1))
        return np.linalg.inv(V)


def validate_mesh(mesh: TriangularMesh) -> None:
    """Check the structural invariants of ``mesh``; raise MeshError otherwise."""
    tri = mesh.triangles
    n = mesh.n_vertices
    if tri.size == 0:
        raise MeshError("mesh has no triangles")
    if tri.min() < 0 or tri.max() >= n:
        raise MeshError("triangle references a vertex index out of range")
    if np.any((tri[:, 0] == tri[:, 1]) | (tri[:, 1] == tri[:, 2]) | (tri[:, 0] == tri[:, 2])):
        bad = int(np.flatnonzero((tri[:, 0] == tri[:, 1]) | (tri[:, 1] == tri[:, 2]) | (tri[:, 0] == tri[:, 2]))[0])
        raise MeshError(f"triangle {bad} repeats a vertex index")
    if not np.all(np.isfinite(mesh.vertices)):
        raise MeshError("non-finite vertex coordinates")
    if mesh.is_sphere:
        norms = np.linalg.norm(mesh.vertices, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise MeshError("sphere vertices must have unit norm")

    directed = tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    undirected = np.sort(directed, axis=1)
    edges, counts = np.unique(undirected, axis=0, return_counts=True)
    limit_bad = counts > 2
    if np.any(limit_bad):
        i, j = edges[np.flatnonzero(limit_bad)[0]]
        raise MeshError(f"non-manifold edge ({i}, {j}) shared by {counts[limit_bad][0]} triangles")
    if mesh.is_sphere and np.any(counts != 2):
        i, j = edges[np.flatnonzero(counts != 2)[0]]
        raise MeshError(f"sphere mesh has boundary edge ({i}, {j})")
    _, dcounts = np.unique(directed, axis=0, return_counts=True)
    if np.any(dcounts > 1):
        raise MeshError("inconsistent triangle orientation")
    if mesh.is_sphere:
        p = mesh.vertices[tri]
        normal = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        if np.any(np.einsum("ij,ij->i", normal, p.sum(axis=1)) <= 0):
            raise MeshError("sphere triangles must be oriented with outward normals")


# ---------------------------------------------------------------------------
# mesh construction and I/O
# ---------------------------------------------------------------------------

def _icosahedron():
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def build_icosphere(subdivisions: int) -> TriangularMesh:
    """Icosahedron refined ``subdivisions`` times and projected to the unit sphere.

    The result has ``10 * 4**subdivisions + 2`` vertices.
    """
    subdivisions = int(subdivisions)
    if subdivisions < 0:
        raise MeshError("subdivisions must be nonnegative")
    if subdivisions > MAX_SUBDIVISIONS:
        raise MeshError(f"subdivisions={subdivisions} exceeds the limit of {MAX_SUBDIVISIONS}")
    verts, faces = _icosahedron()
    verts = list(verts)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            idx = cache.get(key)
            if idx is None:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                idx = cache[key] = len(verts) - 1
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces, dtype=np.int64)
    V = np.array(verts)
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    return TriangularMesh(V, faces, SPHERE)


def build_planar_mesh(x_range, y_range, nx: int, ny: int) -> TriangularMesh:
    """Regular ``nx`` by ``ny`` vertex grid on a rectangle, two triangles per cell."""
    nx, ny = int(nx), int(ny)
    if nx < 2 or ny < 2:
        raise MeshError("nx and ny must be at least 2")
    x0, x1 = map(float, x_range)
    y0, y1 = map(float, y_range)
    if not (np.isfinite([x0, x1, y0, y1]).all() and x1 > x0 and y1 > y0):
        raise MeshError(f"degenerate rectangle {x_range} x {y_range}")
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    X, Y = np.meshgrid(xs, ys)
    V = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange(nx * ny).reshape(ny, nx)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    tris = np.column_stack([np.column_stack([a, b, c]), np.column_stack([a, c, d])]).reshape(-1, 3)
    return TriangularMesh(V, tris, PLANE)


def format_mesh(mesh: TriangularMesh) -> str:
    """Mesh in the whitespace-delimited text format read by :func:`load_mesh`."""
    lines = [f"manifold {mesh.manifold}", f"{mesh.n_vertices} {mesh.n_triangles}"]
    lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines += [" ".join(str(int(i)) for i in t) for t in mesh.triangles]
    return "\n".join(lines) + "\n"


def save_mesh(mesh: TriangularMesh, path) -> None:
    """Write ``mesh`` in the whitespace-delimited mesh text format."""
    Path(path).write_text(format_mesh(mesh))


def load_mesh(path) -> TriangularMesh:
    """Read a mesh text file (``manifold`` line, counts line, vertices, triangles).

    Blank lines and ``#`` comments are ignored.  The mesh is validated; a
    non-manifold edge is reported with its vertex pair.
    """
    rows = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append(line.split())
    try:
        if len(rows) < 2 or rows[0][0] != "manifold" or len(rows[0]) != 2:
            raise MeshError("first line must be 'manifold plane|sphere'")
        manifold = rows[0][1]
        nv, nf = (int(x) for x in rows[1])
        body = rows[2:]
        if len(body) != nv + nf:
            raise MeshError(f"expected {nv} vertex and {nf} triangle lines, found {len(body)} lines")
        verts = np.array([[float(x) for x in r] for r in body[:nv]])
        tris = np.array([[int(x) for x in r] for r in body[nv:]], dtype=np.int64)
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise MeshError("triangle lines must hold three vertex indices")
    except MeshError:
        raise
    except (ValueError, IndexError) as exc:
        raise MeshError(f"cannot parse mesh file {path}: {exc}") from exc
    return TriangularMesh(verts, tris, manifold)


# ---------------------------------------------------------------------------
# finite element matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FemMatrices:
    """Mass, lumped mass, stiffness and gradient-component matrices.

    ``D[k][i, j]`` is the integral of phi_i times the k-th ambient component
    of grad phi_j (tangential gradient on sphere triangles).
    """
    C: sp.csr_matrix
    c_lumped: np.ndarray
    G: sp.csr_matrix
    D: tuple

    @property
    def C_lumped(self) -> sp.dia_matrix:
        return sp.diags(self.c_lumped)

    @property
    def n(self) -> int:
        return self.C.shape[0]


def element_gradients(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Areas and barycentric gradients of flat triangles embedded in R^3.

    ``p`` has shape (m, 3, 3): triangle, local vertex, coordinate.  Returns
    ``areas`` of shape (m,) and ``grads`` of shape (m, 3, 3) where
    ``grads[t, a]`` is the (constant) gradient of local basis function a.
    """
    normal = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    twice_area = np.linalg.norm(normal, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        nhat = normal / twice_area[:, None]
        grads = np.empty_like(p)
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            grads[:, a] = np.cross(nhat, p[:, c] - p[:, b]) / twice_area[:, None]
    return 0.5 * twice_area, grads


def assemble(mesh: TriangularMesh) -> FemMatrices:
    """Assemble C, its row-sum lumping, G and the D matrices for ``mesh``."""
    p = mesh.points3d[mesh.triangles]
    areas, grads = element_gradients(p)
    if not np.all(np.isfinite(areas)) or np.any(areas <= DEGENERATE_AREA_RATIO * areas.max()):
        bad = int(np.flatnonzero(~(areas > DEGENERATE_AREA_RATIO * areas.max()))[0])
        raise MeshError(f"degenerate (zero-area) triangle {bad}: {mesh.triangles[bad].tolist()}")

    n = mesh.n_vertices
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()

    local_mass = (np.ones((3, 3)) + np.eye(3)) / 12.0
    Cloc = areas[:, None, None] * local_mass[None]
    Gloc = areas[:, None, None] * np.einsum("tak,tbk->tab", grads, grads)

    def build(local):
        M = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
        M.sum_duplicates()
        M.sort_indices()
        return M

    C = build(Cloc)
    G = build(Gloc)
    ndim = 3 if mesh.is_sphere else 2
    D = tuple(
        build(np.broadcast_to((areas / 3.0)[:, None, None] * grads[:, None, :, k], (len(tri), 3, 3)))
        for k in range(ndim)
    )
    c_lumped = np.asarray(C.sum(axis=1)).ravel()
    return FemMatrices(C=C, c_lumped=c_lumped, G=G, D=D)


# ---------------------------------------------------------------------------
# basis evaluation
# ---------------------------------------------------------------------------

def _prepare_points(mesh: TriangularMesh, points) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != mesh.dim:
        raise MeshError(f"points must have {mesh.dim} coordinates, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise MeshError("non-finite query point")
    if mesh.is_sphere:
        norms = np.linalg.norm(pts, axis=1)
        if np.any(np.abs(norms - 1.0) >= 1e-6):
            bad = int(np.flatnonzero(np.abs(norms - 1.0) >= 1e-6)[0])
            raise MeshError(f"point {bad} is not on the unit sphere (norm {norms[bad]:.8g})")
        pts = pts / norms[:, None]
    return pts


def _bary(mesh: TriangularMesh, tri_idx: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Barycentric weights of pts[i] with respect to triangle tri_idx[i]."""
    q = pts if mesh.is_sphere else np.column_stack([pts, np.ones(len(pts))])
    lam = np.einsum("tij,tj->ti", mesh._bary_maps[tri_idx], q)
    if mesh.is_sphere:
        s = lam.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(s[:, None] > 0, lam / s[:, None], -np.inf)
    return lam


def _inside(lam: np.ndarray) -> np.ndarray:
    return np.all(lam >= -_BARY_TOL, axis=-1)


def _walk(mesh: TriangularMesh, start: int, point: np.ndarray, max_steps: int) -> int:
    t = start
    for _ in range(max_steps):
        lam = _bary(mesh, np.array([t]), point[None])[0]
        if _inside(lam):
            return t
        a = int(np.argmin(lam))
        nxt = mesh.triangle_neighbors[t, a]
        if nxt < 0:
            return -1
        t = int(nxt)
    return -1


def locate_points(mesh: TriangularMesh, points) -> tuple[np.ndarray, np.ndarray]:
    """Containing triangle and barycentric weights for each point.

    Tries the triangles around the nearest vertex first, then walks across
    edges, then falls back to a brute-force scan of all triangles.
    """
    pts = _prepare_points(mesh, points)
    npts = len(pts)
    found = -np.ones(npts, dtype=np.int64)
    _, nearest = mesh._kdtree.query(pts)
    vt = mesh.vertex_triangles
    # pass 1: triangles incident to the nearest vertex
    maxdeg = max(len(v) for v in vt)
    cand = -np.ones((mesh.n_vertices, maxdeg), dtype=np.int64)
    for v, ts in enumerate(vt):
        cand[v, : len(ts)] = ts
    cands = cand[nearest]
    for col in range(maxdeg):
        todo = np.flatnonzero((found < 0) & (cands[:, col] >= 0))
        if len(todo) == 0:
            continue
        t = cands[todo, col]
        ok = _inside(_bary(mesh, t, pts[todo]))
        found[todo[ok]] = t[ok]
    # pass 2: walk, pass 3: brute force
    for i in np.flatnonzero(found < 0):
        t = _walk(mesh, int(vt[nearest[i]][0]), pts[i], max_steps=4 * int(np.sqrt(mesh.n_triangles)) + 10)
        if t < 0:
            lam = _bary(mesh, np.arange(mesh.n_triangles), np.repeat(pts[i][None], mesh.n_triangles, axis=0))
            hits = np.flatnonzero(_inside(lam))
            t = int(hits[0]) if len(hits) else -1
        if t < 0:
            kind = "outside the planar mesh" if not mesh.is_sphere else "not located on the mesh"
            raise MeshError(f"point {i} {pts[i].tolist()} is {kind}")
        found[i] = t
    lam = _bary(mesh, found, pts)
    lam[np.abs(lam) < _BARY_TOL] = 0.0
    lam = np.clip(lam, 0.0, 1.0)
    lam /= lam.sum(axis=1, keepdims=True)
    return found, lam


def evaluate_basis(mesh: TriangularMesh, points) -> sp.csr_matrix:
    """Sparse matrix of the piecewise-linear basis evaluated at ``points``.

    Row i holds the barycentric weights of point i in its containing
    triangle.  Sphere points within 1e-6 of unit norm are projected first.
    """
    tri_idx, lam = locate_points(mesh, points)
    npts = len(tri_idx)
    rows = np.repeat(np.arange(npts), 3)
    cols = mesh.triangles[tri_idx].ravel()
    Phi = sp.csr_matrix((lam.ravel(), (rows, cols)), shape=(npts, mesh.n_vertices))
    Phi.eliminate_zeros()
    Phi.sort_indices()
    return Phi


def nudge_poles(points: np.ndarray, angle: float = 1e-4, guard: float = 1e-9) -> np.ndarray:
    """Move unit vectors lying within ``guard`` (in z) of a pole by ``angle`` radians
    along the meridian through +x, so closed-form vector bases stay finite."""
    pts = np.array(points, dtype=float, copy=True)
    near = np.abs(pts[:, 2]) >= 1.0 - guard
    if np.any(near):
        sign = np.sign(pts[near, 2])
        pts[near] = np.column_stack([
            np.full(sign.shape, np.sin(angle)), np.zeros_like(sign), sign * np.cos(angle)
        ])
    return pts


def lonlat_to_xyz(lon_deg, lat_deg) -> np.ndarray:
    """Unit vectors from longitude/latitude in degrees."""
    lon = np.radians(np.asarray(lon_deg, dtype=float))
    lat = np.radians(np.asarray(lat_deg, dtype=float))
    return np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])


def xyz_to_lonlat(xyz) -> tuple[np.ndarray, np.ndarray]:
    xyz = np.atleast_2d(np.asarray(xyz, dtype=float))
    lon = np.degrees(np.arctan2(xyz[:, 1], xyz[:, 0]))
    lat = np.degrees(np.arcsin(np.clip(xyz[:, 2], -1.0, 1.0)))
    return lon, lat
