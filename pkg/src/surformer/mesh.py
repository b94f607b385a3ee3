"""Triangle meshes and the discrete geometry the pipeline is built on.

Provides the mesh container with OFF/OBJ I/O, the cotangent
Laplace-Beltrami discretization with a lumped mass matrix, a deterministic
generalized eigensolver for the spectral basis, exact closest-point queries,
and similarity (Procrustes) alignment.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.linalg import eigh, solve_triangular
from scipy.sparse.linalg import splu

from .errors import DegenerateGeometryError, MeshError, NumericError, SolverError

_DEGENERATE_AREA = 1e-12  # mm^2, rejection threshold for laplacian assembly


class TriMesh:
    """Triangle surface mesh with vertex positions in mm.

    Parameters
    ----------
    vertices : (V, 3) array_like
        Vertex positions.
    faces : (F, 3) array_like
        Vertex-index triples. Every index must be valid, no face may repeat
        an index, every vertex must be referenced, and all triangle areas
        must be strictly positive.
    """

    def __init__(self, vertices, faces, validate: bool = True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {self.faces.shape}")
        if validate:
            self._validate()

    def _validate(self):
        v, f = self.vertices, self.faces
        if not np.isfinite(v).all():
            raise MeshError("non-finite vertex coordinates")
        if f.size == 0:
            raise MeshError("mesh has no faces")
        if f.min() < 0 or f.max() >= len(v):
            raise MeshError(
                f"face index out of range [0, {len(v)}): min {f.min()}, max {f.max()}"
            )
        repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if repeated.any():
            raise MeshError(f"degenerate face (repeated index) at {np.flatnonzero(repeated)[:5]}")
        referenced = np.zeros(len(v), dtype=bool)
        referenced[f.ravel()] = True
        if not referenced.all():
            raise MeshError(f"unreferenced vertices: {np.flatnonzero(~referenced)[:5]}")
        areas = self.face_areas()
        if (areas <= 0.0).any():
            raise MeshError(f"non-positive triangle area at faces {np.flatnonzero(areas <= 0.0)[:5]}")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_corners(self):
        """Per-face corner positions as three (F, 3) arrays."""
        v, f = self.vertices, self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_areas(self) -> np.ndarray:
        a, b, c = self.face_corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def total_area(self) -> float:
        return float(self.face_areas().sum())

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (E, 2) index array."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.faces.copy(), validate=False)

    def with_vertices(self, vertices) -> "TriMesh":
        """Same topology with replaced vertex positions (not re-validated)."""
        return TriMesh(vertices, self.faces, validate=False)

    # ------------------------------------------------------------------ I/O

    def save(self, path):
        path = Path(path)
        if path.suffix.lower() == ".off":
            save_off(self, path)
        elif path.suffix.lower() == ".obj":
            save_obj(self, path)
        else:
            raise MeshError(f"unsupported mesh format: {path.suffix}")

    @staticmethod
    def load(path) -> "TriMesh":
        path = Path(path)
        if path.suffix.lower() == ".off":
            return load_off(path)
        if path.suffix.lower() == ".obj":
            return load_obj(path)
        raise MeshError(f"unsupported mesh format: {path.suffix}")


def _fmt(x: float) -> str:
    # repr of a Python float is the shortest exact round-trip representation
    return repr(float(x))


def save_obj(mesh: TriMesh, path):
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriMesh:
    vertices, faces = [], []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            vertices.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
            if len(idx) != 3:
                raise MeshError(f"non-triangular face in {path}")
            faces.append(idx)
        # vn / vt / other directives are ignored
    return TriMesh(vertices, faces)


def save_off(mesh: TriMesh, path):
    lines = ["OFF", f"{mesh.n_vertices} {mesh.n_faces} 0"]
    for v in mesh.vertices:
        lines.append(f"{_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}")
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_off(path) -> TriMesh:
    tokens = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise MeshError(f"{path} is not an OFF file")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4
    vertices = np.array(tokens[pos : pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        k = int(tokens[pos])
        if k != 3:
            raise MeshError(f"non-triangular face in {path}")
        faces.append([int(t) for t in tokens[pos + 1 : pos + 4]])
        pos += 1 + k
    return TriMesh(vertices, faces)


# --------------------------------------------------------------------------
# Surface point references
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SurfacePointRef:
    """A point on a mesh surface: face index plus barycentric weights.

    Weights are non-negative and sum to one (|sum - 1| < 1e-9).
    """

    face: int
    barycentric: tuple[float, float, float]

    def __post_init__(self):
        w = np.asarray(self.barycentric, dtype=np.float64)
        if (w < -1e-12).any() or abs(w.sum() - 1.0) > 1e-9:
            raise MeshError(f"invalid barycentric weights {self.barycentric}")

    def position(self, mesh: TriMesh) -> np.ndarray:
        tri = mesh.faces[self.face]
        w = np.asarray(self.barycentric)
        return w @ mesh.vertices[tri]


def anchor_matrix(mesh: TriMesh, refs: list[SurfacePointRef]) -> sparse.csr_matrix:
    """Sparse (len(refs), V) interpolation matrix: positions = A @ vertices."""
    rows, cols, vals = [], [], []
    for i, ref in enumerate(refs):
        tri = mesh.faces[ref.face]
        for j in range(3):
            rows.append(i)
            cols.append(tri[j])
            vals.append(ref.barycentric[j])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(refs), mesh.n_vertices))


# --------------------------------------------------------------------------
# Cotangent Laplacian and spectral basis
# --------------------------------------------------------------------------


def cotangent_edge_weights(mesh: TriMesh):
    """Per-face corner cotangent edge weights, clamped to be non-negative.

    Returns (I, J, W): for each face corner, the edge (I, J) opposite to it
    and the weight cot(angle)/2. Negative cotangents from obtuse corners are
    clamped to zero so the assembled operator stays an M-matrix.
    """
    a, b, c = mesh.face_corners()
    areas = mesh.face_areas()
    bad = areas < _DEGENERATE_AREA
    if bad.any():
        raise MeshError(f"degenerate triangle (area < {_DEGENERATE_AREA} mm^2) at face {int(np.flatnonzero(bad)[0])}")
    f = mesh.faces
    ij, jk, ki = [], [], []
    weights = []
    # corner k is opposite edge (i, j); cot = dot(e1, e2) / |e1 x e2|
    for corner, (i, j) in enumerate([(1, 2), (2, 0), (0, 1)]):
        p = mesh.vertices[f[:, corner]]
        e1 = mesh.vertices[f[:, i]] - p
        e2 = mesh.vertices[f[:, j]] - p
        cross = np.linalg.norm(np.cross(e1, e2), axis=1)
        cot = np.einsum("ij,ij->i", e1, e2) / np.maximum(cross, 1e-300)
        weights.append(np.maximum(cot, 0.0) * 0.5)
        ij.append(f[:, i])
        jk.append(f[:, j])
    return np.concatenate(ij), np.concatenate(jk), np.concatenate(weights)


def build_laplacian(mesh: TriMesh):
    """Cotangent stiffness matrix and lumped (barycentric) mass matrix.

    Returns
    -------
    stiffness : (V, V) csr_matrix
        Symmetric positive semi-definite, zero row sums, negative
        off-diagonal entries.
    mass : (V,) ndarray
        Per-vertex lumped areas (one third of incident face areas).
    """
    n = mesh.n_vertices
    i, j, w = cotangent_edge_weights(mesh)
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([j, i, i, j])
    vals = np.concatenate([-w, -w, w, w])
    stiffness = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    stiffness.sum_duplicates()

    areas = mesh.face_areas()
    mass = np.zeros(n)
    np.add.at(mass, mesh.faces.ravel(), np.repeat(areas / 3.0, 3))
    if (mass <= 0.0).any():
        raise MeshError("vertex with zero lumped area")
    return stiffness, mass


@dataclass
class SpectralBasis:
    """Low-frequency Laplace-Beltrami eigenbasis of a mesh.

    ``eigenfunctions[:, k]`` is the k-th mode, mass-orthonormal:
    phi_i^T M phi_j = delta_ij. Eigenvalues ascend and eigenvalue[0] is the
    (numerically) zero constant mode.
    """

    eigenvalues: np.ndarray  # (E,)
    eigenfunctions: np.ndarray  # (V, E)
    mass: np.ndarray  # (V,) lumped areas

    @property
    def count(self) -> int:
        return len(self.eigenvalues)


def _m_orthonormalize(x: np.ndarray, m_diag: np.ndarray) -> np.ndarray:
    # Cholesky-QR in the M inner product, applied twice for stability.
    for _ in range(2):
        g = x.T @ (x * m_diag[:, None])
        chol = np.linalg.cholesky(g)
        x = solve_triangular(chol, x.T, lower=True).T
    return x


def compute_basis(stiffness, mass, count: int) -> SpectralBasis:
    """First ``count`` generalized eigenpairs of (stiffness, mass).

    Deterministic shift-invert subspace iteration with Rayleigh-Ritz
    extraction. The iteration block carries 8 guard vectors beyond ``count``
    so that eigenvalue clusters at the subspace boundary still converge. The
    start block is the all-ones vector followed by discrete cosine vectors,
    Gram-Schmidt orthonormalized in the M inner product; no randomness is
    involved, so repeated calls are bitwise identical.
    """
    mass = np.asarray(mass, dtype=np.float64)
    if mass.ndim == 2:
        mass = np.asarray(mass.diagonal()).ravel() if sparse.issparse(mass) else np.diag(mass)
    n = stiffness.shape[0]
    if count < 1 or count > n:
        raise MeshError(f"eigen count {count} out of range [1, {n}]")

    q = min(n, count + 8)
    lam_scale = stiffness.diagonal().sum() / mass.sum()
    sigma = 1e-8 * max(lam_scale, 1e-30)
    m_mat = sparse.diags(mass)
    lu = splu((stiffness + sigma * m_mat).tocsc())

    idx = np.arange(n)
    x = np.empty((n, q))
    x[:, 0] = 1.0
    for k in range(1, q):
        x[:, k] = np.cos(np.pi * k * (idx + 0.5) / n)
    x = _m_orthonormalize(x, mass)

    cap = int(math.ceil(10 * count * math.log(max(n, 3))))
    theta = np.zeros(q)
    for iteration in range(1, cap + 1):
        y = lu.solve(x * mass[:, None])
        y = _m_orthonormalize(y, mass)
        s = y.T @ (stiffness @ y)
        theta, u = eigh((s + s.T) * 0.5)
        x = y @ u
        lead = x[:, :count]
        resid = stiffness @ lead - (lead * mass[:, None]) * theta[:count]
        res_norms = np.linalg.norm(resid, axis=0)
        if (res_norms <= 1e-8 * (1.0 + np.abs(theta[:count]))).all():
            break
    else:
        raise SolverError(
            f"eigensolver did not converge within {cap} iterations "
            f"(worst residual {res_norms.max():.3e})",
            iterations=cap,
        )

    eigenvalues = theta[:count].copy()
    if eigenvalues[0] < -1e-6 * (1.0 + abs(eigenvalues[-1])):
        raise NumericError(f"negative leading eigenvalue {eigenvalues[0]}")
    eigenvalues[eigenvalues < 0.0] = 0.0

    funcs = x[:, :count].copy()
    for k in range(count):
        col = funcs[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-8 * np.abs(col).max())
        if len(nz) and col[nz[0]] < 0:
            funcs[:, k] = -col
    return SpectralBasis(eigenvalues=eigenvalues, eigenfunctions=funcs, mass=mass)


def eval_basis_at(basis: SpectralBasis, mesh: TriMesh, ref: SurfacePointRef) -> np.ndarray:
    """Eigenfunction values at a surface point by barycentric interpolation."""
    tri = mesh.faces[ref.face]
    w = np.asarray(ref.barycentric)
    return w @ basis.eigenfunctions[tri]


# --------------------------------------------------------------------------
# Closest-point queries
# --------------------------------------------------------------------------


def _closest_on_all_faces(query: np.ndarray, a, b, c):
    """Closest point to ``query`` on each triangle (a, b, c); returns (points, bary)."""
    ab = b - a
    ac = c - a
    ap = query - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = query - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = query - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom

    n = len(a)
    bary = np.empty((n, 3))
    bary[:, 0] = 1.0 - v_in - w_in
    bary[:, 1] = v_in
    bary[:, 2] = w_in

    def assign(mask, u, v, w):
        bary[mask, 0] = u if np.isscalar(u) else u[mask]
        bary[mask, 1] = v if np.isscalar(v) else v[mask]
        bary[mask, 2] = w if np.isscalar(w) else w[mask]

    m_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    assign(m_bc, 0.0, 1.0 - w_bc, w_bc)
    m_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    assign(m_ac, 1.0 - w_ac, 0.0, w_ac)
    m_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    assign(m_ab, 1.0 - v_ab, v_ab, 0.0)
    m_c = (d6 >= 0) & (d5 <= d6)
    assign(m_c, 0.0, 0.0, 1.0)
    m_b = (d3 >= 0) & (d4 <= d3)
    assign(m_b, 0.0, 1.0, 0.0)
    m_a = (d1 <= 0) & (d2 <= 0)
    assign(m_a, 1.0, 0.0, 0.0)

    bary = np.clip(bary, 0.0, 1.0)
    bary /= bary.sum(axis=1, keepdims=True)
    points = bary[:, 0:1] * a + bary[:, 1:2] * b + bary[:, 2:3] * c
    return points, bary


def closest_point(mesh: TriMesh, query) -> tuple[SurfacePointRef, float]:
    """Exact closest surface point to ``query`` over all faces."""
    query = np.asarray(query, dtype=np.float64)
    a, b, c = mesh.face_corners()
    points, bary = _closest_on_all_faces(query, a, b, c)
    dist2 = np.einsum("ij,ij->i", points - query, points - query)
    best = int(np.argmin(dist2))
    ref = SurfacePointRef(best, tuple(bary[best]))
    return ref, float(math.sqrt(dist2[best]))


def closest_points(mesh: TriMesh, queries) -> tuple[list[SurfacePointRef], np.ndarray]:
    """Vectorized closest-point lookup for many queries."""
    queries = np.asarray(queries, dtype=np.float64)
    a, b, c = mesh.face_corners()
    refs, dists = [], np.empty(len(queries))
    for k, q in enumerate(queries):
        points, bary = _closest_on_all_faces(q, a, b, c)
        dist2 = np.einsum("ij,ij->i", points - q, points - q)
        best = int(np.argmin(dist2))
        refs.append(SurfacePointRef(best, tuple(bary[best])))
        dists[k] = math.sqrt(dist2[best])
    return refs, dists


def project_points_to_surface(mesh: TriMesh, queries) -> np.ndarray:
    """Positions of the closest surface points for many queries."""
    refs, _ = closest_points(mesh, queries)
    return np.array([r.position(mesh) for r in refs])


# --------------------------------------------------------------------------
# Similarity and rigid alignment
# --------------------------------------------------------------------------


def similarity_align(source, target):
    """Least-squares similarity transform: min sum ||s R x_i + t - y_i||^2.

    Returns (scale, rotation, translation) with a proper rotation
    (det = +1) even when the point sets are related by a reflection.
    Raises ``DegenerateGeometryError`` for fewer than 3 points or a
    collinear/coincident source.
    """
    x = np.asarray(source, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise DegenerateGeometryError(f"point sets must both be (k, 3), got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise DegenerateGeometryError("similarity alignment needs at least 3 points")

    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    dx = x - mu_x
    dy = y - mu_y
    cov = dy.T @ dx / len(x)
    u, d, vt = np.linalg.svd(cov)
    if d[0] <= 0.0 or d[1] <= 1e-12 * d[0]:
        raise DegenerateGeometryError("source points are coincident or collinear")

    s = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2] = -1.0
    rotation = u @ np.diag(s) @ vt
    var_x = (dx**2).sum() / len(x)
    scale = float((d * s).sum() / var_x)
    if scale <= 0.0:
        raise DegenerateGeometryError("non-positive similarity scale")
    translation = mu_y - scale * rotation @ mu_x
    return scale, rotation, translation


def rigid_align(source, target):
    """Least-squares rigid transform (rotation, translation), scale fixed to 1."""
    x = np.asarray(source, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    cov = (y - mu_y).T @ (x - mu_x)
    u, d, vt = np.linalg.svd(cov)
    s = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2] = -1.0
    rotation = u @ np.diag(s) @ vt
    translation = mu_y - rotation @ mu_x
    return rotation, translation


# --------------------------------------------------------------------------
# Procedural primitives (shared by tests and the synthetic generator)
# --------------------------------------------------------------------------


def icosahedron() -> TriMesh:
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    return TriMesh(verts, faces)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron projected onto a sphere (deterministic ordering)."""
    mesh = icosahedron()
    verts = [v for v in mesh.vertices]
    faces = mesh.faces.tolist()
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def midpoint_index(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                midpoint[key] = len(verts)
                verts.append(m)
            return midpoint[key]

        new_faces = []
        for i, j, k in faces:
            ij = midpoint_index(i, j)
            jk = midpoint_index(j, k)
            ki = midpoint_index(k, i)
            new_faces.extend([[i, ij, ki], [j, jk, ij], [k, ki, jk], [ij, jk, ki]])
        faces = new_faces
    return TriMesh(np.array(verts) * radius, faces)
