"""As-rigid-as-possible mesh deformation with hard and soft constraints.

Local step: per-vertex rotation fit via SVD polar decomposition (reflection
corrected). Global step: sparse symmetric solve over the cotangent Laplacian
with hard constraints eliminated by substitution and soft constraints as a
diagonal penalty. The alternation is monotone in the combined objective
(ARAP energy plus soft penalty), which is what ``energies`` records.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .errors import MeshError, NumericError, SolverError
from .mesh import TriMesh, build_laplacian, closest_points, rigid_align


@dataclass
class ArapConstraints:
    """Positional constraints: hard (exact) and soft (penalty-weighted).

    ``hard`` maps vertex index to target position; ``soft`` maps vertex index
    to (target, weight >= 0). The two index sets must be disjoint.
    """

    hard: dict[int, np.ndarray] = field(default_factory=dict)
    soft: dict[int, tuple[np.ndarray, float]] = field(default_factory=dict)

    def validate(self, n_vertices: int):
        overlap = set(self.hard) & set(self.soft)
        if overlap:
            raise MeshError(f"hard and soft constraints overlap at vertices {sorted(overlap)[:5]}")
        for idx in list(self.hard) + list(self.soft):
            if not (0 <= idx < n_vertices):
                raise MeshError(f"constraint vertex {idx} out of range [0, {n_vertices})")
        for t in self.hard.values():
            if not np.isfinite(t).all():
                raise NumericError("non-finite hard constraint target")
        for t, w in self.soft.values():
            if not np.isfinite(t).all() or not np.isfinite(w) or w < 0:
                raise NumericError("non-finite or negative soft constraint")
        any_soft = any(w > 0 for _, w in self.soft.values())
        if not self.hard and not any_soft:
            raise MeshError("need at least one hard constraint or a positive soft weight")


@dataclass
class ArapConfig:
    iterations: int = 10
    convergence_tol: float = 1e-4  # mm, max vertex displacement between iterations
    soft_weight_default: float = 1.0

    def validate(self):
        if self.iterations < 1:
            raise MeshError("iterations must be >= 1")
        if self.convergence_tol <= 0:
            raise MeshError("convergence_tol must be positive")


@dataclass
class ArapResult:
    positions: np.ndarray  # (V, 3)
    energies: list[float]  # combined objective after each local-global iteration
    iterations: int


class ArapSolver:
    """Reusable ARAP solver for one mesh and a fixed constraint structure.

    The reduced global system depends only on the mesh, the hard vertex set
    and the soft weights, so its sparse factorization is computed once and
    reused for every call with new targets (one factorization serves all
    frames of an individual).
    """

    def __init__(self, mesh: TriMesh, hard_vertices, soft_weights: dict[int, float] | None = None,
                 config: ArapConfig | None = None):
        self.mesh = mesh
        self.config = config or ArapConfig()
        self.config.validate()
        self.rest = mesh.vertices.copy()
        n = mesh.n_vertices

        self.hard_idx = np.asarray(sorted(hard_vertices), dtype=np.int64)
        soft_weights = soft_weights or {}
        self.soft_idx = np.asarray(sorted(soft_weights), dtype=np.int64)
        self.soft_w = np.array([soft_weights[i] for i in self.soft_idx], dtype=np.float64)

        stiffness, _ = build_laplacian(mesh)
        self.laplacian = stiffness.tocsr()

        # directed edge arrays for the local step and the energy
        coo = sparse.triu(-stiffness, k=1).tocoo()
        keep = coo.data > 0
        src = np.concatenate([coo.row[keep], coo.col[keep]])
        dst = np.concatenate([coo.col[keep], coo.row[keep]])
        self.edge_src = src
        self.edge_dst = dst
        self.edge_w = np.concatenate([coo.data[keep], coo.data[keep]])
        self.edge_rest = self.rest[src] - self.rest[dst]

        free = np.ones(n, dtype=bool)
        free[self.hard_idx] = False
        self.free_idx = np.flatnonzero(free)
        self._pos_in_free = -np.ones(n, dtype=np.int64)
        self._pos_in_free[self.free_idx] = np.arange(len(self.free_idx))

        a_ff = self.laplacian[self.free_idx][:, self.free_idx].tolil()
        soft_free = self._pos_in_free[self.soft_idx]
        if (soft_free < 0).any():
            raise MeshError("soft constraint on a hard-constrained vertex")
        # the directed ARAP energy counts every edge twice, so its gradient
        # carries a factor 2 relative to the soft penalty; halving the soft
        # diagonal makes the global solve the exact minimizer of
        # E_arap + sum w_s ||p - t||^2
        for pos, w in zip(soft_free, self.soft_w):
            a_ff[pos, pos] += 0.5 * w
        self._a_fc = self.laplacian[self.free_idx][:, self.hard_idx].tocsr()
        try:
            self._lu = splu(a_ff.tocsc())
        except RuntimeError as exc:
            raise SolverError(f"singular global system (fully unconstrained region): {exc}") from exc

    def _rotations(self, positions: np.ndarray) -> np.ndarray:
        edge_cur = positions[self.edge_src] - positions[self.edge_dst]
        outer = self.edge_w[:, None, None] * self.edge_rest[:, :, None] * edge_cur[:, None, :]
        s = np.zeros((self.mesh.n_vertices, 3, 3))
        np.add.at(s, self.edge_src, outer)
        u, _, vh = np.linalg.svd(s)
        det = np.linalg.det(np.matmul(u, vh))
        v = vh.transpose(0, 2, 1)
        v[:, :, 2] *= np.where(det < 0.0, -1.0, 1.0)[:, None]
        return np.matmul(v, u.transpose(0, 2, 1))

    def _energy(self, positions, rotations, soft_targets) -> float:
        edge_cur = positions[self.edge_src] - positions[self.edge_dst]
        rotated = np.einsum("dij,dj->di", rotations[self.edge_src], self.edge_rest)
        e = float((self.edge_w * ((edge_cur - rotated) ** 2).sum(axis=1)).sum())
        if len(self.soft_idx):
            gap = positions[self.soft_idx] - soft_targets
            e += float((self.soft_w * (gap**2).sum(axis=1)).sum())
        return e

    def solve(self, hard_targets: np.ndarray | None = None,
              soft_targets: np.ndarray | None = None,
              initial: np.ndarray | None = None) -> ArapResult:
        """Run the local-global alternation for the given targets.

        ``hard_targets`` rows correspond to the sorted hard vertex set,
        ``soft_targets`` to the sorted soft vertex set.
        """
        hard_targets = np.zeros((0, 3)) if hard_targets is None else np.asarray(hard_targets, dtype=np.float64)
        soft_targets = np.zeros((0, 3)) if soft_targets is None else np.asarray(soft_targets, dtype=np.float64)
        if hard_targets.shape != (len(self.hard_idx), 3):
            raise MeshError(f"expected {len(self.hard_idx)} hard targets, got {hard_targets.shape}")
        if soft_targets.shape != (len(self.soft_idx), 3):
            raise MeshError(f"expected {len(self.soft_idx)} soft targets, got {soft_targets.shape}")
        if not (np.isfinite(hard_targets).all() and np.isfinite(soft_targets).all()):
            raise NumericError("non-finite constraint targets")

        if initial is not None:
            positions = np.array(initial, dtype=np.float64)
        else:
            positions = self._initial_guess(hard_targets, soft_targets)
        positions[self.hard_idx] = hard_targets

        energies = []
        iterations = 0
        for iterations in range(1, self.config.iterations + 1):
            rotations = self._rotations(positions)
            rhs = self._global_rhs(rotations)
            rhs_f = rhs[self.free_idx]
            if len(self.hard_idx):
                rhs_f = rhs_f - self._a_fc @ hard_targets
            if len(self.soft_idx):
                soft_free = self._pos_in_free[self.soft_idx]
                rhs_f[soft_free] += 0.5 * self.soft_w[:, None] * soft_targets
            new_free = self._lu.solve(rhs_f)
            if not np.isfinite(new_free).all():
                raise NumericError("global ARAP solve produced non-finite positions")
            moved = 0.0
            if len(self.free_idx):
                moved = float(np.abs(new_free - positions[self.free_idx]).max())
            positions = positions.copy()
            positions[self.free_idx] = new_free
            energies.append(self._energy(positions, rotations, soft_targets))
            if moved < self.config.convergence_tol:
                break
        return ArapResult(positions=positions, energies=energies, iterations=iterations)

    def _global_rhs(self, rotations: np.ndarray) -> np.ndarray:
        r_sum = rotations[self.edge_src] + rotations[self.edge_dst]
        contrib = 0.5 * self.edge_w[:, None] * np.einsum("dij,dj->di", r_sum, self.edge_rest)
        rhs = np.zeros_like(self.rest)
        np.add.at(rhs, self.edge_src, contrib)
        return rhs

    def _initial_guess(self, hard_targets, soft_targets) -> np.ndarray:
        # best rigid fit of the constraints seeds the alternation; for exactly
        # rigid constraint sets this lands on the global optimum immediately
        idx = np.concatenate([self.hard_idx, self.soft_idx])
        targets = np.concatenate([hard_targets, soft_targets])
        if len(idx) >= 3:
            rotation, translation = rigid_align(self.rest[idx], targets)
            return self.rest @ rotation.T + translation
        return self.rest.copy()


def arap_deform(mesh: TriMesh, constraints: ArapConstraints, config: ArapConfig | None = None) -> ArapResult:
    """Deform ``mesh`` to satisfy the constraints as rigidly as possible."""
    config = config or ArapConfig()
    constraints.validate(mesh.n_vertices)
    soft_weights = {i: w for i, (_, w) in constraints.soft.items()}
    solver = ArapSolver(mesh, list(constraints.hard), soft_weights, config)
    hard_targets = np.array([constraints.hard[i] for i in solver.hard_idx], dtype=np.float64).reshape(-1, 3)
    soft_targets = np.array([constraints.soft[i][0] for i in solver.soft_idx], dtype=np.float64).reshape(-1, 3)
    return solver.solve(hard_targets, soft_targets)


@dataclass
class AlignResult:
    positions: np.ndarray
    soft_residuals: list[float]  # mean distance to soft targets per outer iteration


def arap_align_to_target(mesh: TriMesh, hard: dict[int, np.ndarray], target,
                         outer_iterations: int = 5, config: ArapConfig | None = None,
                         soft_weight: float | None = None) -> AlignResult:
    """Iteratively deform ``mesh`` onto ``target`` (a TriMesh or an (M, 3) cloud).

    Hard keypoint constraints are held exactly; every other vertex is pulled
    softly toward its closest point on the target, re-evaluated before each
    outer iteration.
    """
    if outer_iterations < 1:
        raise MeshError("outer_iterations must be >= 1")
    config = config or ArapConfig()
    weight = config.soft_weight_default if soft_weight is None else soft_weight
    constraints = ArapConstraints(hard=dict(hard))
    constraints.validate(mesh.n_vertices)

    soft_vertices = [i for i in range(mesh.n_vertices) if i not in constraints.hard]
    solver = ArapSolver(mesh, list(constraints.hard), {i: weight for i in soft_vertices}, config)
    hard_targets = np.array([hard[i] for i in solver.hard_idx], dtype=np.float64).reshape(-1, 3)

    if isinstance(target, TriMesh):
        def nearest(points):
            refs, dists = closest_points(target, points)
            return np.array([r.position(target) for r in refs]), dists
    else:
        cloud = np.asarray(target, dtype=np.float64)
        if cloud.ndim != 2 or cloud.shape[1] != 3:
            raise MeshError(f"point-cloud target must be (M, 3), got {cloud.shape}")
        tree = cKDTree(cloud)

        def nearest(points):
            dists, idx = tree.query(points)
            return cloud[idx], dists

    positions = mesh.vertices.copy()
    residuals = []
    for _ in range(outer_iterations):
        soft_targets, _ = nearest(positions[solver.soft_idx])
        result = solver.solve(hard_targets, soft_targets, initial=positions)
        positions = result.positions
        _, dists = nearest(positions[solver.soft_idx])
        residuals.append(float(dists.mean()))
    return AlignResult(positions=positions, soft_residuals=residuals)
