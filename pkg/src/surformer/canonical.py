"""Shared canonical body surface: construction, normalization, serialization.

One individual's reference-pose mesh becomes the canonical surface. Its own
markers map onto it by closest point; every other individual's reference
capture is first similarity-aligned on the keypoints (the recovered scale
becomes that individual's alpha), then the canonical mesh is deformed onto
the aligned marker cloud with keypoints as hard ARAP constraints, and the
markers are mapped by closest point on the deformed copy. Because the
deformed copy shares the canonical topology, the resulting (face,
barycentric) anchors live on the canonical surface itself. Anchors from
different individuals are never merged: the anchor set is the plain union.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .arap import ArapConfig, arap_align_to_target
from .data import K_KEYPOINTS, NOSE, TAIL_BASE, RawFrame, dump_json
from .errors import DataError
from .mesh import (SpectralBasis, SurfacePointRef, TriMesh, anchor_matrix,
                   build_laplacian, closest_points, compute_basis, similarity_align)

MARKER_OUTLIER_FRACTION = 0.10  # of body length; reference markers farther off are rejected


@dataclass
class MarkerRegistry:
    """Maps each individual's local marker IDs to canonical anchor indices."""

    mapping: dict[str, dict[int, int]]
    total: int

    def validate(self):
        seen = {}
        for name, local in self.mapping.items():
            if len(set(local.values())) != len(local):
                raise DataError(f"registry for '{name}' is not injective")
            for lid, cid in local.items():
                if not (0 <= cid < self.total):
                    raise DataError(f"canonical index {cid} out of range")
                if cid in seen:
                    raise DataError(f"canonical index {cid} claimed twice")
                seen[cid] = (name, lid)
        if len(seen) != self.total:
            raise DataError(f"{self.total - len(seen)} canonical indices unclaimed")

    def anchor_indices(self, individual: str) -> np.ndarray:
        local = self.mapping[individual]
        return np.array([local[k] for k in sorted(local)], dtype=np.int64)


@dataclass
class CanonicalSurface:
    """Normalized reference mesh with keypoint and surface anchors."""

    mesh: TriMesh  # vertices within [-1, 1]
    keypoint_anchors: list[SurfacePointRef]  # K, snapped to vertices
    keypoint_vertices: np.ndarray  # (K,)
    surface_anchors: list[SurfacePointRef]  # N
    basis: SpectralBasis
    scale: float  # world = normalized * scale + translation
    translation: np.ndarray
    _surface_matrix: sparse.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.keypoint_anchors) != K_KEYPOINTS:
            raise DataError(f"expected {K_KEYPOINTS} keypoint anchors, got {len(self.keypoint_anchors)}")
        if np.abs(self.mesh.vertices).max() > 1.0 + 1e-9:
            raise DataError("canonical mesh is not normalized to [-1, 1]")

    @property
    def anchor_count(self) -> int:
        return len(self.surface_anchors)

    @property
    def surface_matrix(self) -> sparse.csr_matrix:
        if self._surface_matrix is None:
            self._surface_matrix = anchor_matrix(self.mesh, self.surface_anchors)
        return self._surface_matrix

    def keypoint_positions(self) -> np.ndarray:
        return self.mesh.vertices[self.keypoint_vertices]

    def anchor_positions(self) -> np.ndarray:
        return self.surface_matrix @ self.mesh.vertices

    def anchor_eigen_values(self, refs: list[SurfacePointRef]) -> np.ndarray:
        """Eigenfunction values at the given anchors, (n, E)."""
        mat = anchor_matrix(self.mesh, refs)
        return mat @ self.basis.eigenfunctions


def _snap_to_vertex(mesh: TriMesh, ref: SurfacePointRef) -> tuple[SurfacePointRef, int]:
    corner = int(np.argmax(ref.barycentric))
    vertex = int(mesh.faces[ref.face][corner])
    weights = [0.0, 0.0, 0.0]
    weights[corner] = 1.0
    return SurfacePointRef(ref.face, tuple(weights)), vertex


def normalize_canonical(mesh: TriMesh, keypoint_vertices, surface_anchors,
                        eigen_count: int = 16) -> CanonicalSurface:
    """Center the mesh at its vertex centroid and scale the largest absolute
    coordinate to 1; anchors keep their barycentric coordinates. The stored
    (scale, translation) invert the map: world = normalized * scale + translation.
    """
    centroid = mesh.vertices.mean(axis=0)
    centered = mesh.vertices - centroid
    scale = float(np.abs(centered).max())
    if scale <= 0.0:
        raise DataError("cannot normalize a zero-extent mesh")
    normalized = TriMesh(centered / scale, mesh.faces, validate=False)
    stiffness, mass = build_laplacian(normalized)
    basis = compute_basis(stiffness, mass, eigen_count)

    keypoint_vertices = np.asarray(keypoint_vertices, dtype=np.int64)
    keypoint_anchors = []
    for v in keypoint_vertices:
        face = int(np.flatnonzero((normalized.faces == v).any(axis=1))[0])
        corner = int(np.flatnonzero(normalized.faces[face] == v)[0])
        weights = [0.0, 0.0, 0.0]
        weights[corner] = 1.0
        keypoint_anchors.append(SurfacePointRef(face, tuple(weights)))

    return CanonicalSurface(
        mesh=normalized, keypoint_anchors=keypoint_anchors,
        keypoint_vertices=keypoint_vertices, surface_anchors=list(surface_anchors),
        basis=basis, scale=scale, translation=centroid,
    )


def build_canonical(reference_captures: dict[str, RawFrame], base_mesh: TriMesh,
                    base_individual: str, target_surfaces: dict[str, TriMesh] | None = None,
                    eigen_count: int = 16, arap_config: ArapConfig | None = None,
                    outer_iterations: int = 5,
                    ) -> tuple[CanonicalSurface, MarkerRegistry, dict[str, float]]:
    """Build the canonical surface, the marker registry and per-individual alphas.

    ``base_mesh`` must carry the base individual's reference-pose geometry in
    the same world frame as its capture. ``target_surfaces`` supplies each
    non-base individual's reference-pose surface (the visual-hull stand-in)
    as the soft ARAP target; individuals without one fall back to their
    marker cloud, which is markedly less accurate for sparse markers.
    """
    if base_individual not in reference_captures:
        raise DataError(f"base individual '{base_individual}' has no reference capture")
    base = reference_captures[base_individual]
    body_length = float(np.linalg.norm(base.keypoints[NOSE] - base.keypoints[TAIL_BASE]))
    if body_length <= 0:
        raise DataError("base capture has coincident nose and tail-base keypoints")

    kp_refs_raw, _ = closest_points(base_mesh, base.keypoints)
    keypoint_vertices = []
    for ref in kp_refs_raw:
        _, vertex = _snap_to_vertex(base_mesh, ref)
        keypoint_vertices.append(vertex)
    if len(set(keypoint_vertices)) != K_KEYPOINTS:
        raise DataError("two keypoints snapped to the same canonical vertex")
    keypoint_vertices = np.array(keypoint_vertices, dtype=np.int64)

    surface_anchors: list[SurfacePointRef] = []
    registry: dict[str, dict[int, int]] = {}
    alphas: dict[str, float] = {}

    def map_markers(mesh: TriMesh, points: np.ndarray, ids: np.ndarray, individual: str):
        refs, dists = closest_points(mesh, points)
        for lid, dist in zip(ids, dists):
            if dist > MARKER_OUTLIER_FRACTION * body_length:
                raise DataError(
                    f"marker {int(lid)} of '{individual}' lies {dist:.1f} mm from the aligned "
                    f"surface (> {MARKER_OUTLIER_FRACTION:.0%} of body length)")
        local_map = {}
        for lid, ref in zip(ids, refs):
            local_map[int(lid)] = len(surface_anchors)
            surface_anchors.append(ref)
        registry[individual] = local_map

    map_markers(base_mesh, base.marker_points, base.marker_ids, base_individual)
    alphas[base_individual] = 1.0

    target_surfaces = target_surfaces or {}
    for name in sorted(reference_captures):
        if name == base_individual:
            continue
        capture = reference_captures[name]
        s, rot, trans = similarity_align(capture.keypoints, base.keypoints)
        alphas[name] = 1.0 / s
        aligned_kps = capture.keypoints @ (s * rot).T + trans
        aligned_markers = capture.marker_points @ (s * rot).T + trans
        if name in target_surfaces:
            surf = target_surfaces[name]
            target = surf.with_vertices(surf.vertices @ (s * rot).T + trans)
        else:
            target = aligned_markers
        hard = {int(v): aligned_kps[i] for i, v in enumerate(keypoint_vertices)}
        result = arap_align_to_target(base_mesh, hard, target,
                                      outer_iterations=outer_iterations, config=arap_config)
        deformed = base_mesh.with_vertices(result.positions)
        map_markers(deformed, aligned_markers, capture.marker_ids, name)

    canonical = normalize_canonical(base_mesh, keypoint_vertices, surface_anchors, eigen_count)
    marker_registry = MarkerRegistry(mapping=registry, total=len(surface_anchors))
    marker_registry.validate()
    return canonical, marker_registry, alphas


# --------------------------------------------------------------------------
# Serialization: one JSON document referencing an OBJ mesh file
# --------------------------------------------------------------------------


def save_canonical(path, canonical: CanonicalSurface, registry: MarkerRegistry,
                   alphas: dict[str, float]):
    path = Path(path)
    mesh_rel = path.stem + ".obj"
    canonical.mesh.save(path.parent / mesh_rel)
    doc = {
        "schemaVersion": 1,
        "mesh": mesh_rel,
        "eigenCount": canonical.basis.count,
        "scale": canonical.scale,
        "translation": canonical.translation,
        "keypointVertices": canonical.keypoint_vertices,
        "keypointAnchors": [[r.face, list(r.barycentric)] for r in canonical.keypoint_anchors],
        "surfaceAnchors": [[r.face, list(r.barycentric)] for r in canonical.surface_anchors],
        "registry": {name: {str(k): v for k, v in local.items()}
                     for name, local in registry.mapping.items()},
        "alphas": alphas,
    }
    dump_json(doc, path)


def load_canonical(path) -> tuple[CanonicalSurface, MarkerRegistry, dict[str, float]]:
    path = Path(path)
    doc = json.loads(path.read_text())
    mesh = TriMesh.load(path.parent / doc["mesh"])
    stiffness, mass = build_laplacian(mesh)
    basis = compute_basis(stiffness, mass, int(doc["eigenCount"]))
    canonical = CanonicalSurface(
        mesh=mesh,
        keypoint_anchors=[SurfacePointRef(int(f), tuple(b)) for f, b in doc["keypointAnchors"]],
        keypoint_vertices=np.array(doc["keypointVertices"], dtype=np.int64),
        surface_anchors=[SurfacePointRef(int(f), tuple(b)) for f, b in doc["surfaceAnchors"]],
        basis=basis, scale=float(doc["scale"]),
        translation=np.array(doc["translation"], dtype=np.float64),
    )
    registry = MarkerRegistry(
        mapping={name: {int(k): int(v) for k, v in local.items()}
                 for name, local in doc["registry"].items()},
        total=len(canonical.surface_anchors))
    registry.validate()
    alphas = {name: float(a) for name, a in doc["alphas"].items()}
    return canonical, registry, alphas
