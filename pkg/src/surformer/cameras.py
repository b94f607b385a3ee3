"""Pinhole cameras, the 15-view capture dome, projection and DLT triangulation.

The dome is a gyroelongated pentagonal pyramid with equilateral faces of
edge 400 mm: a pentagonal antiprism (10 triangular side faces) capped by a
pentagonal pyramid (5 faces). One camera sits at each face centroid and
looks at the dome center, so every optical axis passes through the origin
exactly. Lens distortion is not modeled.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DegenerateGeometryError, MeshError

DOME_EDGE_MM = 400.0
DOME_FACE_COUNT = 15


class BehindCameraError(DegenerateGeometryError):
    """Point has non-positive depth in the camera frame."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``rotation`` maps world to camera coordinates:
    x_cam = rotation @ x_world + translation, with z the optical axis."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,) mm
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise DataError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DataError(f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}")
        r = self.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0:
            raise DataError("rotation must be orthonormal with det +1")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix mapping homogeneous world points to homogeneous pixels."""
        k = np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])
        return k @ np.hstack([self.rotation, self.translation[:, None]])


def project(camera: Camera, point) -> np.ndarray:
    """Project a world point to pixel coordinates (u, v)."""
    cam = camera.to_camera(np.asarray(point, dtype=np.float64))
    if cam[2] <= 1e-12:
        raise BehindCameraError(f"point has non-positive depth {cam[2]:.3g}")
    return np.array([camera.fx * cam[0] / cam[2] + camera.cx,
                     camera.fy * cam[1] / cam[2] + camera.cy])


def project_many(camera: Camera, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns (pixels (n, 2), depths (n,)).

    Rows with non-positive depth carry NaN pixels; callers decide how to
    treat them (the silhouette loss applies its behind-camera penalty).
    """
    cam = camera.to_camera(points)
    z = cam[:, 2]
    valid = z > 1e-12
    pixels = np.full((len(cam), 2), np.nan)
    pixels[valid, 0] = camera.fx * cam[valid, 0] / z[valid] + camera.cx
    pixels[valid, 1] = camera.fy * cam[valid, 1] / z[valid] + camera.cy
    return pixels, z


def triangulate(cameras: list[Camera], pixels) -> tuple[np.ndarray, float]:
    """DLT least-squares triangulation from >= 2 views.

    Returns the 3D point (mm) and the RMS reprojection error in pixels
    (infinite if the solution lies behind any view, which rejects the
    candidate in downstream matching).
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(cameras) < 2 or len(pixels) != len(cameras):
        raise DegenerateGeometryError(f"need >= 2 matched views, got {len(cameras)} cameras, {len(pixels)} pixels")
    rows = []
    for cam, (u, v) in zip(cameras, pixels):
        p = cam.projection_matrix()
        rows.append(u * p[2] - p[0])
        rows.append(v * p[2] - p[1])
    a = np.array(rows)
    _, s, vt = np.linalg.svd(a)
    if s[2] <= 1e-10 * s[0]:
        raise DegenerateGeometryError("rank-deficient triangulation system (parallel or coincident rays)")
    hom = vt[-1]
    if abs(hom[3]) <= 1e-14 * np.abs(hom[:3]).max():
        raise DegenerateGeometryError("triangulated point at infinity")
    point = hom[:3] / hom[3]

    err2 = 0.0
    for cam, (u, v) in zip(cameras, pixels):
        try:
            proj = project(cam, point)
        except BehindCameraError:
            return point, math.inf
        err2 += float((proj[0] - u) ** 2 + (proj[1] - v) ** 2)
    return point, math.sqrt(err2 / len(cameras))


# --------------------------------------------------------------------------
# Dome rig
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DomeRig:
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        if len(self.cameras) != DOME_FACE_COUNT:
            raise DataError(f"dome rig must have exactly {DOME_FACE_COUNT} cameras, got {len(self.cameras)}")

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, i) -> Camera:
        return self.cameras[i]


def gyroelongated_pyramid_vertices(edge: float = DOME_EDGE_MM) -> np.ndarray:
    """Vertices of the equilateral gyroelongated pentagonal pyramid (J11).

    Layout: bottom pentagon ring (5), top pentagon ring rotated 36 deg (5),
    apex above the top ring. Centered at the vertex centroid.
    """
    ring_radius = edge / (2.0 * math.sin(math.pi / 5.0))
    antiprism_height = math.sqrt(edge**2 - 2.0 * ring_radius**2 * (1.0 - math.cos(math.pi / 5.0)))
    apex_height = math.sqrt(edge**2 - ring_radius**2)

    verts = []
    for k in range(5):
        a = 2.0 * math.pi * k / 5.0
        verts.append([ring_radius * math.cos(a), ring_radius * math.sin(a), -antiprism_height / 2.0])
    for k in range(5):
        a = 2.0 * math.pi * k / 5.0 + math.pi / 5.0
        verts.append([ring_radius * math.cos(a), ring_radius * math.sin(a), antiprism_height / 2.0])
    verts.append([0.0, 0.0, antiprism_height / 2.0 + apex_height])
    verts = np.array(verts)
    return verts - verts.mean(axis=0)


def gyroelongated_pyramid_faces() -> list[list[int]]:
    faces = []
    for k in range(5):
        nk = (k + 1) % 5
        faces.append([k, nk, 5 + k])       # antiprism, base-edge triangles
        faces.append([5 + k, 5 + nk, nk])  # antiprism, top-edge triangles
    for k in range(5):
        faces.append([5 + k, 5 + (k + 1) % 5, 10])  # pyramid cap
    return faces


def look_at_origin(position: np.ndarray) -> np.ndarray:
    """World-to-camera rotation for a camera at ``position`` looking at the origin.

    Camera convention: x right, y down, z forward (optical axis).
    """
    forward = -position / np.linalg.norm(position)
    up_hint = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up_hint) > 0.99:
        up_hint = np.array([1.0, 0.0, 0.0])
    right = np.cross(up_hint, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.array([right, down, forward])


def build_dome_rig(focal: float, image_size: tuple[int, int] = (256, 256),
                   edge: float = DOME_EDGE_MM) -> DomeRig:
    """Rig with one camera per face centroid, all aimed at the origin."""
    if focal <= 0:
        raise DataError(f"focal must be positive, got {focal}")
    width, height = image_size
    verts = gyroelongated_pyramid_vertices(edge)
    cameras = []
    for face in gyroelongated_pyramid_faces():
        centroid = verts[face].mean(axis=0)
        rotation = look_at_origin(centroid)
        translation = -rotation @ centroid
        cameras.append(Camera(fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                              rotation=rotation, translation=translation,
                              width=width, height=height))
    return DomeRig(cameras=tuple(cameras))


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def camera_to_dict(camera: Camera) -> dict:
    return {
        "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
        "rotation": [float(x) for x in camera.rotation.ravel()],  # row-major 3x3
        "translation": [float(x) for x in camera.translation],
        "width": camera.width, "height": camera.height,
    }


def camera_from_dict(d: dict) -> Camera:
    return Camera(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                  rotation=np.array(d["rotation"]).reshape(3, 3),
                  translation=np.array(d["translation"]),
                  width=int(d["width"]), height=int(d["height"]))


def save_rig(rig: DomeRig, path):
    doc = {"schemaVersion": 1, "cameras": [camera_to_dict(c) for c in rig.cameras]}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_rig(path) -> DomeRig:
    doc = json.loads(Path(path).read_text())
    return DomeRig(cameras=tuple(camera_from_dict(d) for d in doc["cameras"]))
