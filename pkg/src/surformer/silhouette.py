"""Silhouette masks: rasterization, signed distance fields, and penalties.

A mask stores the binary body region (1 = inside) together with a signed
Euclidean distance raster in pixels, negative inside. The distance field
uses the half-pixel convention (inside boundary pixels sit at -0.5, outside
neighbours at +0.5) so the zero level set tracks the region boundary to
within the rasterization tolerance of 0.71 px.

Two penalties are exposed: the hard variant is the literal outside-count
indicator, the soft variant is the clamped signed distance (bilinearly
interpolated, 1-Lipschitz) that supplies gradients for optimization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cameras import Camera
from .errors import DataError
from .mesh import TriMesh


class EmptyMaskError(DataError):
    """Rasterization produced no covered pixels (mesh behind the camera)."""


@dataclass
class SilhouetteMask:
    inside: np.ndarray  # (H, W) bool, True inside the body region
    distance: np.ndarray  # (H, W) float64, signed px, negative inside

    def __post_init__(self):
        if self.inside.shape != self.distance.shape:
            raise DataError("inside/distance rasters differ in shape")

    @property
    def height(self) -> int:
        return self.inside.shape[0]

    @property
    def width(self) -> int:
        return self.inside.shape[1]


def signed_distance_field(inside: np.ndarray) -> np.ndarray:
    """Signed Euclidean distance in pixels from the region boundary."""
    inside = inside.astype(bool)
    d_in = ndimage.distance_transform_edt(inside)
    d_out = ndimage.distance_transform_edt(~inside)
    return np.where(inside, 0.5 - d_in, d_out - 0.5)


def mask_from_binary(inside: np.ndarray) -> SilhouetteMask:
    return SilhouetteMask(inside=inside.astype(bool), distance=signed_distance_field(inside))


def rasterize_silhouette(camera: Camera, mesh: TriMesh) -> SilhouetteMask:
    """Binary union of the projected triangles, plus its signed distance field.

    Pixel (v, u) is covered when its center lies inside a projected triangle.
    Triangles with any vertex at non-positive depth are skipped; if nothing
    rasterizes, the mesh is behind the camera and ``EmptyMaskError`` is raised.
    """
    h, w = camera.height, camera.width
    cam = camera.to_camera(mesh.vertices)
    z = cam[:, 2]
    valid = z > 1e-9
    uv = np.full((len(cam), 2), np.nan)
    uv[valid, 0] = camera.fx * cam[valid, 0] / z[valid] + camera.cx
    uv[valid, 1] = camera.fy * cam[valid, 1] / z[valid] + camera.cy

    inside = np.zeros((h, w), dtype=bool)
    tri_ok = valid[mesh.faces].all(axis=1)
    for face in mesh.faces[tri_ok]:
        p0, p1, p2 = uv[face]
        lo_u = max(int(math.floor(min(p0[0], p1[0], p2[0]))), 0)
        hi_u = min(int(math.ceil(max(p0[0], p1[0], p2[0]))), w - 1)
        lo_v = max(int(math.floor(min(p0[1], p1[1], p2[1]))), 0)
        hi_v = min(int(math.ceil(max(p0[1], p1[1], p2[1]))), h - 1)
        if lo_u > hi_u or lo_v > hi_v:
            continue
        us = np.arange(lo_u, hi_u + 1)
        vs = np.arange(lo_v, hi_v + 1)
        gu, gv = np.meshgrid(us, vs)
        e0 = (p1[0] - p0[0]) * (gv - p0[1]) - (p1[1] - p0[1]) * (gu - p0[0])
        e1 = (p2[0] - p1[0]) * (gv - p1[1]) - (p2[1] - p1[1]) * (gu - p1[0])
        e2 = (p0[0] - p2[0]) * (gv - p2[1]) - (p0[1] - p2[1]) * (gu - p2[0])
        eps = 1e-9
        covered = ((e0 >= -eps) & (e1 >= -eps) & (e2 >= -eps)) | ((e0 <= eps) & (e1 <= eps) & (e2 <= eps))
        inside[lo_v : hi_v + 1, lo_u : hi_u + 1] |= covered

    if not inside.any():
        raise EmptyMaskError("mesh projects to an empty mask (behind the camera or out of frame)")
    return mask_from_binary(inside)


# --------------------------------------------------------------------------
# Penalties
# --------------------------------------------------------------------------


def hard_penalty(mask: SilhouetteMask, pixels) -> np.ndarray:
    """Literal outside-count indicator: 1 where the projection falls outside
    the body region (nearest-pixel lookup; off-image counts as outside)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    u = np.rint(pixels[:, 0]).astype(np.int64)
    v = np.rint(pixels[:, 1]).astype(np.int64)
    out = np.ones(len(pixels))
    in_frame = (u >= 0) & (u < mask.width) & (v >= 0) & (v < mask.height)
    out[in_frame] = (~mask.inside[v[in_frame], u[in_frame]]).astype(np.float64)
    return out


def soft_penalty(mask: SilhouetteMask, pixels) -> np.ndarray:
    pen, _ = soft_penalty_with_gradient(mask, pixels)
    return pen


def soft_penalty_with_gradient(mask: SilhouetteMask, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Clamped signed distance (px) at the pixels, with its (u, v) gradient.

    Off-image pixels are treated as outside: the penalty is the field value
    at the clamped location plus the Euclidean distance to it.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    field = mask.distance
    h, w = field.shape
    u = np.clip(pixels[:, 0], 0.0, w - 1.0)
    v = np.clip(pixels[:, 1], 0.0, h - 1.0)

    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2) if w > 1 else np.zeros(len(u), dtype=np.int64)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2) if h > 1 else np.zeros(len(v), dtype=np.int64)
    fu = u - u0
    fv = v - v0
    f00 = field[v0, u0]
    f01 = field[v0, u0 + 1] if w > 1 else f00
    f10 = field[v0 + 1, u0] if h > 1 else f00
    f11 = field[v0 + 1, u0 + 1] if w > 1 and h > 1 else f00
    value = (f00 * (1 - fu) * (1 - fv) + f01 * fu * (1 - fv)
             + f10 * (1 - fu) * fv + f11 * fu * fv)
    grad_u = (f01 - f00) * (1 - fv) + (f11 - f10) * fv
    grad_v = (f10 - f00) * (1 - fu) + (f11 - f01) * fu

    # off-image excess distance to the clamped sample location
    du = pixels[:, 0] - u
    dv = pixels[:, 1] - v
    excess = np.sqrt(du**2 + dv**2)
    value = value + excess
    nonzero = excess > 0
    grad_u = grad_u.copy()
    grad_v = grad_v.copy()
    grad_u[nonzero] = du[nonzero] / excess[nonzero]
    grad_v[nonzero] = dv[nonzero] / excess[nonzero]

    pen = np.maximum(value, 0.0)
    gate = (value > 0.0).astype(np.float64)
    grad = np.stack([grad_u * gate, grad_v * gate], axis=1)
    return pen, grad


# --------------------------------------------------------------------------
# PGM I/O (for inspection; deterministic bytes)
# --------------------------------------------------------------------------


def save_pgm(mask: SilhouetteMask, path):
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    body = np.where(mask.inside, 255, 0).astype(np.uint8).tobytes()
    Path(path).write_bytes(header + body)


def load_pgm(path) -> SilhouetteMask:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise DataError(f"{path} is not a binary PGM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, _ = fields
    data = np.frombuffer(raw[pos : pos + width * height], dtype=np.uint8).reshape(height, width)
    return mask_from_binary(data > 127)
