"""Procedural deformable-body generator: the ground-truth oracle.

Bodies are swept-ellipse capsules with a head bulge and four leg bulges,
deformed by a smooth skeleton (three spine joints, a head joint, four limb
swings) plus a global yaw and translation. Keypoints ride on fixed vertices
and markers on fixed barycentric attachments, so every emitted ground-truth
position is an exact function of the pose: an oracle predictor scores a
3D loss of exactly zero.

Determinism: every random draw flows from the master seed through a
documented splitmix64 stream split (one stream per individual's motion, one
per frame for observation noise, one per body for marker placement), so
regenerating a dataset is bitwise reproducible frame by frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cameras import DomeRig, project_many
from .data import (Dataset, Detection2D, IndividualInfo, K_KEYPOINTS, RawFrame)
from .errors import DataError
from .mesh import SurfacePointRef, TriMesh, anchor_matrix
from .silhouette import rasterize_silhouette

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One step of the splitmix64 sequence; used to derive sub-stream seeds."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def stream_seed(master: int, domain: int, index: int) -> int:
    """Seed for sub-stream ``index`` of ``domain`` under ``master``."""
    return splitmix64(splitmix64(master ^ (domain << 32)) ^ (index + 1))


_DOMAIN_MOTION = 1
_DOMAIN_FRAME = 2
_DOMAIN_MARKERS = 3


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one synthetic body."""

    name: str = "rat0"
    body_length: float = 250.0  # mm, nose to tail base
    girth_scale: float = 0.14  # max cross-section radius / body_length
    height_scale: float = 1.0  # multiplies the vertical semi-axis only
    marker_count: int = 20
    color_classes: int = 4
    seed: int = 0
    length_segments: int = 22
    ring_segments: int = 14

    def __post_init__(self):
        if self.body_length <= 0:
            raise DataError("body_length must be positive")
        if self.marker_count < 4:
            raise DataError("marker_count must be >= 4")
        if self.color_classes < 1:
            raise DataError("color_classes must be >= 1")


# joint placement along the axis (s in [0, 1], tail=0, nose=1)
_SPINE_JOINTS = (0.30, 0.50, 0.70)
_SPINE_WIDTH = 0.07
_HEAD_JOINT = 0.82
_HEAD_WIDTH = 0.05
_LEGS = (  # (s, theta) with theta measured from +y around the x axis; bottom = 3*pi/2
    (0.66, 3 * math.pi / 2 - 0.55),  # right front
    (0.66, 3 * math.pi / 2 + 0.55),  # left front
    (0.30, 3 * math.pi / 2 - 0.55),  # right back
    (0.30, 3 * math.pi / 2 + 0.55),  # left back
)
_LEG_BULGE = 0.45

POSE_LIMITS = {
    "spine": 0.5,  # rad per joint
    "head_yaw": 0.6,
    "head_pitch": 0.45,
    "limb": 0.6,
    "translation_xy": 20.0,  # mm
    "translation_z": 10.0,
}


@dataclass
class PoseParams:
    spine: np.ndarray = field(default_factory=lambda: np.zeros(3))  # yaw bends, rad
    head_yaw: float = 0.0
    head_pitch: float = 0.0
    limbs: np.ndarray = field(default_factory=lambda: np.zeros(4))  # swing, rad
    yaw: float = 0.0  # global heading
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time_index: int = 0

    def validate(self):
        if np.abs(self.spine).max(initial=0) > POSE_LIMITS["spine"] + 1e-9:
            raise DataError(f"spine bend exceeds limit {POSE_LIMITS['spine']}")
        if abs(self.head_yaw) > POSE_LIMITS["head_yaw"] + 1e-9:
            raise DataError("head yaw exceeds limit")
        if abs(self.head_pitch) > POSE_LIMITS["head_pitch"] + 1e-9:
            raise DataError("head pitch exceeds limit")
        if np.abs(self.limbs).max(initial=0) > POSE_LIMITS["limb"] + 1e-9:
            raise DataError("limb angle exceeds limit")
        if np.abs(self.translation[:2]).max(initial=0) > POSE_LIMITS["translation_xy"] + 1e-9:
            raise DataError("xy translation exceeds limit")
        if abs(self.translation[2]) > POSE_LIMITS["translation_z"] + 1e-9:
            raise DataError("z translation exceeds limit")


def _radius_profile(s: np.ndarray) -> np.ndarray:
    base = np.sin(np.pi * np.clip(s, 0.0, 1.0)) ** 0.8
    head = 1.0 + 0.22 * np.exp(-(((s - 0.86) / 0.07) ** 2))
    neck = 1.0 - 0.12 * np.exp(-(((s - 0.74) / 0.05) ** 2))
    return base * head * neck


def _leg_bulge(s: np.ndarray, theta: np.ndarray) -> np.ndarray:
    m = np.ones_like(s)
    for (s0, th0) in _LEGS:
        dth = np.angle(np.exp(1j * (theta - th0)))
        m = m + _LEG_BULGE * np.exp(-(((s - s0) / 0.055) ** 2) - ((dth / 0.5) ** 2))
    return m


class BodyModel:
    """Rest geometry plus the skeleton-driven deformation for one body."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        mesh, kp_vertices, marker_refs, colors = self._build_rest(spec)
        self.rest_mesh = mesh
        self.keypoint_vertices = kp_vertices  # (K,) vertex indices
        self.marker_refs = marker_refs  # list[SurfacePointRef]
        self.marker_colors = colors
        self._marker_matrix = anchor_matrix(mesh, marker_refs)
        # per-vertex skeleton weights from rest geometry
        length = spec.body_length
        self._s = mesh.vertices[:, 0] / length + 0.5
        self._spine_w = np.stack(
            [1.0 / (1.0 + np.exp(-(self._s - sj) / _SPINE_WIDTH)) for sj in _SPINE_JOINTS], axis=1)
        self._head_w = 1.0 / (1.0 + np.exp(-(self._s - _HEAD_JOINT) / _HEAD_WIDTH))
        radius = spec.girth_scale * length
        theta = np.arctan2(mesh.vertices[:, 2] / max(spec.height_scale, 1e-9),
                           mesh.vertices[:, 1])
        self._limb_w = np.zeros((mesh.n_vertices, 4))
        self._limb_anchor = np.zeros((4, 3))
        for k, (s0, th0) in enumerate(_LEGS):
            dth = np.angle(np.exp(1j * (theta - th0)))
            w = np.exp(-(((self._s - s0) / 0.09) ** 2) - ((dth / 0.7) ** 2))
            w[w < 1e-3] = 0.0
            self._limb_w[:, k] = w
            self._limb_anchor[k] = [(s0 - 0.5) * length,
                                    0.45 * radius * math.cos(th0),
                                    0.45 * radius * math.sin(th0) * spec.height_scale]

    @staticmethod
    def _build_rest(spec: SynthSpec):
        length = spec.body_length
        radius = spec.girth_scale * length
        ns, nc = spec.length_segments, spec.ring_segments

        verts = [np.array([-0.5 * length, 0.0, 0.0])]  # tail-base pole
        stations = np.arange(1, ns) / ns
        thetas = 2.0 * np.pi * np.arange(nc) / nc
        for s in stations:
            r = radius * _radius_profile(np.array([s]))[0]
            for th in thetas:
                m = _leg_bulge(np.array([s]), np.array([th]))[0]
                verts.append(np.array([
                    (s - 0.5) * length,
                    r * m * math.cos(th),
                    0.85 * r * m * math.sin(th) * spec.height_scale,
                ]))
        verts.append(np.array([0.5 * length, 0.0, 0.0]))  # nose pole
        verts = np.array(verts)
        nose = len(verts) - 1

        def ring_vertex(i, j):
            return 1 + i * nc + (j % nc)

        faces = []
        for j in range(nc):  # tail fan
            faces.append([0, ring_vertex(0, j + 1), ring_vertex(0, j)])
        for i in range(ns - 2):
            for j in range(nc):
                a, b = ring_vertex(i, j), ring_vertex(i, j + 1)
                c, d = ring_vertex(i + 1, j), ring_vertex(i + 1, j + 1)
                faces.append([a, b, c])
                faces.append([b, d, c])
        for j in range(nc):  # nose fan
            faces.append([nose, ring_vertex(ns - 2, j), ring_vertex(ns - 2, j + 1)])
        mesh = TriMesh(verts, faces)

        def nearest_ring_vertex(s_target, theta_target):
            i = int(np.clip(round(s_target * ns) - 1, 0, ns - 2))
            j = int(round(theta_target / (2.0 * np.pi / nc))) % nc
            return ring_vertex(i, j)

        top = math.pi / 2.0
        kp = np.empty(K_KEYPOINTS, dtype=np.int64)
        kp[0] = nose
        kp[1] = nearest_ring_vertex(0.92, top - 0.55)  # right eye
        kp[2] = nearest_ring_vertex(0.92, top + 0.55)  # left eye
        kp[3] = nearest_ring_vertex(0.82, top - 0.95)  # right ear
        kp[4] = nearest_ring_vertex(0.82, top + 0.95)  # left ear
        for k, (s0, th0) in enumerate(_LEGS):
            kp[5 + k] = nearest_ring_vertex(s0, th0)  # paws at the leg bulges
        kp[9] = 0  # tail base pole

        marker_refs, colors = BodyModel._place_markers(spec, mesh, kp)
        return mesh, kp, marker_refs, colors

    @staticmethod
    def _place_markers(spec: SynthSpec, mesh: TriMesh, kp_vertices):
        rng = np.random.default_rng(stream_seed(spec.seed, _DOMAIN_MARKERS, 0))
        min_gap = 0.03 * spec.body_length
        areas = mesh.face_areas()
        centroids = mesh.vertices[mesh.faces].mean(axis=1)
        radius = spec.girth_scale * spec.body_length
        eligible = centroids[:, 2] > -0.35 * radius  # dorsal and lateral band
        probs = areas * eligible
        probs = probs / probs.sum()

        refs: list[SurfacePointRef] = []
        placed: list[np.ndarray] = []
        tries = 0
        while len(refs) < spec.marker_count:
            tries += 1
            if tries > 20000:
                raise DataError(
                    f"cannot place {spec.marker_count} markers with spacing {min_gap:.1f} mm")
            face = int(rng.choice(len(areas), p=probs))
            r1, r2 = rng.random(2)
            w0 = 1.0 - math.sqrt(r1)
            w1 = math.sqrt(r1) * (1.0 - r2)
            ref = SurfacePointRef(face, (w0, w1, 1.0 - w0 - w1))
            pos = ref.position(mesh)
            if placed and np.linalg.norm(np.array(placed) - pos, axis=1).min() < min_gap:
                continue
            refs.append(ref)
            placed.append(pos)
        colors = [int(c) for c in rng.integers(0, spec.color_classes, size=spec.marker_count)]
        return refs, colors

    # -------------------------------------------------------------- girth

    def girth(self) -> float:
        """Maximal cross-section perimeter of the rest body (mm)."""
        nc = self.spec.ring_segments
        ns = self.spec.length_segments
        best = 0.0
        for i in range(ns - 1):
            ring = self.rest_mesh.vertices[1 + i * nc : 1 + (i + 1) * nc]
            per = float(np.linalg.norm(np.roll(ring, -1, axis=0) - ring, axis=1).sum())
            best = max(best, per)
        return best

    # ------------------------------------------------------------- posing

    def deform(self, params: PoseParams):
        """Deformed (mesh, keypoints (K, 3), markers (m, 3)) for a pose."""
        params.validate()
        p = self.rest_mesh.vertices.copy()
        length = self.spec.body_length

        # limb swings about the lateral (y) axis, around rest-space anchors
        for k in range(4):
            w = self._limb_w[:, k]
            active = w > 0
            if not active.any() or params.limbs[k] == 0.0:
                continue
            ang = params.limbs[k] * w[active]
            anchor = self._limb_anchor[k]
            rel = p[active] - anchor
            ca, sa = np.cos(ang), np.sin(ang)
            x, z = rel[:, 0].copy(), rel[:, 2].copy()
            rel[:, 0] = ca * x + sa * z
            rel[:, 2] = -sa * x + ca * z
            p[active] = rel + anchor

        # spine chain: yaw bends applied tail-to-head with smooth membership
        for j, sj in enumerate(_SPINE_JOINTS):
            ang = params.spine[j] * self._spine_w[:, j]
            pivot = np.array([(sj - 0.5) * length, 0.0, 0.0])
            rel = p - pivot
            ca, sa = np.cos(ang), np.sin(ang)
            x, y = rel[:, 0].copy(), rel[:, 1].copy()
            rel[:, 0] = ca * x - sa * y
            rel[:, 1] = sa * x + ca * y
            p = rel + pivot

        # head: yaw then pitch about the head joint
        pivot = np.array([(_HEAD_JOINT - 0.5) * length, 0.0, 0.0])
        rel = p - pivot
        ang = params.head_yaw * self._head_w
        ca, sa = np.cos(ang), np.sin(ang)
        x, y = rel[:, 0].copy(), rel[:, 1].copy()
        rel[:, 0] = ca * x - sa * y
        rel[:, 1] = sa * x + ca * y
        ang = params.head_pitch * self._head_w
        ca, sa = np.cos(ang), np.sin(ang)
        x, z = rel[:, 0].copy(), rel[:, 2].copy()
        rel[:, 0] = ca * x + sa * z
        rel[:, 2] = -sa * x + ca * z
        p = rel + pivot

        # global yaw + translation
        ca, sa = math.cos(params.yaw), math.sin(params.yaw)
        rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
        p = p @ rz.T + params.translation

        mesh = self.rest_mesh.with_vertices(p)
        keypoints = p[self.keypoint_vertices]
        markers = self._marker_matrix @ p
        return mesh, keypoints, markers


# --------------------------------------------------------------------------
# Motion profiles
# --------------------------------------------------------------------------

_PARAM_COUNT = 13  # spine(3) + head(2) + limbs(4) + yaw(1) + translation(3)


def _vector_to_pose(vec: np.ndarray, t: int) -> PoseParams:
    return PoseParams(spine=vec[0:3].copy(), head_yaw=float(vec[3]), head_pitch=float(vec[4]),
                      limbs=vec[5:9].copy(), yaw=float(vec[9]), translation=vec[10:13].copy(),
                      time_index=t)


def _clip_pose_vector(vec: np.ndarray) -> np.ndarray:
    lim = POSE_LIMITS
    out = vec.copy()
    out[0:3] = np.clip(out[0:3], -lim["spine"], lim["spine"])
    out[3] = np.clip(out[3], -lim["head_yaw"], lim["head_yaw"])
    out[4] = np.clip(out[4], -lim["head_pitch"], lim["head_pitch"])
    out[5:9] = np.clip(out[5:9], -lim["limb"], lim["limb"])
    out[10:12] = np.clip(out[10:12], -lim["translation_xy"], lim["translation_xy"])
    out[12] = np.clip(out[12], -lim["translation_z"], lim["translation_z"])
    return out


def ou_motion(frame_count: int, rng: np.random.Generator, dt: float = 1.0 / 30.0) -> list[PoseParams]:
    """Ornstein-Uhlenbeck wander through pose space; yaw integrates a drift."""
    kappa = np.full(_PARAM_COUNT, 2.0)
    sigma = np.array([0.45, 0.45, 0.45, 0.55, 0.40,
                      0.55, 0.55, 0.55, 0.55, 0.0,
                      18.0, 18.0, 6.0])
    state = np.zeros(_PARAM_COUNT)
    yaw_rate = 0.0
    poses = []
    for t in range(frame_count):
        noise = rng.standard_normal(_PARAM_COUNT)
        state = state + (-kappa * state) * dt + sigma * math.sqrt(dt) * noise
        yaw_rate += (-1.0 * yaw_rate) * dt + 2.2 * math.sqrt(dt) * rng.standard_normal()
        state[9] = state[9] + yaw_rate * dt
        state = _clip_pose_vector(state)
        poses.append(_vector_to_pose(state, t))
    return poses


def gait_motion(frame_count: int, rng: np.random.Generator, dt: float = 1.0 / 30.0,
                noise_scale: float = 0.02) -> list[PoseParams]:
    """Deterministic sinusoidal gait with a small stochastic perturbation."""
    freq = np.array([0.9, 0.7, 1.1, 1.3, 0.8, 2.0, 2.0, 2.0, 2.0, 0.0, 0.30, 0.23, 0.45])
    amp = np.array([0.28, 0.22, 0.25, 0.30, 0.20, 0.40, 0.40, 0.40, 0.40, 0.0, 12.0, 12.0, 4.0])
    phase = np.array([0.0, 1.1, 2.3, 0.7, 1.9, 0.0, math.pi, math.pi / 2, 3 * math.pi / 2,
                      0.0, 0.4, 2.0, 1.2])
    wobble = np.zeros(_PARAM_COUNT)
    poses = []
    for t in range(frame_count):
        time = t * dt
        wobble = 0.92 * wobble + noise_scale * rng.standard_normal(_PARAM_COUNT)
        vec = amp * np.sin(2.0 * np.pi * freq * time + phase) + wobble * np.array(
            [1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 30.0, 30.0, 10.0])
        vec[9] = 0.35 * time  # slow heading rotation
        vec = _clip_pose_vector(vec)
        poses.append(_vector_to_pose(vec, t))
    return poses


# --------------------------------------------------------------------------
# Dataset generation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    pixel_sigma: float = 0.5  # detection noise, px
    detection_dropout: float = 0.05  # probability a marker is missed in a view
    marker_occlusion: float = 0.10  # probability a marker lacks 3D ground truth


def generate_dataset(specs: list[SynthSpec], rig: DomeRig, split_counts: dict[str, int],
                     motion: str = "ou", noise: NoiseSpec = NoiseSpec(),
                     mask_stride: int = 0, mask_views: list[int] | None = None,
                     seed: int = 0, detection_splits: tuple[str, ...] = ("unlabeled",),
                     rig_path: str = "rig.json") -> Dataset:
    """Generate a multi-individual dataset with frames, detections and masks.

    ``split_counts`` maps split name to the per-individual frame count; the
    motion path runs continuously through the splits in their listed order.
    ``mask_stride`` > 0 rasterizes silhouettes every that many frames (per
    individual); masks stay in memory until ``save_dataset`` writes PGMs.
    A zero-pose reference frame (all markers visible) is emitted per
    individual along with its reference-pose mesh.
    """
    for name, count in split_counts.items():
        if name not in ("train", "val", "test", "unlabeled"):
            raise DataError(f"unknown split '{name}'")
        if count < 0:
            raise DataError("split counts must be >= 0")
    mask_views = list(range(len(rig))) if mask_views is None else list(mask_views)

    individuals: dict[str, IndividualInfo] = {}
    frames: list[RawFrame] = []
    detections: list[Detection2D] = []
    meshes: dict[str, TriMesh] = {}
    global_index = 0

    for ind_idx, spec in enumerate(specs):
        body = BodyModel(spec)
        rest_rel = f"meshes/{spec.name}_rest.obj"
        ref_rel = f"meshes/{spec.name}_reference.obj"
        meshes[rest_rel] = body.rest_mesh
        ref_mesh, ref_kps, ref_markers = body.deform(PoseParams())
        meshes[ref_rel] = ref_mesh

        individuals[spec.name] = IndividualInfo(
            name=spec.name, body_length=spec.body_length, girth=body.girth(),
            marker_count=spec.marker_count, marker_colors=body.marker_colors,
            rest_mesh=rest_rel, reference_mesh=ref_rel,
            reference_frame=f"frames/{spec.name}_{global_index:06d}.json",
        )
        frames.append(RawFrame(
            individual=spec.name, index=global_index, split="reference",
            keypoints=ref_kps, marker_ids=np.arange(spec.marker_count),
            marker_points=ref_markers, annotation_source="manual"))
        global_index += 1

        motion_rng = np.random.default_rng(stream_seed(seed, _DOMAIN_MOTION, ind_idx))
        total = sum(split_counts.values())
        if motion == "ou":
            poses = ou_motion(total, motion_rng)
        elif motion == "gait":
            poses = gait_motion(total, motion_rng)
        else:
            raise DataError(f"unknown motion profile '{motion}'")

        t = 0
        for split in ("train", "val", "test", "unlabeled"):
            for _ in range(split_counts.get(split, 0)):
                pose = poses[t]
                mesh, kps, markers = body.deform(pose)
                frame_rng = np.random.default_rng(stream_seed(seed, _DOMAIN_FRAME, global_index))

                if split == "unlabeled":
                    marker_ids = np.zeros(0, dtype=np.int64)
                    marker_pts = np.zeros((0, 3))
                    source = "none"
                else:
                    visible = frame_rng.random(spec.marker_count) >= noise.marker_occlusion
                    marker_ids = np.flatnonzero(visible)
                    marker_pts = markers[visible]
                    source = "manual"

                frame = RawFrame(individual=spec.name, index=global_index, split=split,
                                 keypoints=kps, marker_ids=marker_ids,
                                 marker_points=marker_pts, annotation_source=source)

                if split in detection_splits or not detection_splits:
                    detections.extend(_detect_markers(
                        rig, markers, body.marker_colors, global_index, frame_rng, noise))

                if mask_stride > 0 and t % mask_stride == 0:
                    frame.masks = {view: rasterize_silhouette(rig[view], mesh)
                                   for view in mask_views}
                frames.append(frame)
                global_index += 1
                t += 1

    return Dataset(root=None, rig_path=rig_path, individuals=individuals, frames=frames,
                   detections=detections, seed=seed, meshes=meshes)


def _detect_markers(rig: DomeRig, markers: np.ndarray, colors: list[int], frame_index: int,
                    rng: np.random.Generator, noise: NoiseSpec) -> list[Detection2D]:
    out = []
    for view in range(len(rig)):
        cam = rig[view]
        pixels, depth = project_many(cam, markers)
        drop = rng.random(len(markers)) < noise.detection_dropout
        jitter = rng.normal(0.0, noise.pixel_sigma, size=pixels.shape) if noise.pixel_sigma > 0 \
            else np.zeros_like(pixels)
        for m in range(len(markers)):
            if drop[m] or depth[m] <= 0 or not np.isfinite(pixels[m]).all():
                continue
            u = float(pixels[m, 0] + jitter[m, 0])
            v = float(pixels[m, 1] + jitter[m, 1])
            if not (0 <= u < cam.width and 0 <= v < cam.height):
                continue
            out.append(Detection2D(frame=frame_index, view=view, u=u, v=v, color=colors[m]))
    return out
