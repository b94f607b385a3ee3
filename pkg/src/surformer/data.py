"""Dataset structures and their on-disk formats.

A dataset directory holds ``manifest.json``, a ``frames/`` directory of
per-frame JSON records, ``meshes/`` (OBJ), optional ``masks/`` (PGM) and an
optional ``detections.jsonl`` stream. Frame records store markers under the
individual's local IDs; binding them against a marker registry produces
``FrameSample`` objects in the canonical anchor space used for training.

All writers emit deterministic bytes (sorted keys, shortest round-trip float
formatting) so identical inputs and seeds give identical files.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .silhouette import SilhouetteMask, load_pgm

KEYPOINT_LABELS = (
    "nose", "right_eye", "left_eye", "right_ear", "left_ear",
    "right_front_paw", "left_front_paw", "right_back_paw", "left_back_paw",
    "tail_base",
)
K_KEYPOINTS = len(KEYPOINT_LABELS)
NOSE = KEYPOINT_LABELS.index("nose")
TAIL_BASE = KEYPOINT_LABELS.index("tail_base")

SPLITS = ("train", "val", "test", "unlabeled", "reference")


@dataclass(frozen=True)
class Detection2D:
    """One detected 2D marker blob in one view."""

    frame: int
    view: int
    u: float
    v: float
    color: int


@dataclass
class RawFrame:
    """A captured frame in an individual's local marker-ID space."""

    individual: str
    index: int
    split: str
    keypoints: np.ndarray  # (K, 3) world mm
    marker_ids: np.ndarray  # (m,) local ids, possibly empty
    marker_points: np.ndarray  # (m, 3)
    annotation_source: str = "manual"  # manual | semiAutomatic | none
    mask_paths: dict[int, str] = field(default_factory=dict)
    masks: dict[int, SilhouetteMask] | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(K_KEYPOINTS, 3)
        self.marker_ids = np.asarray(self.marker_ids, dtype=np.int64).reshape(-1)
        self.marker_points = np.asarray(self.marker_points, dtype=np.float64).reshape(-1, 3)
        if len(self.marker_ids) != len(self.marker_points):
            raise DataError(f"frame {self.index}: {len(self.marker_ids)} marker ids vs {len(self.marker_points)} points")
        if not np.isfinite(self.keypoints).all():
            raise DataError(f"frame {self.index}: non-finite keypoints")
        if self.split not in SPLITS:
            raise DataError(f"frame {self.index}: unknown split '{self.split}'")

    def load_masks(self, root) -> dict[int, SilhouetteMask]:
        if self.masks is not None:
            return self.masks
        return {view: load_pgm(Path(root) / rel) for view, rel in sorted(self.mask_paths.items())}


@dataclass
class FrameSample:
    """A frame bound to the canonical anchor space (size N, masked)."""

    individual: str
    index: int
    split: str
    keypoints: np.ndarray  # (K, 3)
    surface_points: np.ndarray  # (N, 3), NaN where invisible
    visibility: np.ndarray  # (N,) bool
    annotation_source: str = "manual"
    mask_paths: dict[int, str] = field(default_factory=dict)
    masks: dict[int, SilhouetteMask] | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(K_KEYPOINTS, 3)
        self.surface_points = np.asarray(self.surface_points, dtype=np.float64)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if len(self.surface_points) != len(self.visibility):
            raise DataError("surface_points and visibility length mismatch")
        if not np.isfinite(self.keypoints).all():
            raise DataError(f"frame {self.index}: non-finite keypoints")
        if self.visibility.any() and not np.isfinite(self.surface_points[self.visibility]).all():
            raise DataError(f"frame {self.index}: non-finite visible surface points")

    def load_masks(self, root) -> dict[int, SilhouetteMask]:
        if self.masks is not None:
            return self.masks
        return {view: load_pgm(Path(root) / rel) for view, rel in sorted(self.mask_paths.items())}


def bind_frame(raw: RawFrame, local_to_canonical: dict[int, int], n_total: int) -> FrameSample:
    """Lift a local-ID frame into the canonical (N-sized, masked) space."""
    points = np.full((n_total, 3), np.nan)
    visibility = np.zeros(n_total, dtype=bool)
    for local_id, pos in zip(raw.marker_ids, raw.marker_points):
        if int(local_id) not in local_to_canonical:
            raise DataError(f"frame {raw.index}: marker id {local_id} not in registry for '{raw.individual}'")
        cid = local_to_canonical[int(local_id)]
        points[cid] = pos
        visibility[cid] = True
    return FrameSample(
        individual=raw.individual, index=raw.index, split=raw.split,
        keypoints=raw.keypoints, surface_points=points, visibility=visibility,
        annotation_source=raw.annotation_source,
        mask_paths=dict(raw.mask_paths), masks=raw.masks,
    )


# --------------------------------------------------------------------------
# JSON helpers (deterministic float formatting through Python's repr)
# --------------------------------------------------------------------------


def jsonable(value):
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (np.floating, float)):
        return float(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    return value


def dump_json(doc, path):
    Path(path).write_text(json.dumps(jsonable(doc), sort_keys=True, indent=1) + "\n")


# --------------------------------------------------------------------------
# Frame records
# --------------------------------------------------------------------------


def _frame_to_dict(frame: RawFrame | FrameSample) -> dict:
    doc = {
        "individual": frame.individual,
        "index": frame.index,
        "split": frame.split,
        "annotationSource": frame.annotation_source,
        "keypoints": frame.keypoints,
        "masks": {str(k): v for k, v in sorted(frame.mask_paths.items())},
    }
    if isinstance(frame, RawFrame):
        doc["markerSpace"] = "local"
        doc["markerIds"] = frame.marker_ids
        doc["markerPoints"] = frame.marker_points
    else:
        doc["markerSpace"] = "canonical"
        ids = np.flatnonzero(frame.visibility)
        doc["markerIds"] = ids
        doc["markerPoints"] = frame.surface_points[ids]
        doc["anchorCount"] = len(frame.visibility)
    return doc


def _frame_from_dict(doc: dict):
    mask_paths = {int(k): v for k, v in doc.get("masks", {}).items()}
    common = dict(
        individual=doc["individual"], index=int(doc["index"]), split=doc["split"],
        keypoints=np.array(doc["keypoints"], dtype=np.float64),
        annotation_source=doc["annotationSource"], mask_paths=mask_paths,
    )
    ids = np.array(doc["markerIds"], dtype=np.int64)
    points = np.array(doc["markerPoints"], dtype=np.float64).reshape(-1, 3)
    if doc.get("markerSpace", "local") == "local":
        return RawFrame(marker_ids=ids, marker_points=points, **common)
    n = int(doc["anchorCount"])
    surface = np.full((n, 3), np.nan)
    visibility = np.zeros(n, dtype=bool)
    surface[ids] = points
    visibility[ids] = True
    return FrameSample(surface_points=surface, visibility=visibility, **common)


# --------------------------------------------------------------------------
# Dataset directory I/O
# --------------------------------------------------------------------------


@dataclass
class IndividualInfo:
    name: str
    body_length: float  # mm, nose to tail base along the rest axis
    girth: float  # mm, maximal cross-section perimeter of the rest body
    marker_count: int
    marker_colors: list[int]
    rest_mesh: str = ""  # relative OBJ path
    reference_mesh: str = ""  # deformed mesh at the reference frame
    reference_frame: str = ""  # relative JSON path


@dataclass
class Dataset:
    root: Path
    rig_path: str
    individuals: dict[str, IndividualInfo]
    frames: list  # RawFrame | FrameSample, ordered
    detections: list[Detection2D]
    seed: int = 0
    meshes: dict[str, object] = field(default_factory=dict)  # relpath -> TriMesh, written on save

    def frames_for(self, split: str | None = None, individual: str | None = None) -> list:
        out = []
        for f in self.frames:
            if split is not None and f.split != split:
                continue
            if individual is not None and f.individual != individual:
                continue
            out.append(f)
        return out

    def reference_frames(self) -> dict[str, RawFrame]:
        refs = {}
        for f in self.frames:
            if f.split == "reference":
                refs[f.individual] = f
        return refs


def save_dataset(dataset: Dataset, root):
    from .silhouette import save_pgm  # deferred to keep import graph simple

    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    if dataset.meshes:
        (root / "meshes").mkdir(exist_ok=True)
        for rel, mesh in sorted(dataset.meshes.items()):
            mesh.save(root / rel)
    frame_paths = []
    for frame in dataset.frames:
        if frame.masks:
            (root / "masks").mkdir(exist_ok=True)
            for view, mask in sorted(frame.masks.items()):
                rel = f"masks/{frame.individual}_{frame.index:06d}_v{view:02d}.pgm"
                save_pgm(mask, root / rel)
                frame.mask_paths[view] = rel
        rel = f"frames/{frame.individual}_{frame.index:06d}.json"
        dump_json(_frame_to_dict(frame), root / rel)
        frame_paths.append(rel)
    manifest = {
        "schemaVersion": 1,
        "seed": dataset.seed,
        "rig": dataset.rig_path,
        "individuals": {
            name: {
                "bodyLength": info.body_length,
                "girth": info.girth,
                "markerCount": info.marker_count,
                "markerColors": info.marker_colors,
                "restMesh": info.rest_mesh,
                "referenceMesh": info.reference_mesh,
                "referenceFrame": info.reference_frame,
            }
            for name, info in sorted(dataset.individuals.items())
        },
        "frames": frame_paths,
        "detections": "detections.jsonl" if dataset.detections else "",
    }
    dump_json(manifest, root / "manifest.json")
    if dataset.detections:
        save_detections(dataset.detections, root / "detections.jsonl")


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    individuals = {}
    for name, d in manifest.get("individuals", {}).items():
        individuals[name] = IndividualInfo(
            name=name, body_length=float(d["bodyLength"]), girth=float(d["girth"]),
            marker_count=int(d["markerCount"]), marker_colors=[int(c) for c in d["markerColors"]],
            rest_mesh=d.get("restMesh", ""), reference_mesh=d.get("referenceMesh", ""),
            reference_frame=d.get("referenceFrame", ""),
        )
    frames = []
    for rel in manifest["frames"]:
        frames.append(_frame_from_dict(json.loads((root / rel).read_text())))
    detections = []
    det_rel = manifest.get("detections", "")
    if det_rel:
        detections = load_detections(root / det_rel)
    return Dataset(root=root, rig_path=manifest.get("rig", ""), individuals=individuals,
                   frames=frames, detections=detections, seed=int(manifest.get("seed", 0)))


# --------------------------------------------------------------------------
# Detections (JSON lines)
# --------------------------------------------------------------------------


def save_detections(detections: list[Detection2D], path):
    lines = []
    for d in detections:
        lines.append(json.dumps(
            {"frame": d.frame, "view": d.view, "u": float(d.u), "v": float(d.v), "colorClass": d.color},
            sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_detections(path) -> list[Detection2D]:
    detections = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        detections.append(Detection2D(frame=int(d["frame"]), view=int(d["view"]),
                                      u=float(d["u"]), v=float(d["v"]), color=int(d["colorClass"])))
    return detections
