"""Keypoints-to-surface transformer: encoding, losses, training, adaptation.

The regressor consumes per-frame pose-normalized keypoints, forms
displacement tokens against the canonical anchors (scaled and shifted by the
per-individual parameters), runs an encoder-decoder transformer whose
decoder queries are the displacement tokens of an ARAP initial guess, and
emits per-anchor displacement corrections. Training alternates between
optimizing the network under the masked 3D loss and refining the individual
parameters under the soft silhouette loss with the network frozen.

Batched passes stack frames along the token axis and isolate them with an
additive block-diagonal attention mask, which keeps every op a plain 2-D
primitive while amortizing matmul cost across the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .arap import ArapConfig, ArapSolver
from .autodiff import Tensor
from .canonical import CanonicalSurface
from .cameras import Camera, DomeRig
from .data import FrameSample, K_KEYPOINTS, NOSE, TAIL_BASE
from .errors import ConfigError, DataError, DegenerateGeometryError, NumericError
from .silhouette import SilhouetteMask, hard_penalty, soft_penalty_with_gradient


@dataclass
class RbfConfig:
    """Model and training configuration (desk-scale defaults)."""

    embed_dim: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    eigen_count: int = 16
    frequencies: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    encoding: str = "spectral"  # "spectral" (eigenfunction projections) or "euclidean"
    refine_period: int = 50  # epochs between individual-parameter refinements
    refine_steps: int = 25  # optimizer steps per refinement
    model_lr: float = 1e-4
    params_lr: float = 1e-2
    epochs: int = 300
    batch_size: int = 8
    seed: int = 0
    normalize_inputs: bool = True
    fixed_scale: float = 150.0  # mm; replaces pose normalization when disabled
    max_silhouette_frames: int = 8
    silhouette_views: tuple[int, ...] | None = None  # None = every view with a mask
    arap_iterations: int = 10

    def validate(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.encoding not in ("spectral", "euclidean"):
            raise ConfigError(f"unknown encoding '{self.encoding}'")
        if self.refine_period < 1:
            raise ConfigError("refine_period must be >= 1")
        if not self.frequencies:
            raise ConfigError("frequencies must be non-empty")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @property
    def feature_dim(self) -> int:
        base = self.eigen_count if self.encoding == "spectral" else 3
        return 2 * base * len(self.frequencies)


@dataclass
class IndividualParams:
    """Per-individual point-wise scales and translations."""

    c_p: np.ndarray  # (K,) positive
    t_p: np.ndarray  # (K, 3)
    c_b: np.ndarray  # (N,) positive
    t_b: np.ndarray  # (N, 3)

    @classmethod
    def initial(cls, k: int, n: int, alpha_p: float = 1.0, alpha_b: float | None = None):
        alpha_b = alpha_p if alpha_b is None else alpha_b
        return cls(c_p=np.full(k, float(alpha_p)), t_p=np.zeros((k, 3)),
                   c_b=np.full(n, float(alpha_b)), t_b=np.zeros((n, 3)))

    def validate(self, k: int, n: int):
        if self.c_p.shape != (k,) or self.c_b.shape != (n,):
            raise DataError("parameter shapes do not match the canonical surface")
        if (self.c_p <= 0).any() or (self.c_b <= 0).any():
            raise DataError("scale parameters must stay positive")

    def copy(self) -> "IndividualParams":
        return IndividualParams(self.c_p.copy(), self.t_p.copy(), self.c_b.copy(), self.t_b.copy())


# --------------------------------------------------------------------------
# Pose normalization
# --------------------------------------------------------------------------


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class NormalizationRecord:
    """Invertible frame map: normalized = Rz(-yaw) (x - translation) / scale."""

    yaw: float
    translation: np.ndarray  # (3,)
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ _rot_z(-self.yaw).T / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) * self.scale) @ _rot_z(self.yaw).T + self.translation


def normalize_pose(keypoints: np.ndarray, surface_points: np.ndarray | None = None):
    """Map the body heading to +X, center the keypoints, scale to [-1, 1].

    Returns (normalized keypoints, normalized surface or None, record).
    """
    keypoints = np.asarray(keypoints, dtype=np.float64)
    heading = keypoints[NOSE] - keypoints[TAIL_BASE]
    if np.hypot(heading[0], heading[1]) < 1e-9:
        raise DegenerateGeometryError("nose and tail base are horizontally coincident; heading undefined")
    yaw = math.atan2(heading[1], heading[0])
    center = keypoints.mean(axis=0)
    rotated = (keypoints - center) @ _rot_z(-yaw).T
    scale = float(np.abs(rotated).max())
    record = NormalizationRecord(yaw=yaw, translation=center, scale=scale)
    normalized = rotated / scale
    norm_surface = record.apply(surface_points) if surface_points is not None else None
    return normalized, norm_surface, record


def fixed_record(scale: float) -> NormalizationRecord:
    """Identity-heading record used when pose normalization is disabled."""
    return NormalizationRecord(yaw=0.0, translation=np.zeros(3), scale=float(scale))


# --------------------------------------------------------------------------
# Initial guess (ARAP), token encoding, positional features
# --------------------------------------------------------------------------


class GuessEngine:
    """ARAP-deforms the canonical mesh so its keypoint anchors meet P / C_P,
    then reads the surface anchors off the deformed mesh. The solver's
    factorization is shared across frames."""

    def __init__(self, canonical: CanonicalSurface, arap_iterations: int = 10):
        self.canonical = canonical
        self.solver = ArapSolver(canonical.mesh, canonical.keypoint_vertices.tolist(), {},
                                 ArapConfig(iterations=arap_iterations, convergence_tol=1e-7))
        self._order = np.argsort(canonical.keypoint_vertices)

    def guess(self, normalized_keypoints: np.ndarray, c_p: np.ndarray) -> np.ndarray:
        targets = normalized_keypoints / c_p[:, None]
        result = self.solver.solve(targets[self._order])
        return self.canonical.surface_matrix @ result.positions


def encode_inputs(normalized_keypoints: np.ndarray, b_hat: np.ndarray,
                  params: IndividualParams, canonical: CanonicalSurface):
    """Displacement tokens: p/c_p - (p~ + t_p) and b^/c_b - (b~ + t_b)."""
    kp_tokens = normalized_keypoints / params.c_p[:, None] \
        - (canonical.keypoint_positions() + params.t_p)
    surf_tokens = b_hat / params.c_b[:, None] \
        - (canonical.anchor_positions() + params.t_b)
    return kp_tokens, surf_tokens


def positional_features(canonical: CanonicalSurface, refs, config: RbfConfig) -> np.ndarray:
    """Raw sinusoidal features of the anchors, (n, feature_dim), in [-1, 1].

    Spectral encoding: sin/cos of each eigenfunction value at the anchor at
    every frequency. Euclidean variant: sin/cos of the anchor coordinates.
    """
    if config.encoding == "spectral":
        if config.eigen_count > canonical.basis.count:
            raise ConfigError(
                f"config wants {config.eigen_count} eigenfunctions, canonical has {canonical.basis.count}")
        base = canonical.anchor_eigen_values(refs)[:, : config.eigen_count]
    else:
        from .mesh import anchor_matrix
        base = anchor_matrix(canonical.mesh, refs) @ canonical.mesh.vertices
    parts = []
    for freq in config.frequencies:
        parts.append(np.sin(freq * base))
        parts.append(np.cos(freq * base))
    return np.concatenate(parts, axis=1)


# --------------------------------------------------------------------------
# Transformer
# --------------------------------------------------------------------------

_MASK_OFF = -1e30


def block_diagonal_mask(rows: int, cols: int, blocks: int) -> np.ndarray:
    """(blocks*rows, blocks*cols) additive mask isolating per-frame blocks."""
    mask = np.full((blocks * rows, blocks * cols), _MASK_OFF)
    for b in range(blocks):
        mask[b * rows : (b + 1) * rows, b * cols : (b + 1) * cols] = 0.0
    return mask


class SurfaceModel:
    """Encoder-decoder transformer over displacement tokens."""

    def __init__(self, config: RbfConfig, seed: int | None = None,
                 weights: dict[str, np.ndarray] | None = None):
        config.validate()
        self.config = config
        if weights is not None:
            self.weights = {k: ad.parameter(v) for k, v in weights.items()}
        else:
            rng = np.random.default_rng(config.seed if seed is None else seed)
            self.weights = {k: ad.parameter(v) for k, v in self._init_weights(config, rng).items()}

    @staticmethod
    def _init_weights(cfg: RbfConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
        d, f = cfg.embed_dim, cfg.feature_dim
        w = {}

        def dense(name, fan_in, fan_out, scale=1.0):
            w[name] = rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))

        dense("embed_kp", 3, d)
        dense("embed_surf", 3, d)
        dense("pos_enc", f, d)
        dense("pos_dec", f, d)
        for i in range(cfg.encoder_layers):
            for name in ("q", "k", "v", "o"):
                dense(f"enc{i}.self.{name}", d, d)
            dense(f"enc{i}.ffn.w1", d, cfg.ffn_mult * d)
            w[f"enc{i}.ffn.b1"] = np.zeros(cfg.ffn_mult * d)
            dense(f"enc{i}.ffn.w2", cfg.ffn_mult * d, d)
            w[f"enc{i}.ffn.b2"] = np.zeros(d)
        for i in range(cfg.decoder_layers):
            for blockname in ("self", "cross"):
                for name in ("q", "k", "v", "o"):
                    dense(f"dec{i}.{blockname}.{name}", d, d)
            dense(f"dec{i}.ffn.w1", d, cfg.ffn_mult * d)
            w[f"dec{i}.ffn.b1"] = np.zeros(cfg.ffn_mult * d)
            dense(f"dec{i}.ffn.w2", cfg.ffn_mult * d, d)
            w[f"dec{i}.ffn.b2"] = np.zeros(d)
        dense("out.w", d, 3, scale=0.02)
        w["out.b"] = np.zeros(3)
        return w

    # ------------------------------------------------------------ plumbing

    def parameters(self) -> list[Tensor]:
        return [self.weights[k] for k in sorted(self.weights)]

    def set_trainable(self, trainable: bool):
        for t in self.weights.values():
            t.requires_grad = trainable

    def export_weights(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.weights.items()}

    # ------------------------------------------------------------- forward

    def _attention(self, prefix: str, q_in: Tensor, kv_in: Tensor, mask: np.ndarray | None) -> Tensor:
        cfg = self.config
        dk = cfg.embed_dim // cfg.heads
        q = ad.matmul(q_in, self.weights[f"{prefix}.q"])
        k = ad.matmul(kv_in, self.weights[f"{prefix}.k"])
        v = ad.matmul(kv_in, self.weights[f"{prefix}.v"])
        mask_t = ad.constant(mask) if mask is not None else None
        heads = []
        for h in range(cfg.heads):
            qh = ad.slice_cols(q, h * dk, (h + 1) * dk)
            kh = ad.slice_cols(k, h * dk, (h + 1) * dk)
            vh = ad.slice_cols(v, h * dk, (h + 1) * dk)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dk))
            if mask_t is not None:
                scores = ad.add(scores, mask_t)
            heads.append(ad.matmul(ad.softmax_rows(scores), vh))
        return ad.matmul(ad.concat(heads, axis=1), self.weights[f"{prefix}.o"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(x, self.weights[f"{prefix}.w1"]), self.weights[f"{prefix}.b1"]))
        return ad.add(ad.matmul(h, self.weights[f"{prefix}.w2"]), self.weights[f"{prefix}.b2"])

    def forward(self, kp_tokens, surf_tokens, kp_features: np.ndarray, surf_features: np.ndarray,
                enc_mask: np.ndarray | None = None, dec_mask: np.ndarray | None = None,
                cross_mask: np.ndarray | None = None) -> Tensor:
        """Displacements (tokens x 3). Token inputs may be arrays or Tensors
        (the latter lets gradients reach the individual parameters)."""
        if not isinstance(kp_tokens, Tensor):
            kp_tokens = ad.constant(kp_tokens)
        if not isinstance(surf_tokens, Tensor):
            surf_tokens = ad.constant(surf_tokens)

        x = ad.add(ad.matmul(kp_tokens, self.weights["embed_kp"]),
                   ad.matmul(ad.constant(kp_features), self.weights["pos_enc"]))
        for i in range(self.config.encoder_layers):
            ln = ad.layer_normalize(x)
            x = ad.add(x, self._attention(f"enc{i}.self", ln, ln, enc_mask))
            x = ad.add(x, self._ffn(f"enc{i}.ffn", ad.layer_normalize(x)))
        memory = ad.layer_normalize(x)

        y = ad.add(ad.matmul(surf_tokens, self.weights["embed_surf"]),
                   ad.matmul(ad.constant(surf_features), self.weights["pos_dec"]))
        for i in range(self.config.decoder_layers):
            ln = ad.layer_normalize(y)
            y = ad.add(y, self._attention(f"dec{i}.self", ln, ln, dec_mask))
            y = ad.add(y, self._attention(f"dec{i}.cross", ad.layer_normalize(y), memory, cross_mask))
            y = ad.add(y, self._ffn(f"dec{i}.ffn", ad.layer_normalize(y)))
        out = ad.layer_normalize(y)
        return ad.add(ad.matmul(out, self.weights["out.w"]), self.weights["out.b"])


# --------------------------------------------------------------------------
# Reconstruction and losses
# --------------------------------------------------------------------------


def reconstruct_output(delta: np.ndarray, params: IndividualParams,
                       canonical: CanonicalSurface, record: NormalizationRecord) -> np.ndarray:
    """World positions c_j (delta_j + b~_j + t_j), mapped back by the record."""
    normalized = params.c_b[:, None] * (delta + canonical.anchor_positions() + params.t_b)
    return record.invert(normalized)


def loss_3d(predicted_world: np.ndarray, sample: FrameSample) -> float:
    """Mean Euclidean distance over the visible surface points (mm)."""
    if not sample.visibility.any():
        raise DataError(f"frame {sample.index}: empty visibility mask")
    diff = predicted_world[sample.visibility] - sample.surface_points[sample.visibility]
    return float(np.linalg.norm(diff, axis=1).mean())


def behind_camera_penalty(camera: Camera) -> float:
    return math.hypot(camera.width, camera.height)


def loss_silhouette(predicted_world: np.ndarray, masks: dict[int, SilhouetteMask],
                    rig: DomeRig, soft: bool = False) -> float:
    """Sum over views and points of the outside penalty (hard: literal count)."""
    if not masks:
        raise DataError("silhouette loss needs at least one view")
    total = 0.0
    for view in sorted(masks):
        camera = rig[view]
        mask = masks[view]
        cam_pts = camera.to_camera(predicted_world)
        z = cam_pts[:, 2]
        ok = z > 1e-9
        if soft:
            pen = np.full(len(cam_pts), behind_camera_penalty(camera))
            if ok.any():
                pixels = np.stack([camera.fx * cam_pts[ok, 0] / z[ok] + camera.cx,
                                   camera.fy * cam_pts[ok, 1] / z[ok] + camera.cy], axis=1)
                pen[ok], _ = soft_penalty_with_gradient(mask, pixels)
        else:
            pen = np.ones(len(cam_pts))
            if ok.any():
                pixels = np.stack([camera.fx * cam_pts[ok, 0] / z[ok] + camera.cx,
                                   camera.fy * cam_pts[ok, 1] / z[ok] + camera.cy], axis=1)
                pen[ok] = hard_penalty(mask, pixels)
        total += float(pen.sum())
    return total


def _silhouette_sum_op(points_cam: Tensor, camera: Camera, mask: SilhouetteMask) -> Tensor:
    """Differentiable sum of soft penalties for camera-frame points.

    Behind-camera points contribute the fixed image-diagonal penalty with a
    zero gradient, keeping the optimization away from degenerate geometry.
    """
    vals = points_cam.values
    z = vals[:, 2]
    ok = z > 1e-9
    pen = np.full(len(vals), behind_camera_penalty(camera))
    grad_uv = np.zeros((len(vals), 2))
    if ok.any():
        pixels = np.stack([camera.fx * vals[ok, 0] / z[ok] + camera.cx,
                           camera.fy * vals[ok, 1] / z[ok] + camera.cy], axis=1)
        pen[ok], grad_uv[ok] = soft_penalty_with_gradient(mask, pixels)

    def bw(g):
        if not (points_cam.requires_grad or points_cam.tape is not None):
            return
        grad = np.zeros_like(vals)
        zz = z[ok]
        gu = grad_uv[ok, 0]
        gv = grad_uv[ok, 1]
        grad[ok, 0] = gu * camera.fx / zz
        grad[ok, 1] = gv * camera.fy / zz
        grad[ok, 2] = -(gu * camera.fx * vals[ok, 0] + gv * camera.fy * vals[ok, 1]) / zz**2
        points_cam._accumulate(float(g) * grad)
    return ad.record_op("silhouette_sum", np.asarray(pen.sum()), (points_cam,), bw)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class _FrameState:
    """Precomputed per-sample quantities; token caches follow the params."""

    sample: FrameSample
    record_true: NormalizationRecord
    record_model: NormalizationRecord
    norm_kps_true: np.ndarray  # (K, 3) pose-normalized keypoints
    kp_model: np.ndarray  # keypoints in the model input frame
    b_hat_model: np.ndarray | None = None  # (N, 3)
    kp_tokens: np.ndarray | None = None
    surf_tokens: np.ndarray | None = None
    masks: dict[int, SilhouetteMask] | None = None


def _build_state(sample: FrameSample, config: RbfConfig) -> _FrameState:
    norm_kps, _, record_true = normalize_pose(sample.keypoints)
    if config.normalize_inputs:
        record_model = record_true
        kp_model = norm_kps
    else:
        record_model = fixed_record(config.fixed_scale)
        kp_model = record_model.apply(sample.keypoints)
    return _FrameState(sample=sample, record_true=record_true, record_model=record_model,
                       norm_kps_true=norm_kps, kp_model=kp_model)


def _refresh_tokens(states: list[_FrameState], params: dict[str, IndividualParams],
                    canonical: CanonicalSurface, engine: GuessEngine, config: RbfConfig):
    for st in states:
        p = params[st.sample.individual]
        b_hat_norm = engine.guess(st.norm_kps_true, p.c_p)
        if config.normalize_inputs:
            st.b_hat_model = b_hat_norm
        else:
            st.b_hat_model = st.record_model.apply(st.record_true.invert(b_hat_norm))
        st.kp_tokens, st.surf_tokens = encode_inputs(st.kp_model, st.b_hat_model, p, canonical)


class _BatchGeometry:
    """Constant arrays that turn a stacked batch back into world coordinates."""

    def __init__(self, states: list[_FrameState], params: dict[str, IndividualParams],
                 canonical: CanonicalSurface):
        n = canonical.anchor_count
        b_tilde = canonical.anchor_positions()
        scale_cos, scale_sin, scale_col, centers = [], [], [], []
        c_rows, bt_rows = [], []
        for st in states:
            p = params[st.sample.individual]
            rec = st.record_model
            scale_cos.append(np.full((n, 1), rec.scale * math.cos(rec.yaw)))
            scale_sin.append(np.full((n, 1), rec.scale * math.sin(rec.yaw)))
            scale_col.append(np.full((n, 1), rec.scale))
            centers.append(np.tile(rec.translation, (n, 1)))
            c_rows.append(np.repeat(p.c_b[:, None], 3, axis=1))
            bt_rows.append(b_tilde + p.t_b)
        self.scale_cos = np.concatenate(scale_cos)
        self.scale_sin = np.concatenate(scale_sin)
        self.scale_col = np.concatenate(scale_col)
        self.centers = np.concatenate(centers)
        self.c_rows = np.concatenate(c_rows)
        self.bt_rows = np.concatenate(bt_rows)


def _world_from_delta(delta: Tensor, geo: _BatchGeometry,
                      c_rows: Tensor | None = None, bt_rows: Tensor | None = None) -> Tensor:
    """Map decoder displacements to world coordinates inside the tape."""
    bt = bt_rows if bt_rows is not None else ad.constant(geo.bt_rows)
    c = c_rows if c_rows is not None else ad.constant(geo.c_rows)
    normalized = ad.mul(ad.add(delta, bt), c)
    x = ad.slice_cols(normalized, 0, 1)
    y = ad.slice_cols(normalized, 1, 2)
    z = ad.slice_cols(normalized, 2, 3)
    wx = ad.sub(ad.mul(x, ad.constant(geo.scale_cos)), ad.mul(y, ad.constant(geo.scale_sin)))
    wy = ad.add(ad.mul(x, ad.constant(geo.scale_sin)), ad.mul(y, ad.constant(geo.scale_cos)))
    wz = ad.mul(z, ad.constant(geo.scale_col))
    return ad.add(ad.concat([wx, wy, wz], axis=1), ad.constant(geo.centers))


class _MaskCache:
    def __init__(self, k: int, n: int):
        self.k = k
        self.n = n
        self._cache: dict[int, tuple] = {}

    def get(self, blocks: int):
        if blocks not in self._cache:
            if blocks == 1:
                self._cache[blocks] = (None, None, None)
            else:
                self._cache[blocks] = (
                    block_diagonal_mask(self.k, self.k, blocks),
                    block_diagonal_mask(self.n, self.n, blocks),
                    block_diagonal_mask(self.n, self.k, blocks),
                )
        return self._cache[blocks]


def _forward_batch(model: SurfaceModel, states: list[_FrameState], feats_kp: np.ndarray,
                   feats_surf: np.ndarray, mask_cache: _MaskCache) -> Tensor:
    b = len(states)
    kp_tokens = np.concatenate([st.kp_tokens for st in states])
    surf_tokens = np.concatenate([st.surf_tokens for st in states])
    enc_mask, dec_mask, cross_mask = mask_cache.get(b)
    return model.forward(kp_tokens, surf_tokens,
                         np.tile(feats_kp, (b, 1)), np.tile(feats_surf, (b, 1)),
                         enc_mask, dec_mask, cross_mask)


@dataclass
class TrainResult:
    weights: dict[str, np.ndarray]
    params: dict[str, IndividualParams]
    history: list[dict]
    config: RbfConfig


def _silhouette_states(states: list[_FrameState], config: RbfConfig, mask_root) -> list[_FrameState]:
    chosen = []
    for st in states:
        if st.sample.masks or st.sample.mask_paths:
            chosen.append(st)
        if len(chosen) >= config.max_silhouette_frames:
            break
    for st in chosen:
        if st.masks is None:
            masks = st.sample.load_masks(mask_root) if st.sample.masks is None else st.sample.masks
            if config.silhouette_views is not None:
                masks = {v: m for v, m in masks.items() if v in config.silhouette_views}
            st.masks = masks
    return [st for st in chosen if st.masks]


def _param_tensors(params: dict[str, IndividualParams]):
    tensors = {}
    for name in sorted(params):
        p = params[name]
        tensors[name] = {
            "log_c_p": ad.parameter(np.log(p.c_p)[:, None]),
            "t_p": ad.parameter(p.t_p),
            "log_c_b": ad.parameter(np.log(p.c_b)[:, None]),
            "t_b": ad.parameter(p.t_b),
        }
    return tensors


def _params_from_tensors(tensors) -> dict[str, IndividualParams]:
    out = {}
    for name, t in tensors.items():
        out[name] = IndividualParams(
            c_p=np.exp(t["log_c_p"].values.ravel()), t_p=t["t_p"].values.copy(),
            c_b=np.exp(t["log_c_b"].values.ravel()), t_b=t["t_b"].values.copy())
    return out


def _silhouette_loss_tape(model: SurfaceModel, st: _FrameState, tensors, canonical: CanonicalSurface,
                          feats_kp, feats_surf, rig: DomeRig) -> Tensor:
    """Soft silhouette loss of one frame as a tape scalar; gradients reach the
    individual parameters through both token formation and reconstruction."""
    k, n = K_KEYPOINTS, canonical.anchor_count
    t = tensors[st.sample.individual]
    c_p3 = ad.tile_cols(ad.exp(t["log_c_p"]), 3)
    c_b3 = ad.tile_cols(ad.exp(t["log_c_b"]), 3)
    p_term = ad.add(ad.constant(canonical.keypoint_positions()), t["t_p"])
    b_term = ad.add(ad.constant(canonical.anchor_positions()), t["t_b"])
    kp_tok = ad.sub(ad.div(ad.constant(st.kp_model), c_p3), p_term)
    surf_tok = ad.sub(ad.div(ad.constant(st.b_hat_model), c_b3), b_term)

    delta = model.forward(kp_tok, surf_tok, feats_kp, feats_surf)
    geo = _BatchGeometry([st], {st.sample.individual: IndividualParams(
        np.ones(k), np.zeros((k, 3)), np.ones(n), np.zeros((n, 3)))}, canonical)
    world = _world_from_delta(delta, geo, c_rows=c_b3, bt_rows=b_term)

    total = None
    for view in sorted(st.masks):
        camera = rig[view]
        cam_pts = ad.add(ad.matmul(world, ad.constant(camera.rotation.T)),
                         ad.constant(camera.translation[None, :]))
        term = _silhouette_sum_op(cam_pts, camera, st.masks[view])
        total = term if total is None else ad.add(total, term)
    return total


def train_model(train_samples: list[FrameSample], canonical: CanonicalSurface,
                alphas: dict[str, float] | None = None, config: RbfConfig | None = None,
                val_samples: list[FrameSample] = (), rig: DomeRig | None = None,
                mask_root=None, log=None) -> TrainResult:
    """Alternating optimization: the network under the masked 3D loss each
    epoch, the individual parameters under the soft silhouette loss every
    ``refine_period`` epochs with the network frozen.

    C is initialized to the per-individual alpha and T to zero. Returns the
    weights, the refined parameters and a per-epoch loss history.
    """
    config = config or RbfConfig()
    config.validate()
    if not train_samples:
        raise DataError("training set is empty")
    alphas = alphas or {}
    canonical_n = canonical.anchor_count

    individuals = sorted({s.individual for s in train_samples} | {s.individual for s in val_samples})
    params = {name: IndividualParams.initial(K_KEYPOINTS, canonical_n, alphas.get(name, 1.0))
              for name in individuals}

    engine = GuessEngine(canonical, config.arap_iterations)
    states = [_build_state(s, config) for s in train_samples]
    val_states = [_build_state(s, config) for s in val_samples]
    _refresh_tokens(states + val_states, params, canonical, engine, config)

    feats_kp = positional_features(canonical, canonical.keypoint_anchors, config)
    feats_surf = positional_features(canonical, canonical.surface_anchors, config)
    mask_cache = _MaskCache(K_KEYPOINTS, canonical_n)

    model = SurfaceModel(config)
    optimizer = ad.Adam(model.parameters(), lr=config.model_lr)
    rng = np.random.default_rng(config.seed)

    sil_states = _silhouette_states(states, config, mask_root) if rig is not None else []

    def eval_mean_3d(eval_states) -> float:
        if not eval_states:
            return float("nan")
        model.set_trainable(False)
        losses = []
        for lo in range(0, len(eval_states), 16):
            chunk = eval_states[lo : lo + 16]
            delta = _forward_batch(model, chunk, feats_kp, feats_surf, mask_cache)
            geo = _BatchGeometry(chunk, params, canonical)
            world = _world_from_delta(delta, geo).values
            for i, st in enumerate(chunk):
                pred = world[i * canonical_n : (i + 1) * canonical_n]
                losses.append(loss_3d(pred, st.sample))
        model.set_trainable(True)
        return float(np.mean(losses))

    def silhouette_value() -> float:
        if not sil_states:
            return float("nan")
        model.set_trainable(False)
        total = 0.0
        for st in sil_states:
            delta = _forward_batch(model, [st], feats_kp, feats_surf, mask_cache)
            geo = _BatchGeometry([st], params, canonical)
            world = _world_from_delta(delta, geo).values
            total += loss_silhouette(world, st.masks, rig, soft=True)
        model.set_trainable(True)
        return total

    history: list[dict] = []
    val0 = eval_mean_3d(val_states)
    ls_value = silhouette_value() if sil_states else float("nan")
    history.append({"epoch": 0, "train3d": eval_mean_3d(states), "val3d": val0,
                    "silhouette": ls_value})

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(states))
        epoch_loss = 0.0
        seen = 0
        try:
            for lo in range(0, len(order), config.batch_size):
                batch = [states[i] for i in order[lo : lo + config.batch_size]]
                delta = _forward_batch(model, batch, feats_kp, feats_surf, mask_cache)
                geo = _BatchGeometry(batch, params, canonical)
                world = _world_from_delta(delta, geo)

                rows, gts, weights = [], [], []
                for i, st in enumerate(batch):
                    vis = np.flatnonzero(st.sample.visibility)
                    if len(vis) == 0:
                        continue
                    rows.append(vis + i * canonical_n)
                    gts.append(st.sample.surface_points[vis])
                    weights.append(np.full((len(vis), 1), 1.0 / (len(batch) * len(vis))))
                if not rows:
                    continue
                pred = ad.take_rows(world, np.concatenate(rows))
                diff = ad.sub(pred, ad.constant(np.concatenate(gts)))
                sq = ad.row_sum(ad.mul(diff, diff))
                dist = ad.sqrt(ad.add(sq, ad.constant(np.full((sq.shape[0], 1), 1e-18))))
                loss = ad.sum_all(ad.mul(dist, ad.constant(np.concatenate(weights))))
                ad.backward(loss)
                optimizer.step()
                optimizer.zero_grad()
                epoch_loss += float(loss.values) * len(batch)
                seen += len(batch)
        except NumericError as exc:
            raise NumericError(f"non-finite training state at epoch {epoch}: {exc}") from exc

        if sil_states and epoch % config.refine_period == 0 and config.refine_steps > 0:
            params = _refine_params(model, sil_states, params, canonical, feats_kp, feats_surf,
                                    rig, config)
            _refresh_tokens(states + val_states, params, canonical, engine, config)
            ls_value = silhouette_value()

        row = {"epoch": epoch, "train3d": epoch_loss / max(seen, 1),
               "val3d": eval_mean_3d(val_states), "silhouette": ls_value}
        history.append(row)
        if log is not None:
            log(row)

    return TrainResult(weights=model.export_weights(), params=params, history=history,
                       config=config)


def _refine_params(model: SurfaceModel, sil_states, params, canonical, feats_kp, feats_surf,
                   rig, config: RbfConfig) -> dict[str, IndividualParams]:
    model.set_trainable(False)
    tensors = _param_tensors(params)
    involved = sorted({st.sample.individual for st in sil_states})
    leaves = []
    for name in involved:
        leaves.extend(tensors[name].values())
    optimizer = ad.Adam(leaves, lr=config.params_lr)
    for _ in range(config.refine_steps):
        total = None
        for st in sil_states:
            term = _silhouette_loss_tape(model, st, tensors, canonical, feats_kp, feats_surf, rig)
            total = term if total is None else ad.add(total, term)
        ad.backward(total)
        optimizer.step()
        optimizer.zero_grad()
    model.set_trainable(True)
    refined = _params_from_tensors(tensors)
    out = dict(params)
    out.update({name: refined[name] for name in involved})
    return out


# --------------------------------------------------------------------------
# Prediction and inference-time adaptation
# --------------------------------------------------------------------------


def predict_surfaces(model: SurfaceModel, canonical: CanonicalSurface,
                     params: dict[str, IndividualParams], samples: list[FrameSample],
                     config: RbfConfig | None = None) -> list[np.ndarray]:
    """World-space surface predictions for each sample (frozen weights)."""
    config = config or model.config
    engine = GuessEngine(canonical, config.arap_iterations)
    states = [_build_state(s, config) for s in samples]
    for st in states:
        if st.sample.individual not in params:
            raise DataError(f"no individual parameters for '{st.sample.individual}'")
    _refresh_tokens(states, params, canonical, engine, config)
    feats_kp = positional_features(canonical, canonical.keypoint_anchors, config)
    feats_surf = positional_features(canonical, canonical.surface_anchors, config)
    mask_cache = _MaskCache(K_KEYPOINTS, canonical.anchor_count)
    n = canonical.anchor_count

    model.set_trainable(False)
    out = []
    for lo in range(0, len(states), 16):
        chunk = states[lo : lo + 16]
        delta = _forward_batch(model, chunk, feats_kp, feats_surf, mask_cache)
        geo = _BatchGeometry(chunk, params, canonical)
        world = _world_from_delta(delta, geo).values
        for i in range(len(chunk)):
            out.append(world[i * n : (i + 1) * n])
    model.set_trainable(True)
    return out


def infer_new_rat(samples: list[FrameSample], canonical: CanonicalSurface, model: SurfaceModel,
                  alpha_p: float, alpha_b: float, rig: DomeRig, steps: int = 100,
                  config: RbfConfig | None = None, mask_root=None,
                  ) -> tuple[IndividualParams, list[np.ndarray], dict]:
    """Test-time adaptation of C and T on the soft silhouette loss.

    C_P starts at alpha_p, C_B at alpha_b, translations at zero; the network
    stays frozen. Samples without masks are still predicted but contribute no
    adaptation signal. A non-decreasing loss over the budget is reported as a
    warning, not an error.
    """
    if alpha_p <= 0 or alpha_b <= 0:
        raise DataError("alpha values must be positive")
    config = config or model.config
    individuals = sorted({s.individual for s in samples})
    if len(individuals) != 1:
        raise DataError("inference-time adaptation expects frames of a single individual")
    name = individuals[0]
    n = canonical.anchor_count
    params = {name: IndividualParams.initial(K_KEYPOINTS, n, alpha_p, alpha_b)}

    engine = GuessEngine(canonical, config.arap_iterations)
    states = [_build_state(s, config) for s in samples]
    sil_states = _silhouette_states(states, config, mask_root)
    feats_kp = positional_features(canonical, canonical.keypoint_anchors, config)
    feats_surf = positional_features(canonical, canonical.surface_anchors, config)

    report = {"ls_history": [], "warnings": []}
    if steps > 0 and sil_states:
        model.set_trainable(False)
        tensors = _param_tensors(params)
        optimizer = ad.Adam(list(tensors[name].values()), lr=config.params_lr)
        for _ in range(steps):
            current = _params_from_tensors(tensors)
            _refresh_tokens(sil_states, current, canonical, engine, config)
            total = None
            for st in sil_states:
                term = _silhouette_loss_tape(model, st, tensors, canonical, feats_kp, feats_surf, rig)
                total = term if total is None else ad.add(total, term)
            report["ls_history"].append(float(total.values))
            ad.backward(total)
            optimizer.step()
            optimizer.zero_grad()
        params = _params_from_tensors(tensors)
        model.set_trainable(True)
        hist = report["ls_history"]
        if len(hist) >= 2 and hist[-1] >= hist[0]:
            report["warnings"].append(
                f"silhouette loss did not decrease over {steps} steps ({hist[0]:.3f} -> {hist[-1]:.3f})")
    elif steps > 0:
        report["warnings"].append("no masks available; parameters left at initialization")

    predictions = predict_surfaces(model, canonical, params, samples, config)
    return params[name], predictions, report
