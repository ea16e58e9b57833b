"""Scene representation: anchors, decoder heads, time embeddings.

The scene is a set of anchor points, each carrying a feature vector and k
offset slots. For a given camera and time, tiny MLP heads decode every
visible anchor into k renderable Gaussians:

  center   mu = mu_a + v_o * s                      (offsets scaled per axis)
  opacity  o  = tanh(F_o(f, delta, dir, z_t))       (negative => invisible)
  color    c  = (1 - m) c_s + m c_d                 (static/dynamic blend)
  shape    (scale, quat) = F_cov(f, delta, dir)     (time-independent)

z_t is either a learnable embedding row for a discrete time index or a
sinusoidal encoding of a continuous time value. Geometry (means, scales,
rotations) never depends on z_t, so moving through time only changes which
Gaussians are visible and what color they take.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericalError, ShapeError, StateError
from .mlp import ForwardCache, MlpParams, mlp_backward, mlp_forward, mlp_init

NEAR_CLIP = 0.01
FRUSTUM_MARGIN = 0.1  # anchors kept while projecting inside a 1.2x canvas
SCALE_FLOOR = 1e-6

HEAD_NAMES = ("opacity", "static_color", "dynamic_color", "blend", "covariance")


@dataclass
class Camera:
    """Pinhole intrinsics plus a world-to-camera rigid transform (x right,
    y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ShapeError("camera pose must be a 3x3 rotation and 3-vector translation")
        if self.fx <= 0 or self.fy <= 0:
            raise ShapeError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6 or np.linalg.det(self.rotation) < 0:
            raise ShapeError(f"rotation is not orthonormal (max deviation {err:.2e})")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world space."""
        return -self.rotation.T @ self.translation


def look_at_camera(
    eye,
    target,
    fx: float,
    fy: float,
    width: int,
    height: int,
    up=(0.0, 0.0, 1.0),
    cx: float = None,
    cy: float = None,
) -> Camera:
    """Camera at `eye` looking at `target` (OpenCV axes: x right, y down,
    z forward; `up` is the world up direction)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight along up; pick any perpendicular
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return Camera(
        fx=fx,
        fy=fy,
        cx=width / 2.0 if cx is None else cx,
        cy=height / 2.0 if cy is None else cy,
        width=width,
        height=height,
        rotation=rot,
        translation=-rot @ eye,
    )


@dataclass
class AnchorSet:
    """Learnable anchor state. Scalings are stored as logs so the positive
    invariant survives unconstrained optimization."""

    centers: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, F)
    offsets: np.ndarray  # (N, k, 3)
    log_scalings: np.ndarray  # (N, 3)

    def __post_init__(self):
        n = self.centers.shape[0]
        if n < 1:
            raise ShapeError("anchor set must contain at least one anchor")
        if self.offsets.shape[1] < 1:
            raise ShapeError("need at least one offset per anchor")
        if (
            self.centers.shape != (n, 3)
            or self.features.shape[0] != n
            or self.offsets.shape[0] != n
            or self.log_scalings.shape != (n, 3)
        ):
            raise ShapeError("anchor arrays disagree on N")
        for name in ("centers", "features", "offsets", "log_scalings"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalError(f"anchor {name} contain non-finite values")

    @property
    def n_anchors(self) -> int:
        return self.centers.shape[0]

    @property
    def k(self) -> int:
        return self.offsets.shape[1]

    @property
    def scalings(self) -> np.ndarray:
        return np.exp(self.log_scalings)


@dataclass
class TimeEmbeddingTable:
    """One learnable row per distinct training time index."""

    embeddings: np.ndarray  # (T, l)

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise ShapeError("embedding table must be 2-D")
        if not np.all(np.isfinite(self.embeddings)):
            raise NumericalError("embedding table contains non-finite values")

    @property
    def n_times(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def row(self, t: int) -> np.ndarray:
        if not 0 <= t < self.n_times:
            raise IndexError(f"time index {t} outside [0, {self.n_times})")
        return self.embeddings[t]


@dataclass
class HeadSet:
    """The five decoder heads. Covariance and static color take no time
    input; everything else is conditioned on z_t."""

    opacity: MlpParams
    static_color: MlpParams
    dynamic_color: MlpParams
    blend: MlpParams
    covariance: MlpParams

    def validate(self, feature_dim: int, k: int, embed_dim: int):
        timed = feature_dim + 4 + embed_dim
        static = feature_dim + 4
        expect = {
            "opacity": (timed, k),
            "static_color": (static, 3 * k),
            "dynamic_color": (timed, 3 * k),
            "blend": (timed, k),
            "covariance": (static, 7 * k),
        }
        for name, (d_in, d_out) in expect.items():
            head: MlpParams = getattr(self, name)
            if head.in_dim != d_in or head.out_dim != d_out:
                raise ShapeError(
                    f"{name} head is {head.in_dim}->{head.out_dim}, expected {d_in}->{d_out}"
                )

    def named(self):
        return [(name, getattr(self, name)) for name in HEAD_NAMES]


def default_heads(
    feature_dim: int, k: int, embed_dim: int, hidden: int = 32, seed=0, dtype=np.float32
) -> HeadSet:
    """Two hidden layers of `hidden` units per head."""
    rng = np.random.default_rng(seed)
    timed = feature_dim + 4 + embed_dim
    static = feature_dim + 4
    return HeadSet(
        opacity=mlp_init([timed, hidden, hidden, k], rng, dtype),
        static_color=mlp_init([static, hidden, hidden, 3 * k], rng, dtype),
        dynamic_color=mlp_init([timed, hidden, hidden, 3 * k], rng, dtype),
        blend=mlp_init([timed, hidden, hidden, k], rng, dtype),
        covariance=mlp_init([static, hidden, hidden, 7 * k], rng, dtype),
    )


@dataclass
class SceneModel:
    """All learnable state plus the hyperparameters the decoder needs."""

    anchors: AnchorSet
    heads: HeadSet
    embeddings: TimeEmbeddingTable
    scene_extent: float
    encoder_mode: str = "embedding"  # or "positional"

    def __post_init__(self):
        if self.encoder_mode not in ("embedding", "positional"):
            raise ShapeError(f"unknown encoder mode {self.encoder_mode!r}")
        if self.encoder_mode == "positional" and self.embeddings.dim % 2 != 0:
            raise ShapeError("positional encoding needs an even embedding dimension")
        if self.scene_extent <= 0:
            raise ShapeError("scene extent must be positive")
        self.heads.validate(self.feature_dim, self.k, self.embed_dim)

    @property
    def k(self) -> int:
        return self.anchors.k

    @property
    def feature_dim(self) -> int:
        return self.anchors.features.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.dim

    @property
    def n_times(self) -> int:
        return self.embeddings.n_times

    @property
    def dtype(self) -> np.dtype:
        return self.anchors.centers.dtype

    def parameters(self) -> dict[str, np.ndarray]:
        """Live views of every learnable tensor, keyed by a stable name."""
        params = {
            "anchors.centers": self.anchors.centers,
            "anchors.features": self.anchors.features,
            "anchors.offsets": self.anchors.offsets,
            "anchors.log_scalings": self.anchors.log_scalings,
        }
        for name, head in self.heads.named():
            for i, (w, b) in enumerate(zip(head.weights, head.biases)):
                params[f"heads.{name}.w{i}"] = w
                params[f"heads.{name}.b{i}"] = b
        params["embeddings"] = self.embeddings.embeddings
        return params

    def astype(self, dtype) -> "SceneModel":
        return SceneModel(
            anchors=AnchorSet(
                self.anchors.centers.astype(dtype),
                self.anchors.features.astype(dtype),
                self.anchors.offsets.astype(dtype),
                self.anchors.log_scalings.astype(dtype),
            ),
            heads=HeadSet(**{n: h.astype(dtype) for n, h in self.heads.named()}),
            embeddings=TimeEmbeddingTable(self.embeddings.embeddings.astype(dtype)),
            scene_extent=self.scene_extent,
            encoder_mode=self.encoder_mode,
        )


def zero_gradients(model: SceneModel) -> dict[str, np.ndarray]:
    """Gradient buffers mirroring model.parameters()."""
    return {name: np.zeros_like(p) for name, p in model.parameters().items()}


def accumulate_gradients(dst: dict[str, np.ndarray], src: dict[str, np.ndarray]):
    for name, g in src.items():
        dst[name] += g


# ---------------------------------------------------------------------------
# time encoders


def positional_time_encoding(t: float, levels: int) -> np.ndarray:
    """Sinusoidal expansion (sin(2^j pi t), cos(2^j pi t)) for j < levels."""
    if levels < 1:
        raise ShapeError("need at least one frequency level")
    freqs = (2.0 ** np.arange(levels)) * np.pi * t
    out = np.empty(2 * levels, dtype=np.float64)
    out[0::2] = np.sin(freqs)
    out[1::2] = np.cos(freqs)
    return out


def interpolate_embedding(
    table: TimeEmbeddingTable, t0: int, t1: int, alpha: float
) -> np.ndarray:
    """Linear blend between two embedding rows.

    Equal indices return the row exactly (not through the arithmetic), so
    interpolating a time with itself renders bit-identically to that time
    for every alpha.
    """
    if t0 == t1:
        return table.row(t0).copy()
    return (1.0 - alpha) * table.row(t0) + alpha * table.row(t1)


# ---------------------------------------------------------------------------
# covariance factorization


def quats_to_rotations(q: np.ndarray) -> np.ndarray:
    """Batched unit quaternion (w, x, y, z) to rotation matrix."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def build_covariance(scale: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T; symmetric PSD with eigenvalues scale**2."""
    quat = np.asarray(quat, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    norm = np.linalg.norm(quat)
    if norm < 1e-12:
        raise NumericalError("zero-norm quaternion")
    rot = quats_to_rotations(quat / norm)
    return (rot * scale**2) @ rot.T


# ---------------------------------------------------------------------------
# decoding


@dataclass
class DecodeCache:
    """Every intermediate needed to run decode_backward exactly."""

    visible: np.ndarray  # (V,) anchor indices into the full set
    delta_raw: np.ndarray  # (V,) camera-anchor distance, scene units
    dvc: np.ndarray  # (V, 3) unit view direction
    x_time: np.ndarray  # (V, F+4+l)
    x_static: np.ndarray  # (V, F+4)
    z: np.ndarray  # (l,) embedding actually used
    time_index: Optional[int]  # table row z came from, if any
    head_caches: dict[str, ForwardCache]
    opacity: np.ndarray  # (V, k) tanh outputs
    c_static: np.ndarray  # (V, k, 3)
    c_dynamic: np.ndarray  # (V, k, 3)
    blend: np.ndarray  # (V, k)
    scale_unclamped: np.ndarray  # (V, k, 3) bool: exp(raw) inside clamp range
    quat_unnorm: np.ndarray  # (V, k, 4) raw + identity bias, pre normalization
    quat_norm: np.ndarray  # (V, k)


@dataclass
class NeuralGaussianBatch:
    """Decoded renderable primitives for one (camera, time) pair."""

    means: np.ndarray  # (M, 3)
    opacities: np.ndarray  # (M,) raw tanh activations in (-1, 1)
    scales: np.ndarray  # (M, 3)
    rotations: np.ndarray  # (M, 4) unit quaternions
    colors: np.ndarray  # (M, 3)
    anchor_index: np.ndarray  # (M,) provenance into the full anchor set
    cache: Optional[DecodeCache] = None

    def __len__(self) -> int:
        return self.means.shape[0]


@dataclass
class GaussianGrads:
    """Upstream gradients w.r.t. the decoded attributes of one batch."""

    means: np.ndarray
    opacities: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray

    @staticmethod
    def zeros(batch: NeuralGaussianBatch) -> "GaussianGrads":
        return GaussianGrads(
            np.zeros_like(batch.means),
            np.zeros_like(batch.opacities),
            np.zeros_like(batch.scales),
            np.zeros_like(batch.rotations),
            np.zeros_like(batch.colors),
        )


def _check_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite output from {name} head")


def _run_head(heads: HeadSet, name: str, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    out, cache = mlp_forward(getattr(heads, name), x)
    _check_finite(name, out)
    return out, cache


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # applied to head outputs only; magnitudes stay small enough that the
    # naive form is fine in float32
    return 1.0 / (1.0 + np.exp(-x))


def _decode_colors(heads: HeadSet, x_time, x_static, k: int):
    cs_raw, cs_cache = _run_head(heads, "static_color", x_static)
    cd_raw, cd_cache = _run_head(heads, "dynamic_color", x_time)
    m_raw, m_cache = _run_head(heads, "blend", x_time)
    v = x_time.shape[0]
    c_s = _sigmoid(cs_raw).reshape(v, k, 3)
    c_d = _sigmoid(cd_raw).reshape(v, k, 3)
    m = _sigmoid(m_raw)
    c = (1.0 - m[..., None]) * c_s + m[..., None] * c_d
    caches = {"static_color": cs_cache, "dynamic_color": cd_cache, "blend": m_cache}
    return c, c_s, c_d, m, caches


def decompose_color(features, delta, dvc, z, heads: HeadSet):
    """Blend a time-invariant and a time-conditioned color term.

    Accepts a single anchor (1-D feature vector) or a batch; returns
    (c, c_static, c_dynamic, m) with colors shaped (..., k, 3).
    """
    single = np.asarray(features).ndim == 1
    features = np.atleast_2d(np.asarray(features))
    v = features.shape[0]
    dt = features.dtype
    delta = np.broadcast_to(np.asarray(delta, dtype=dt).reshape(-1, 1), (v, 1))
    dvc = np.broadcast_to(np.atleast_2d(np.asarray(dvc, dtype=dt)), (v, 3))
    z2 = np.atleast_2d(np.asarray(z, dtype=dt))
    z2 = np.broadcast_to(z2, (v, z2.shape[1]))
    x_static = np.concatenate([features, delta, dvc], axis=1)
    x_time = np.concatenate([x_static, z2], axis=1)
    k = heads.blend.out_dim
    c, c_s, c_d, m, _ = _decode_colors(heads, x_time, x_static, k)
    if single:
        return c[0], c_s[0], c_d[0], m[0]
    return c, c_s, c_d, m


def visible_anchor_mask(model: SceneModel, camera: Camera) -> np.ndarray:
    """Anchors whose center projects inside a 1.2x canvas in front of the
    camera. Purely camera-dependent, so visibility never varies with time."""
    centers = model.anchors.centers.astype(np.float64)
    p = centers @ camera.rotation.T + camera.translation
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * p[:, 0] / z + camera.cx
        v = camera.fy * p[:, 1] / z + camera.cy
    mx = FRUSTUM_MARGIN * camera.width
    my = FRUSTUM_MARGIN * camera.height
    return (
        (z > NEAR_CLIP)
        & (u >= -mx)
        & (u <= camera.width + mx)
        & (v >= -my)
        & (v <= camera.height + my)
    )


def _resolve_z(model: SceneModel, time_index, embedding, encoder_mode: str) -> tuple[np.ndarray, Optional[int]]:
    if embedding is not None:
        z = np.asarray(embedding, dtype=model.dtype)
        if z.shape != (model.embed_dim,):
            raise ShapeError(f"embedding must have shape ({model.embed_dim},), got {z.shape}")
        return z, None
    if time_index is None:
        raise ShapeError("either a time index or an explicit embedding is required")
    if encoder_mode == "embedding":
        t = int(time_index)
        return model.embeddings.row(t).astype(model.dtype, copy=False), t
    # positional: map the discrete index into [0, 1]
    t_max = max(model.n_times - 1, 1)
    t_cont = float(time_index) / t_max
    z = positional_time_encoding(t_cont, model.embed_dim // 2)
    return z.astype(model.dtype), None


def embedding_for_time(model: SceneModel, time_index: int) -> np.ndarray:
    """The z-vector the decoder would use for a discrete time index."""
    z, _ = _resolve_z(model, time_index, None, model.encoder_mode)
    return np.asarray(z, dtype=model.dtype)


def decode_neural_gaussians(
    model: SceneModel,
    camera: Camera,
    time_index: Optional[int] = None,
    embedding: Optional[np.ndarray] = None,
    encoder_mode: Optional[str] = None,
) -> NeuralGaussianBatch:
    """Decode every view-visible anchor into k neural Gaussians."""
    mode = encoder_mode or model.encoder_mode
    z, t_used = _resolve_z(model, time_index, embedding, mode)
    dtype = model.dtype
    k = model.k

    mask = visible_anchor_mask(model, camera)
    visible = np.flatnonzero(mask)
    v = visible.shape[0]
    if v == 0:
        empty = lambda *shape: np.zeros(shape, dtype=dtype)  # noqa: E731
        return NeuralGaussianBatch(
            empty(0, 3), empty(0), empty(0, 3), empty(0, 4), empty(0, 3),
            np.zeros(0, dtype=np.int64), None,
        )

    centers = model.anchors.centers[visible]
    cam_center = camera.center.astype(dtype)
    diff = centers - cam_center
    delta_raw = np.linalg.norm(diff.astype(dtype), axis=1).astype(dtype)
    dvc = diff / delta_raw[:, None]
    delta_n = (delta_raw / dtype.type(model.scene_extent))[:, None]

    feats = model.anchors.features[visible]
    x_static = np.concatenate([feats, delta_n, dvc], axis=1).astype(dtype)
    x_time = np.concatenate([x_static, np.broadcast_to(z, (v, z.shape[0]))], axis=1).astype(dtype)

    # geometry
    scalings = np.exp(model.anchors.log_scalings[visible])
    means = centers[:, None, :] + model.anchors.offsets[visible] * scalings[:, None, :]

    o_raw, o_cache = _run_head(model.heads, "opacity", x_time)
    opacity = np.tanh(o_raw)

    cov_raw, cov_cache = _run_head(model.heads, "covariance", x_static)
    cov_raw = cov_raw.reshape(v, k, 7)
    exp_scale = np.exp(cov_raw[:, :, :3])
    hi = dtype.type(model.scene_extent / 2.0)
    scales = np.clip(exp_scale, dtype.type(SCALE_FLOOR), hi)
    unclamped = (exp_scale > SCALE_FLOOR) & (exp_scale < hi)
    quat_u = cov_raw[:, :, 3:].copy()
    quat_u[:, :, 0] += 1.0  # identity bias keeps the norm away from zero
    qnorm = np.linalg.norm(quat_u, axis=2)
    if np.any(qnorm < 1e-12):
        raise NumericalError("covariance head produced a zero-norm quaternion")
    quats = quat_u / qnorm[..., None]

    colors, c_s, c_d, m, color_caches = _decode_colors(model.heads, x_time, x_static, k)

    cache = DecodeCache(
        visible=visible,
        delta_raw=delta_raw,
        dvc=dvc,
        x_time=x_time,
        x_static=x_static,
        z=z,
        time_index=t_used,
        head_caches={"opacity": o_cache, "covariance": cov_cache, **color_caches},
        opacity=opacity,
        c_static=c_s,
        c_dynamic=c_d,
        blend=m,
        scale_unclamped=unclamped,
        quat_unnorm=quat_u,
        quat_norm=qnorm,
    )
    return NeuralGaussianBatch(
        means=means.reshape(-1, 3).astype(dtype),
        opacities=opacity.reshape(-1).astype(dtype),
        scales=scales.reshape(-1, 3).astype(dtype),
        rotations=quats.reshape(-1, 4).astype(dtype),
        colors=colors.reshape(-1, 3).astype(dtype),
        anchor_index=np.repeat(visible, k),
        cache=cache,
    )


def _head_backward(model, name, cache, upstream, grads):
    wg, bg, input_grad = mlp_backward(getattr(model.heads, name), cache, upstream)
    for i, (dw, db) in enumerate(zip(wg, bg)):
        grads[f"heads.{name}.w{i}"] += dw
        grads[f"heads.{name}.b{i}"] += db
    return input_grad


def decode_backward(
    model: SceneModel, batch: NeuralGaussianBatch, upstream: GaussianGrads
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Exact gradients of decode_neural_gaussians.

    Returns (gradient buffers, d_embedding). When the decode pulled z from
    the embedding table the buffers already contain the row contribution;
    d_embedding is returned either way for callers driving interpolated
    embeddings.
    """
    cache = batch.cache
    if cache is None:
        raise StateError("batch carries no decode cache")
    grads = zero_gradients(model)
    v = cache.visible.shape[0]
    k = model.k
    fdim = model.feature_dim
    if v == 0:
        return grads, np.zeros(model.embed_dim, dtype=model.dtype)
    vis = cache.visible

    d_means = upstream.means.reshape(v, k, 3)
    scalings = np.exp(model.anchors.log_scalings[vis])
    offsets = model.anchors.offsets[vis]

    # mu = mu_a + v_o * s
    grads["anchors.centers"][vis] += d_means.sum(axis=1)
    grads["anchors.offsets"][vis] += d_means * scalings[:, None, :]
    grads["anchors.log_scalings"][vis] += (d_means * offsets).sum(axis=1) * scalings

    # opacity: o = tanh(raw)
    d_o_raw = upstream.opacities.reshape(v, k) * (1.0 - cache.opacity**2)
    d_x_time = _head_backward(model, "opacity", cache.head_caches["opacity"], d_o_raw, grads)

    # covariance: scale = clip(exp(raw_s)), quat = normalize(raw_q + e_w)
    d_scale_raw = upstream.scales.reshape(v, k, 3) * batch.scales.reshape(v, k, 3)
    d_scale_raw = d_scale_raw * cache.scale_unclamped
    d_q = upstream.rotations.reshape(v, k, 4)
    q = cache.quat_unnorm / cache.quat_norm[..., None]
    d_u = (d_q - q * (q * d_q).sum(axis=2, keepdims=True)) / cache.quat_norm[..., None]
    d_cov_raw = np.concatenate([d_scale_raw, d_u], axis=2).reshape(v, 7 * k)
    d_x_static = _head_backward(
        model, "covariance", cache.head_caches["covariance"], d_cov_raw, grads
    )

    # color blend: c = (1 - m) c_s + m c_d
    d_c = upstream.colors.reshape(v, k, 3)
    m = cache.blend
    d_cs = d_c * (1.0 - m)[..., None]
    d_cd = d_c * m[..., None]
    d_m = (d_c * (cache.c_dynamic - cache.c_static)).sum(axis=2)
    d_cs_raw = (d_cs * cache.c_static * (1.0 - cache.c_static)).reshape(v, 3 * k)
    d_cd_raw = (d_cd * cache.c_dynamic * (1.0 - cache.c_dynamic)).reshape(v, 3 * k)
    d_m_raw = d_m * m * (1.0 - m)
    d_x_static += _head_backward(
        model, "static_color", cache.head_caches["static_color"], d_cs_raw, grads
    )
    d_x_time += _head_backward(
        model, "dynamic_color", cache.head_caches["dynamic_color"], d_cd_raw, grads
    )
    d_x_time += _head_backward(model, "blend", cache.head_caches["blend"], d_m_raw, grads)

    # split the head-input gradients: x_time = [f, delta_n, d_vc, z]
    d_f = d_x_time[:, :fdim] + d_x_static[:, :fdim]
    d_delta_n = d_x_time[:, fdim] + d_x_static[:, fdim]
    d_dvc = d_x_time[:, fdim + 1 : fdim + 4] + d_x_static[:, fdim + 1 : fdim + 4]
    d_z = d_x_time[:, fdim + 4 :].sum(axis=0)

    grads["anchors.features"][vis] += d_f
    if cache.time_index is not None:
        grads["embeddings"][cache.time_index] += d_z

    # view geometry feeds the anchor centers too
    dvc = cache.dvc
    r = cache.delta_raw[:, None]
    d_center_view = (d_delta_n[:, None] * dvc) / model.dtype.type(model.scene_extent)
    d_center_view += (d_dvc - dvc * (dvc * d_dvc).sum(axis=1, keepdims=True)) / r
    grads["anchors.centers"][vis] += d_center_view

    return grads, d_z.astype(model.dtype)
