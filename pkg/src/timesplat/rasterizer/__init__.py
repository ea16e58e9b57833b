"""Differentiable tile-based splatting renderer.

Pipeline: project 3D Gaussians to screen-space splats (EWA-style Jacobian
linearization), bin them into 16x16 tiles, depth-sort, then alpha-composite
front to back. The backward pass reconstructs per-pixel transmittance
exactly and returns gradients for every decoded Gaussian attribute.

Gaussians whose tanh opacity activation is non-positive are culled before
projection; that gate is how time-varying visibility is realized with a
fixed primitive pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import NumericalError, StateError
from ..model import (
    NEAR_CLIP,
    Camera,
    GaussianGrads,
    NeuralGaussianBatch,
    SceneModel,
    decode_neural_gaussians,
    quats_to_rotations,
)
from ._kernels import get_backend, kernels, set_backend

__all__ = [
    "Splat2DList",
    "RenderOutput",
    "project",
    "composite_forward",
    "composite_backward",
    "project_backward",
    "render",
    "render_pipeline",
    "get_backend",
    "set_backend",
]

TILE_SIZE = 16
COV2D_DILATION = 0.3
ALPHA_MIN = 1.0 / 255.0
EARLY_STOP_T = 1e-4
ALPHA_CLAMP = 0.99
RADIUS_SIGMAS = 3.0
SINGULAR_DET = 1e-12


@dataclass
class Splat2DList:
    """Screen-space splats (struct of arrays). cov2d is packed symmetric
    (c00, c01, c11) and already includes the isotropic dilation."""

    mean2d: np.ndarray  # (M, 2)
    cov2d: np.ndarray  # (M, 3)
    depth: np.ndarray  # (M,)
    alpha_base: np.ndarray  # (M,) in [0, 0.99]
    color: np.ndarray  # (M, 3)
    source_index: np.ndarray  # (M,) indices into the projected batch
    p_cam: np.ndarray  # (M, 3) camera-space positions, kept for backward
    n_source: int  # size of the batch project() consumed

    def __len__(self) -> int:
        return self.mean2d.shape[0]


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    final_transmittance: np.ndarray  # (H, W)
    n_skipped_singular: int = 0
    max_weight: Optional[np.ndarray] = None  # per splat: max T*alpha over pixels
    # retained compositing state (sorted splat views + tile lists)
    splats: Optional[Splat2DList] = None
    order: Optional[np.ndarray] = None
    tile_ids: Optional[np.ndarray] = None
    tile_offsets: Optional[np.ndarray] = None
    conic: Optional[np.ndarray] = None  # (M, 3) in sorted order
    sorted_arrays: Optional[tuple] = None
    background: Optional[np.ndarray] = None
    tile_size: int = TILE_SIZE
    alpha_min: float = ALPHA_MIN
    stop_t: float = EARLY_STOP_T
    batch: Optional[NeuralGaussianBatch] = None


def _transform_points(points: np.ndarray, rot: np.ndarray, tvec: np.ndarray) -> np.ndarray:
    out = np.empty_like(points)
    for row in range(3):
        out[:, row] = (
            points[:, 0] * rot[row, 0]
            + points[:, 1] * rot[row, 1]
            + points[:, 2] * rot[row, 2]
            + tvec[row]
        )
    return out


def project(
    batch: NeuralGaussianBatch, camera: Camera, near_clip: float = NEAR_CLIP
) -> Splat2DList:
    """Project a decoded batch to screen space.

    Culls Gaussians behind the near plane and those with non-positive
    opacity activation. cov2d = (J W Sigma W^T J^T) + 0.3 I with J the
    pinhole Jacobian at the camera-space position.
    """
    dtype = batch.means.dtype if len(batch) else np.dtype(np.float32)
    rot = camera.rotation.astype(dtype)
    tvec = camera.translation.astype(dtype)
    # written as elementwise column arithmetic (not a matmul) so results are
    # bitwise independent of how many Gaussians are in the batch; culling
    # invariants rely on that
    p_all = _transform_points(batch.means, rot, tvec)
    keep = (batch.opacities > 0) & (p_all[:, 2] > near_clip)
    idx = np.flatnonzero(keep)
    p = p_all[idx]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    fx = dtype.type(camera.fx)
    fy = dtype.type(camera.fy)

    mean2d = np.stack([fx * x / z + dtype.type(camera.cx), fy * y / z + dtype.type(camera.cy)], axis=1)

    quats = batch.rotations[idx]
    qn = np.linalg.norm(quats, axis=1)
    if np.any(qn < 1e-12):
        raise NumericalError("zero-norm quaternion in batch")
    rmats = quats_to_rotations(quats / qn[:, None])
    s2 = batch.scales[idx] ** 2
    sigma3 = np.einsum("nij,nj,nkj->nik", rmats, s2, rmats)

    j = np.zeros((idx.shape[0], 2, 3), dtype=dtype)
    j[:, 0, 0] = fx / z
    j[:, 0, 2] = -fx * x / z**2
    j[:, 1, 1] = fy / z
    j[:, 1, 2] = -fy * y / z**2
    m = j @ rot
    cov = np.einsum("nij,njk,nlk->nil", m, sigma3, m)
    packed = np.stack(
        [
            cov[:, 0, 0] + dtype.type(COV2D_DILATION),
            cov[:, 0, 1],
            cov[:, 1, 1] + dtype.type(COV2D_DILATION),
        ],
        axis=1,
    )

    return Splat2DList(
        mean2d=mean2d.astype(dtype),
        cov2d=packed.astype(dtype),
        depth=z.copy(),
        alpha_base=np.minimum(batch.opacities[idx], dtype.type(ALPHA_CLAMP)),
        color=batch.colors[idx],
        source_index=idx.astype(np.int64),
        p_cam=p,
        n_source=len(batch),
    )


def _build_tile_lists(tx0, tx1, ty0, ty1, include, n_tx, n_ty):
    """Expand per-splat tile rectangles into per-tile splat lists, keeping
    the incoming (depth-sorted) order within each tile."""
    n_tiles = n_tx * n_ty
    which = np.flatnonzero(include)
    if which.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(n_tiles + 1, dtype=np.int64)
    w = tx1[which] - tx0[which] + 1
    h = ty1[which] - ty0[which] + 1
    sizes = (w * h).astype(np.int64)
    total = int(sizes.sum())
    pair_splat = np.repeat(which, sizes)
    starts = np.cumsum(sizes) - sizes
    within = np.arange(total, dtype=np.int64) - np.repeat(starts, sizes)
    w_rep = np.repeat(w, sizes)
    dy = within // w_rep
    dx = within - dy * w_rep
    tiles = (np.repeat(ty0[which], sizes) + dy) * n_tx + np.repeat(tx0[which], sizes) + dx
    by_tile = np.argsort(tiles, kind="stable")
    tile_ids = pair_splat[by_tile]
    counts = np.bincount(tiles, minlength=n_tiles)
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return tile_ids, offsets


def composite_forward(
    splats: Splat2DList,
    camera: Camera,
    tile_size: int = TILE_SIZE,
    background=(0.0, 0.0, 0.0),
    exact: bool = False,
) -> RenderOutput:
    """Alpha-composite depth-sorted splats front to back, per tile.

    `exact` disables the alpha-skip and early-stop thresholds and assigns
    every splat to every tile; used for gradient checks and oracle
    comparisons where thresholds would make finite differences ill-posed.
    """
    h, w = camera.height, camera.width
    dtype = splats.mean2d.dtype if len(splats) else np.dtype(np.float32)
    n_tx = (w + tile_size - 1) // tile_size
    n_ty = (h + tile_size - 1) // tile_size

    order = np.lexsort((splats.source_index, splats.depth))
    mean2d = np.ascontiguousarray(splats.mean2d[order])
    cov = np.ascontiguousarray(splats.cov2d[order])
    alpha = np.ascontiguousarray(splats.alpha_base[order])
    color = np.ascontiguousarray(splats.color[order])

    a, b, c = cov[:, 0], cov[:, 1], cov[:, 2]
    det = a * c - b * b
    valid = det > SINGULAR_DET
    n_skipped = int((~valid).sum())
    inv_det = np.where(valid, 1.0 / np.where(valid, det, 1.0), 0.0).astype(dtype)
    conic = np.stack([c * inv_det, -b * inv_det, a * inv_det], axis=1)
    conic = np.ascontiguousarray(conic.astype(dtype))

    alpha_min = 0.0 if exact else ALPHA_MIN
    stop_t = 0.0 if exact else EARLY_STOP_T

    if exact:
        m = len(splats)
        tx0 = np.zeros(m, dtype=np.int64)
        tx1 = np.full(m, n_tx - 1, dtype=np.int64)
        ty0 = np.zeros(m, dtype=np.int64)
        ty1 = np.full(m, n_ty - 1, dtype=np.int64)
        include = valid
    else:
        lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
        radius = RADIUS_SIGMAS * np.sqrt(np.maximum(lam_max, 0.0))
        ux, uy = mean2d[:, 0], mean2d[:, 1]
        include = (
            valid
            & (alpha >= alpha_min)
            & (ux + radius >= 0.5)
            & (ux - radius <= w - 0.5)
            & (uy + radius >= 0.5)
            & (uy - radius <= h - 0.5)
        )
        tx0 = np.clip(np.floor((ux - radius) / tile_size), 0, n_tx - 1).astype(np.int64)
        tx1 = np.clip(np.floor((ux + radius) / tile_size), 0, n_tx - 1).astype(np.int64)
        ty0 = np.clip(np.floor((uy - radius) / tile_size), 0, n_ty - 1).astype(np.int64)
        ty1 = np.clip(np.floor((uy + radius) / tile_size), 0, n_ty - 1).astype(np.int64)

    tile_ids, tile_offsets = _build_tile_lists(tx0, tx1, ty0, ty1, include, n_tx, n_ty)

    bg = np.ascontiguousarray(np.asarray(background, dtype=dtype))
    image = np.zeros((h, w, 3), dtype=dtype)
    final_t = np.zeros((h, w), dtype=dtype)
    max_w = np.zeros(len(splats), dtype=np.float64)
    kernels().composite_forward(
        h, w, tile_size, mean2d, conic, alpha, color, tile_ids, tile_offsets,
        bg, dtype.type(alpha_min), dtype.type(stop_t), image, final_t, max_w,
    )
    inv_order = np.empty_like(order)
    inv_order[order] = np.arange(len(splats))
    return RenderOutput(
        image=image,
        final_transmittance=final_t,
        max_weight=max_w[inv_order] if len(splats) else max_w,
        n_skipped_singular=n_skipped,
        splats=splats,
        order=order,
        tile_ids=tile_ids,
        tile_offsets=tile_offsets,
        conic=conic,
        sorted_arrays=(mean2d, alpha, color),
        background=bg,
        tile_size=tile_size,
        alpha_min=alpha_min,
        stop_t=stop_t,
    )


def composite_backward(output: RenderOutput, image_grad: np.ndarray):
    """Exact gradients of composite_forward as implemented (threshold
    gating replayed, not differentiated).

    Returns (d_color, d_alpha_base, d_mean2d, d_cov2d) in the original splat
    order; d_cov2d holds full 2x2 symmetric gradient matrices, float64.
    """
    if output.tile_offsets is None or output.splats is None:
        raise StateError("render output carries no retained compositing state")
    splats = output.splats
    h, w = output.image.shape[:2]
    m = len(splats)
    mean2d, alpha, color = output.sorted_arrays
    d_mean_s = np.zeros((m, 2), dtype=np.float64)
    d_conic_s = np.zeros((m, 3), dtype=np.float64)
    d_alpha_s = np.zeros(m, dtype=np.float64)
    d_color_s = np.zeros((m, 3), dtype=np.float64)
    dtype = mean2d.dtype if m else np.dtype(np.float32)
    kernels().composite_backward(
        h, w, output.tile_size, mean2d, output.conic, alpha, color,
        output.tile_ids, output.tile_offsets, output.background,
        dtype.type(output.alpha_min), dtype.type(output.stop_t),
        np.ascontiguousarray(image_grad), d_mean_s, d_conic_s, d_alpha_s, d_color_s,
    )

    # chain conic -> cov2d:  Q = Sigma^-1  =>  dSigma = -Q dQ Q
    qa = output.conic[:, 0].astype(np.float64)
    qb = output.conic[:, 1].astype(np.float64)
    qc = output.conic[:, 2].astype(np.float64)
    q_full = np.empty((m, 2, 2))
    q_full[:, 0, 0] = qa
    q_full[:, 0, 1] = qb
    q_full[:, 1, 0] = qb
    q_full[:, 1, 1] = qc
    dq_full = np.empty((m, 2, 2))
    dq_full[:, 0, 0] = d_conic_s[:, 0]
    dq_full[:, 0, 1] = 0.5 * d_conic_s[:, 1]
    dq_full[:, 1, 0] = 0.5 * d_conic_s[:, 1]
    dq_full[:, 1, 1] = d_conic_s[:, 2]
    d_cov_s = -np.einsum("nij,njk,nkl->nil", q_full, dq_full, q_full)

    inv = np.empty_like(output.order)
    inv[output.order] = np.arange(m)
    return (
        d_color_s[inv],
        d_alpha_s[inv],
        d_mean_s[inv],
        d_cov_s[inv],
    )


def _quat_rotation_backward(qu: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Gradient through the unit-quaternion-to-matrix formula."""
    w, x, y, z = qu[:, 0], qu[:, 1], qu[:, 2], qu[:, 3]
    d = d_rot
    dw = 2 * (-z * d[:, 0, 1] + y * d[:, 0, 2] + z * d[:, 1, 0] - x * d[:, 1, 2] - y * d[:, 2, 0] + x * d[:, 2, 1])
    dx = 2 * (y * d[:, 0, 1] + z * d[:, 0, 2] + y * d[:, 1, 0] - 2 * x * d[:, 1, 1] - w * d[:, 1, 2] + z * d[:, 2, 0] + w * d[:, 2, 1] - 2 * x * d[:, 2, 2])
    dy = 2 * (-2 * y * d[:, 0, 0] + x * d[:, 0, 1] + w * d[:, 0, 2] + x * d[:, 1, 0] + z * d[:, 1, 2] - w * d[:, 2, 0] + z * d[:, 2, 1] - 2 * y * d[:, 2, 2])
    dz = 2 * (-2 * z * d[:, 0, 0] - w * d[:, 0, 1] + x * d[:, 0, 2] + w * d[:, 1, 0] - 2 * z * d[:, 1, 1] + y * d[:, 1, 2] + x * d[:, 2, 0] + y * d[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=1)


def project_backward(
    splats: Splat2DList,
    batch: NeuralGaussianBatch,
    camera: Camera,
    d_mean2d: np.ndarray,
    d_cov2d: np.ndarray,
    d_alpha: Optional[np.ndarray] = None,
    d_color: Optional[np.ndarray] = None,
) -> GaussianGrads:
    """Chain screen-space gradients back to 3D means, scales and rotations,
    including the dJ/dp terms of the projection Jacobian.

    Returns float64 gradients over the full batch (culled rows stay zero).
    """
    m_full = len(batch)
    out = GaussianGrads(
        np.zeros((m_full, 3)), np.zeros(m_full), np.zeros((m_full, 3)),
        np.zeros((m_full, 4)), np.zeros((m_full, 3)),
    )
    idx = splats.source_index
    if idx.size == 0:
        return out
    rot = camera.rotation  # float64
    fx, fy = float(camera.fx), float(camera.fy)
    p = splats.p_cam.astype(np.float64)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]

    quats = batch.rotations[idx].astype(np.float64)
    qn = np.linalg.norm(quats, axis=1)
    qu = quats / qn[:, None]
    rmats = quats_to_rotations(qu)
    s = batch.scales[idx].astype(np.float64)
    sigma3 = np.einsum("nij,nj,nkj->nik", rmats, s**2, rmats)

    j = np.zeros((idx.shape[0], 2, 3))
    j[:, 0, 0] = fx / z
    j[:, 0, 2] = -fx * x / z**2
    j[:, 1, 1] = fy / z
    j[:, 1, 2] = -fy * y / z**2
    m_mat = j @ rot

    dv = d_cov2d.astype(np.float64)  # symmetric full-matrix grads
    d_sigma3 = np.einsum("nji,njk,nkl->nil", m_mat, dv, m_mat)
    d_m = 2.0 * np.einsum("nij,njk,nkl->nil", dv, m_mat, sigma3)
    d_j = np.einsum("nij,kj->nik", d_m, rot)

    du = d_mean2d[:, 0].astype(np.float64)
    dvp = d_mean2d[:, 1].astype(np.float64)
    z2 = z**2
    d_x = fx / z * du - d_j[:, 0, 2] * fx / z2
    d_y = fy / z * dvp - d_j[:, 1, 2] * fy / z2
    d_z = (
        -fx * x / z2 * du
        - fy * y / z2 * dvp
        - d_j[:, 0, 0] * fx / z2
        - d_j[:, 1, 1] * fy / z2
        + d_j[:, 0, 2] * 2.0 * fx * x / z**3
        + d_j[:, 1, 2] * 2.0 * fy * y / z**3
    )
    d_p = np.stack([d_x, d_y, d_z], axis=1)
    out.means[idx] = d_p @ rot

    # Sigma = R diag(s^2) R^T
    t1 = np.einsum("nji,njk,nkl->nil", rmats, d_sigma3, rmats)
    out.scales[idx] = 2.0 * s * np.diagonal(t1, axis1=1, axis2=2)
    d_rmat = 2.0 * np.einsum("nij,njk->nik", d_sigma3, rmats) * (s**2)[:, None, :]
    dq_unit = _quat_rotation_backward(qu, d_rmat)
    dq = (dq_unit - qu * (qu * dq_unit).sum(axis=1, keepdims=True)) / qn[:, None]
    out.rotations[idx] = dq

    if d_alpha is not None:
        kept_o = batch.opacities[idx].astype(np.float64)
        out.opacities[idx] = d_alpha.astype(np.float64) * (kept_o < ALPHA_CLAMP)
    if d_color is not None:
        out.colors[idx] = d_color.astype(np.float64)
    return out


def render_pipeline(
    model: SceneModel,
    camera: Camera,
    time_index=None,
    embedding=None,
    background=(0.0, 0.0, 0.0),
    tile_size: int = TILE_SIZE,
    exact: bool = False,
):
    """decode -> project -> composite; returns (output, batch, splats)."""
    batch = decode_neural_gaussians(model, camera, time_index=time_index, embedding=embedding)
    splats = project(batch, camera)
    output = composite_forward(splats, camera, tile_size=tile_size, background=background, exact=exact)
    output.batch = batch
    return output, batch, splats


def render(
    model: SceneModel,
    camera: Camera,
    time_index=None,
    embedding=None,
    background=(0.0, 0.0, 0.0),
    tile_size: int = TILE_SIZE,
    exact: bool = False,
) -> RenderOutput:
    """Render one view at a discrete time index or an explicit embedding."""
    output, _, _ = render_pipeline(
        model, camera, time_index=time_index, embedding=embedding,
        background=background, tile_size=tile_size, exact=exact,
    )
    return output
