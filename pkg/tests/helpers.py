"""Shared test utilities: finite differences and tiny scene factories."""

import numpy as np

from timesplat.model import (
    AnchorSet,
    HeadSet,
    SceneModel,
    TimeEmbeddingTable,
    default_heads,
    look_at_camera,
)


def central_diff(f, x, eps=1e-5):
    """Central finite differences of scalar f over every entry of x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_err(analytic, numeric):
    """Relative error between gradient tensors, as a single scalar."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(n.ravel()), 1e-12)
    return np.linalg.norm((a - n).ravel()) / denom


def make_model(
    n_anchors=5,
    k=3,
    feature_dim=8,
    embed_dim=4,
    n_times=3,
    seed=0,
    dtype=np.float64,
    extent=4.0,
    hidden=16,
    encoder_mode="embedding",
):
    rng = np.random.default_rng(seed)
    anchors = AnchorSet(
        centers=rng.uniform(-1.2, 1.2, (n_anchors, 3)).astype(dtype),
        features=rng.normal(0, 0.4, (n_anchors, feature_dim)).astype(dtype),
        offsets=rng.normal(0, 0.5, (n_anchors, k, 3)).astype(dtype),
        log_scalings=rng.normal(-1.5, 0.2, (n_anchors, 3)).astype(dtype),
    )
    heads = default_heads(feature_dim, k, embed_dim, hidden=hidden, seed=seed + 1, dtype=dtype)
    table = TimeEmbeddingTable(rng.normal(0, 0.4, (n_times, embed_dim)).astype(dtype))
    return SceneModel(
        anchors=anchors,
        heads=heads,
        embeddings=table,
        scene_extent=extent,
        encoder_mode=encoder_mode,
    )


def make_camera(width=48, height=40, eye=(0.0, -5.0, 1.0), target=(0.0, 0.0, 0.0), f=55.0):
    return look_at_camera(eye, target, fx=f, fy=f, width=width, height=height)


def tiny_scene(n_times=1, image_size=48, n_train=6, n_test=2, color=(0.8, 0.2, 0.2)):
    """A single-Gaussian synthetic scene rendered by the package's own
    rasterizer, for optimizer tests."""
    from timesplat.synthetic import SyntheticScene, camera_ring, scene_extent

    means = np.array([[0.0, 0.0, 0.45]])
    colors = np.stack([np.array([color]) * (1.0 - 0.35 * t) for t in range(n_times)])
    return SyntheticScene(
        means=means,
        scales=np.array([[0.28, 0.22, 0.25]]),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        albedo=np.array([color]),
        opacities=np.full((n_times, 1), 0.92),
        colors=colors,
        extra_index=np.zeros(0, dtype=np.int64),
        extra_box=(np.zeros(3), np.zeros(3)),
        n_times=n_times,
        image_size=image_size,
        train_cameras=[camera_ring(n_train, image_size)] * n_times,
        test_cameras=camera_ring(n_test, image_size, elevations=(0.5,), phase=0.5),
        extent=2.5,
    )


def random_batch(rng, m, width=48, height=40, dtype=np.float64, depth_range=(2.0, 8.0)):
    """Raw splattable Gaussians scattered in front of the test camera."""
    from timesplat.model import NeuralGaussianBatch

    cam = make_camera(width=width, height=height)
    center = cam.center
    fwd = cam.rotation[2]
    right = cam.rotation[0]
    down = cam.rotation[1]
    depth = rng.uniform(*depth_range, m)
    lat = rng.uniform(-0.45, 0.45, (m, 2)) * depth[:, None]
    means = center + depth[:, None] * fwd + lat[:, 0:1] * right + lat[:, 1:2] * down
    quats = rng.normal(0, 1, (m, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    batch = NeuralGaussianBatch(
        means=means.astype(dtype),
        opacities=rng.uniform(0.05, 0.95, m).astype(dtype),
        scales=rng.uniform(0.05, 0.35, (m, 3)).astype(dtype),
        rotations=quats.astype(dtype),
        colors=rng.uniform(0, 1, (m, 3)).astype(dtype),
        anchor_index=np.zeros(m, dtype=np.int64),
    )
    return batch, cam
