"""Self-generated synthetic scenes: ground truth comes from rendering a
known Gaussian model with this package's own rasterizer.

The standard fixture is a desk-scale still life whose lighting tint changes
per time step, plus one small object that exists only at the last time step
(visibility change). Datasets are written as PNG images, a COLMAP text
model and a manifest, so they exercise the real ingestion path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import image_write, write_colmap_text
from .model import Camera, NeuralGaussianBatch, look_at_camera
from .rasterizer import composite_forward, project

TINTS = [
    (1.00, 0.80, 0.62),  # warm
    (0.62, 0.80, 1.00),  # cool
    (0.72, 1.00, 0.70),  # green-ish
    (1.00, 0.68, 0.88),  # pink-ish
]
BRIGHTNESS = [1.0, 0.82, 0.92, 0.75]


@dataclass
class SyntheticScene:
    means: np.ndarray  # (M, 3)
    scales: np.ndarray  # (M, 3)
    rotations: np.ndarray  # (M, 4)
    albedo: np.ndarray  # (M, 3)
    opacities: np.ndarray  # (T, M) tanh-activation values per time
    colors: np.ndarray  # (T, M, 3)
    extra_index: np.ndarray  # indices of the time-gated object's Gaussians
    extra_box: tuple  # (min_xyz, max_xyz) around the gated object
    n_times: int
    image_size: int
    train_cameras: list  # per time: train_cameras[t] is a list of cameras
    test_cameras: list
    extent: float
    background: tuple = (0.0, 0.0, 0.0)

    def all_train_cameras(self):
        seen = []
        for cams in self.train_cameras:
            seen.extend(cams)
        return seen


def camera_ring(n, image_size, radius=5.0, look=(0.0, 0.0, 0.45), focal_factor=1.1,
                elevations=(0.62, 0.38), phase=0.0):
    """n pinhole cameras on a ring, alternating between two elevations."""
    focal = focal_factor * image_size
    cams = []
    for j in range(n):
        az = 2 * np.pi * (j + phase) / n
        elev = elevations[j % len(elevations)]
        eye = (radius * np.cos(az), radius * np.sin(az), radius * elev)
        cams.append(
            look_at_camera(eye, look, fx=focal, fy=focal, width=image_size, height=image_size)
        )
    return cams


def _sphere_points(rng, n, center, radius):
    v = rng.normal(0, 1, (n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.uniform(0.55, 1.0, (n, 1)) ** (1 / 3)
    return np.asarray(center) + v * r


def make_scene(
    n_times: int = 2,
    seed: int = 0,
    image_size: int = 64,
    n_train_cams: int = 8,
    n_test_cams: int = 2,
    include_extra: bool = True,
) -> SyntheticScene:
    """A ~300-Gaussian desk scene under n_times lighting conditions."""
    assert 1 <= n_times <= len(TINTS)
    rng = np.random.default_rng(seed)

    parts = []
    # ground slab with strong per-Gaussian speckle: behind-object appearance
    # then varies sharply with parallax, which keeps "repaint the backdrop"
    # solutions expensive relative to opacity gating
    side = 12
    gx, gy = np.meshgrid(np.linspace(-1.6, 1.6, side), np.linspace(-1.6, 1.6, side))
    ground = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, 0.0)], axis=1)
    ground += rng.normal(0, 0.04, ground.shape)
    ground_scale = np.tile([0.19, 0.19, 0.05], (ground.shape[0], 1))
    checker = ((gx.ravel() * 3).astype(int) + (gy.ravel() * 3).astype(int)) % 2
    ground_albedo = np.where(
        checker[:, None] > 0, [0.68, 0.58, 0.38], [0.30, 0.36, 0.26]
    ) + rng.normal(0, 0.13, (ground.shape[0], 3))
    parts.append((ground, ground_scale, ground_albedo))

    # central sphere
    sph = _sphere_points(rng, 50, (-0.45, 0.15, 0.72), 0.62)
    sph_scale = rng.uniform(0.09, 0.16, (50, 3))
    sph_albedo = np.tile([0.25, 0.45, 0.75], (50, 1)) + rng.normal(0, 0.09, (50, 3))
    parts.append((sph, sph_scale, sph_albedo))

    # box-ish cluster
    box = rng.uniform([-0.35, -0.3, 0.0], [0.35, 0.3, 0.75], (30, 3)) + [0.85, -0.55, 0.0]
    box_scale = rng.uniform(0.08, 0.15, (30, 3))
    box_albedo = np.tile([0.78, 0.55, 0.25], (30, 1)) + rng.normal(0, 0.09, (30, 3))
    parts.append((box, box_scale, box_albedo))

    means = np.concatenate([p[0] for p in parts])
    scales = np.concatenate([p[1] for p in parts])
    albedo = np.concatenate([p[2] for p in parts])
    n_base = means.shape[0]

    # the gated object is big and hovers clear of all static geometry: at
    # t=1 it hides the speckled ground (and, from many azimuths, the
    # clusters), so at t=0 its splats face high-contrast, parallax-rich
    # content that per-view color matching cannot reproduce; the only way to
    # zero that error is the opacity gate. Spatial separation keeps the
    # object's neighborhood free of legitimately two-time splats.
    extra_center = np.array([0.75, 0.85, 0.9])
    extra_radius = 0.5
    if include_extra:
        n_extra = 76
        extra = _sphere_points(rng, n_extra, extra_center, extra_radius)
        extra_scale = rng.uniform(0.12, 0.2, (n_extra, 3))
        extra_albedo = np.tile([0.85, 0.2, 0.55], (n_extra, 1)) + rng.normal(0, 0.05, (n_extra, 3))
        means = np.concatenate([means, extra])
        scales = np.concatenate([scales, extra_scale])
        albedo = np.concatenate([albedo, extra_albedo])
        extra_index = np.arange(n_base, n_base + n_extra)
    else:
        extra_index = np.zeros(0, dtype=np.int64)

    m = means.shape[0]
    quats = rng.normal(0, 1, (m, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    albedo = np.clip(albedo, 0.05, 0.95)

    base_opacity = rng.uniform(0.82, 0.96, m)
    opacities = np.tile(base_opacity, (n_times, 1))
    colors = np.zeros((n_times, m, 3))
    for t in range(n_times):
        tinted = albedo * np.asarray(TINTS[t]) * BRIGHTNESS[t]
        colors[t] = np.clip(tinted, 0.02, 0.98)
        if include_extra:
            if t == n_times - 1:
                opacities[t, extra_index] = rng.uniform(0.85, 0.95, extra_index.size)
            else:
                opacities[t, extra_index] = -0.9

    # each capture time gets its own ring of poses (photos taken at
    # different times come from different spots); test poses sit between
    train_cams = [
        camera_ring(n_train_cams, image_size, phase=t / max(n_times, 1))
        for t in range(n_times)
    ]
    test_cams = camera_ring(n_test_cams, image_size, elevations=(0.48,), phase=0.31)

    pad = extra_radius + 0.08
    # non-black backdrop: hiding a splat by painting it black is then never
    # photometrically free, so visibility changes must use the opacity gate
    background = (0.32, 0.36, 0.42)
    return SyntheticScene(
        means=means,
        scales=scales,
        rotations=quats,
        albedo=albedo,
        opacities=opacities,
        colors=colors,
        extra_index=extra_index,
        extra_box=(extra_center - pad, extra_center + pad),
        n_times=n_times,
        image_size=image_size,
        train_cameras=train_cams,
        test_cameras=test_cams,
        extent=scene_extent(means),
        background=background,
    )


def scene_extent(points: np.ndarray) -> float:
    centroid = points.mean(axis=0)
    return float(2.0 * np.linalg.norm(points - centroid, axis=1).max())


def reference_batch(scene: SyntheticScene, t: int) -> NeuralGaussianBatch:
    m = scene.means.shape[0]
    return NeuralGaussianBatch(
        means=scene.means.astype(np.float32),
        opacities=scene.opacities[t].astype(np.float32),
        scales=scene.scales.astype(np.float32),
        rotations=scene.rotations.astype(np.float32),
        colors=scene.colors[t].astype(np.float32),
        anchor_index=np.arange(m, dtype=np.int64),
    )


def render_reference(scene: SyntheticScene, camera: Camera, t: int) -> np.ndarray:
    batch = reference_batch(scene, t)
    splats = project(batch, camera)
    return composite_forward(splats, camera, background=scene.background).image


def _rotation_to_qvec(rot: np.ndarray) -> np.ndarray:
    w = np.sqrt(max(0.0, 1.0 + rot[0, 0] + rot[1, 1] + rot[2, 2])) / 2.0
    if w > 1e-6:
        x = (rot[2, 1] - rot[1, 2]) / (4 * w)
        y = (rot[0, 2] - rot[2, 0]) / (4 * w)
        z = (rot[1, 0] - rot[0, 1]) / (4 * w)
    else:  # w ~ 0: pick the dominant diagonal term
        d = np.diagonal(rot)
        i = int(np.argmax(d))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1e-12, 1.0 + rot[i, i] - rot[j, j] - rot[k, k])) * 2.0
        q = np.zeros(3)
        q[i] = s / 4.0
        q[j] = (rot[j, i] + rot[i, j]) / s
        q[k] = (rot[k, i] + rot[i, k]) / s
        w = (rot[k, j] - rot[j, k]) / s
        x, y, z = q
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


def write_dataset(scene: SyntheticScene, out_dir, point_noise: float = 0.01, seed: int = 1):
    """Render and write the full dataset: PNGs, COLMAP text model, manifest.

    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    size = scene.image_size
    first_cam = scene.train_cameras[0][0]
    cameras = {
        1: {
            "model": "PINHOLE", "width": size, "height": size,
            "fx": first_cam.fx, "fy": first_cam.fy,
            "cx": size / 2.0, "cy": size / 2.0,
        }
    }
    colmap_images = []
    frames = []
    image_id = 1

    def register(cam, name):
        nonlocal image_id
        colmap_images.append(
            (image_id, _rotation_to_qvec(cam.rotation), cam.translation, 1, name)
        )
        image_id += 1

    # each time step is photographed from its own ring of poses
    for t in range(scene.n_times):
        for j, cam in enumerate(scene.train_cameras[t]):
            name = f"train_t{t}_cam{j}"
            register(cam, name)
            fname = f"images/{name}.png"
            image_write(out_dir / fname, render_reference(scene, cam, t))
            frames.append(
                {"image": fname, "time": f"time-{t}", "split": "train",
                 "camera": f"colmap:{name}"}
            )
    # held-out poses are shared across times
    for j, cam in enumerate(scene.test_cameras):
        name = f"test_cam{j}"
        register(cam, name)
        for t in range(scene.n_times):
            fname = f"images/{name}_t{t}.png"
            image_write(out_dir / fname, render_reference(scene, cam, t))
            frames.append(
                {"image": fname, "time": f"time-{t}", "split": "test",
                 "camera": f"colmap:{name}"}
            )

    points = scene.means + rng.normal(0, point_noise, scene.means.shape)
    write_colmap_text(
        out_dir / "colmap", cameras, colmap_images, points,
        point_colors=np.clip(scene.albedo * 255, 0, 255).astype(int),
    )
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps({"sfm": "colmap", "frames": frames}, indent=1))
    return manifest_path
