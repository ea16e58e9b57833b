"""Training data ingestion: scene manifests, COLMAP text models, PNG IO.

A manifest is a JSON file binding images to cameras, timestamp tags and a
train/test split:

    {
      "sfm": "<colmap_text_dir>",
      "frames": [
        {"image": "img/a.png", "time": "2021-06", "split": "train",
         "camera": "colmap:a.png"},
        ...
      ]
    }

Paths are resolved relative to the manifest location. Distinct timestamp
tags are sorted ascending and assigned indices 0..T-1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError, ParseError, UnsupportedError
from .model import Camera


@dataclass
class SfmPointCloud:
    positions: np.ndarray  # (P, 3)
    colors: Optional[np.ndarray] = None  # (P, 3) in [0,1]

    def __post_init__(self):
        if self.positions.ndim != 2 or self.positions.shape[1] != 3 or self.positions.shape[0] < 1:
            raise FormatError("point cloud must be a non-empty (P, 3) array")
        if not np.all(np.isfinite(self.positions)):
            raise FormatError("point cloud contains non-finite positions")


@dataclass
class ColmapImage:
    image_id: int
    name: str
    camera: Camera


@dataclass
class ColmapModel:
    cameras: dict  # camera_id -> dict(model, width, height, params)
    images: dict  # image name -> ColmapImage
    points: SfmPointCloud


def _qvec_to_rotation(qvec: np.ndarray) -> np.ndarray:
    w, x, y, z = qvec / np.linalg.norm(qvec)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _data_lines(path: Path):
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if stripped and not stripped.startswith("#"):
                yield lineno, stripped


def _parse_cameras(path: Path) -> dict:
    cameras = {}
    for lineno, line in _data_lines(path):
        elems = line.split()
        try:
            cam_id = int(elems[0])
            model = elems[1]
            width, height = int(elems[2]), int(elems[3])
            params = [float(v) for v in elems[4:]]
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path.name}:{lineno}: malformed camera line") from exc
        if model == "PINHOLE":
            if len(params) != 4:
                raise ParseError(f"{path.name}:{lineno}: PINHOLE needs 4 params")
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ParseError(f"{path.name}:{lineno}: SIMPLE_PINHOLE needs 3 params")
            f, cx, cy = params
            fx = fy = f
        else:
            raise UnsupportedError(f"unsupported camera model {model!r} (camera {cam_id})")
        cameras[cam_id] = {
            "model": model, "width": width, "height": height,
            "fx": fx, "fy": fy, "cx": cx, "cy": cy,
        }
    return cameras


def _parse_images(path: Path, cameras: dict) -> dict:
    # two lines per image: the pose line, then a 2D-observations line that
    # may legitimately be empty
    images = {}
    current = None
    with open(path, "r") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if line.startswith("#"):
                continue
            if current is None:
                if not line:
                    continue
                elems = line.split()
                if len(elems) < 10:
                    raise ParseError(f"{path.name}:{lineno}: image line needs 10 fields")
                try:
                    image_id = int(elems[0])
                    qvec = np.array([float(v) for v in elems[1:5]])
                    tvec = np.array([float(v) for v in elems[5:8]])
                    camera_id = int(elems[8])
                except ValueError as exc:
                    raise ParseError(f"{path.name}:{lineno}: malformed image line") from exc
                name = elems[9]
                if camera_id not in cameras:
                    raise ParseError(f"{path.name}:{lineno}: unknown camera id {camera_id}")
                intr = cameras[camera_id]
                camera = Camera(
                    fx=intr["fx"], fy=intr["fy"], cx=intr["cx"], cy=intr["cy"],
                    width=intr["width"], height=intr["height"],
                    rotation=_qvec_to_rotation(qvec), translation=tvec,
                )
                current = ColmapImage(image_id=image_id, name=name, camera=camera)
            else:
                if current.name in images:
                    raise ParseError(f"{path.name}:{lineno}: duplicate image name {current.name!r}")
                images[current.name] = current
                current = None
    if current is not None:
        raise ParseError(f"{path.name}: truncated file, observation line missing")
    return images


def _parse_points(path: Path) -> SfmPointCloud:
    positions = []
    colors = []
    for lineno, line in _data_lines(path):
        elems = line.split()
        if len(elems) < 7:
            raise ParseError(f"{path.name}:{lineno}: point line needs at least 7 fields")
        try:
            positions.append([float(elems[1]), float(elems[2]), float(elems[3])])
            colors.append([int(elems[4]), int(elems[5]), int(elems[6])])
        except ValueError as exc:
            raise ParseError(f"{path.name}:{lineno}: malformed point line") from exc
    if not positions:
        raise ParseError(f"{path.name}: no 3D points")
    return SfmPointCloud(
        positions=np.asarray(positions, dtype=np.float64),
        colors=np.asarray(colors, dtype=np.float64) / 255.0,
    )


def load_colmap_text(directory) -> ColmapModel:
    """Parse cameras.txt / images.txt / points3D.txt from a COLMAP text
    export (binary models must be converted with `colmap model_converter`)."""
    directory = Path(directory)
    for fname in ("cameras.txt", "images.txt", "points3D.txt"):
        if not (directory / fname).exists():
            raise ConfigError(f"missing {fname} in {directory}")
    cameras = _parse_cameras(directory / "cameras.txt")
    images = _parse_images(directory / "images.txt", cameras)
    points = _parse_points(directory / "points3D.txt")
    return ColmapModel(cameras=cameras, images=images, points=points)


def write_colmap_text(directory, cameras: dict, images: list, points: np.ndarray, point_colors=None):
    """Write a minimal COLMAP text model (used by fixture generation).

    `cameras`: id -> dict(model,width,height,fx,fy,cx,cy); `images`: list of
    (image_id, qvec, tvec, camera_id, name); `points`: (P, 3).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "cameras.txt", "w") as f:
        f.write("# Camera list: CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for cam_id, c in cameras.items():
            if c["model"] == "PINHOLE":
                params = f"{c['fx']} {c['fy']} {c['cx']} {c['cy']}"
            else:
                params = f"{c['fx']} {c['cx']} {c['cy']}"
            f.write(f"{cam_id} {c['model']} {c['width']} {c['height']} {params}\n")
    with open(directory / "images.txt", "w") as f:
        f.write("# Image list: IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        for image_id, qvec, tvec, camera_id, name in images:
            q = " ".join(repr(float(v)) for v in qvec)
            t = " ".join(repr(float(v)) for v in tvec)
            f.write(f"{image_id} {q} {t} {camera_id} {name}\n\n")
    with open(directory / "points3D.txt", "w") as f:
        f.write("# 3D point list: POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]\n")
        colors = point_colors if point_colors is not None else np.full((len(points), 3), 128)
        for i, (p, c) in enumerate(zip(points, colors)):
            f.write(
                f"{i + 1} {repr(float(p[0]))} {repr(float(p[1]))} {repr(float(p[2]))} "
                f"{int(c[0])} {int(c[1])} {int(c[2])} 0.5\n"
            )


# ---------------------------------------------------------------------------
# images


def image_read(path) -> np.ndarray:
    """Read an 8-bit RGB(A) PNG into an (H, W, 3) float32 array in [0, 1]."""
    with Image.open(path) as img:
        if img.mode == "RGBA":
            arr = np.asarray(img)[:, :, :3]  # alpha dropped
        elif img.mode == "RGB":
            arr = np.asarray(img)
        else:
            raise FormatError(f"{path}: unsupported image mode {img.mode!r}, need 8-bit RGB(A)")
    return arr.astype(np.float32) / np.float32(255.0)


def image_write(path, image: np.ndarray):
    """Write an (H, W, 3) [0,1] array as an 8-bit RGB PNG, rounding half up."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"expected (H, W, 3) image, got {image.shape}")
    quantized = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class TrainSample:
    image_path: Path
    camera: Camera
    time_tag: str
    time_index: int
    split: str
    name: str


@dataclass
class SceneManifest:
    entries: list  # TrainSample, all splits
    sfm: SfmPointCloud
    colmap: ColmapModel
    time_tags: list  # sorted distinct tags; index == time_index
    path: Path
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_times(self) -> int:
        return len(self.time_tags)

    def samples(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def image(self, sample: TrainSample) -> np.ndarray:
        key = str(sample.image_path)
        if key not in self._cache:
            img = image_read(sample.image_path)
            h, w = img.shape[:2]
            if (w, h) != (sample.camera.width, sample.camera.height):
                raise ConfigError(
                    f"{sample.image_path}: image is {w}x{h} but camera says "
                    f"{sample.camera.width}x{sample.camera.height}"
                )
            self._cache[key] = img
        return self._cache[key]


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    if "sfm" not in spec or "frames" not in spec:
        raise ConfigError(f"{path}: manifest needs 'sfm' and 'frames' keys")
    root = path.parent
    colmap = load_colmap_text(root / spec["sfm"])

    frames = spec["frames"]
    if not frames:
        raise ConfigError(f"{path}: no frames")
    tags = sorted({str(fr["time"]) for fr in frames})
    tag_index = {t: i for i, t in enumerate(tags)}

    entries = []
    seen = set()
    for i, fr in enumerate(frames):
        for key in ("image", "time", "split", "camera"):
            if key not in fr:
                raise ConfigError(f"{path}: frame {i} missing '{key}'")
        img_path = root / fr["image"]
        if str(img_path) in seen:
            raise ConfigError(f"{path}: duplicate image entry {fr['image']!r}")
        seen.add(str(img_path))
        if not img_path.exists():
            raise ConfigError(f"{path}: image not found: {img_path}")
        split = fr["split"]
        if split not in ("train", "test"):
            raise ConfigError(f"{path}: frame {i} split must be train or test")
        cam_ref = fr["camera"]
        if not cam_ref.startswith("colmap:"):
            raise ConfigError(f"{path}: frame {i} camera must be 'colmap:<image_name>'")
        cam_name = cam_ref[len("colmap:") :]
        if cam_name not in colmap.images:
            raise ConfigError(f"{path}: frame {i} references unknown COLMAP image {cam_name!r}")
        entries.append(
            TrainSample(
                image_path=img_path,
                camera=colmap.images[cam_name].camera,
                time_tag=str(fr["time"]),
                time_index=tag_index[str(fr["time"])],
                split=split,
                name=fr["image"],
            )
        )
    if not any(e.split == "train" for e in entries):
        raise ConfigError(f"{path}: empty train split")
    return SceneManifest(
        entries=entries, sfm=colmap.points, colmap=colmap, time_tags=tags, path=path
    )
