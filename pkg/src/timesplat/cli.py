"""Command-line interface.

Subcommands: train, render, eval, interpolate, export, bench. Human-readable
output goes to stderr; machine-readable JSON goes to stdout. Exit codes:
0 success, 2 usage/config error, 3 runtime/numerical error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time as _time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .dataset import image_write, load_manifest
from .errors import ConfigError, FormatError, NumericalError, ParseError, ShapeError, StateError, TimesplatError, UnsupportedError
from .loss_metrics import psnr, ssim
from .model import Camera, decode_neural_gaussians, embedding_for_time, interpolate_embedding, look_at_camera
from .optim import TrainConfig, train
from .rasterizer import composite_forward, get_backend, project, render, set_backend
from . import scene_io

USAGE_ERRORS = (ConfigError, ParseError, FormatError, UnsupportedError, FileNotFoundError, IndexError)
RUNTIME_ERRORS = (NumericalError, StateError, ShapeError, TimesplatError)


def _say(msg: str):
    print(msg, file=sys.stderr)


def _emit(record: dict):
    json.dump(record, sys.stdout)
    sys.stdout.write("\n")
    sys.stdout.flush()


def _echo_config(name: str, resolved: dict):
    _say(f"[timesplat {name}] resolved config: {json.dumps(resolved, default=str)}")


def _parse_background(text: str):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise ConfigError("--background needs r,g,b")
    return tuple(parts)


def _apply_threads(n):
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    try:
        import numba

        numba.set_num_threads(n)
    except (ImportError, ValueError):
        pass


def _load_train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            values = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    if args.iterations is not None:
        values["iterations"] = args.iterations
    if args.seed is not None:
        values["seed"] = args.seed
    if args.encoder is not None:
        values["encoder_mode"] = {"embedding": "embedding", "pe": "positional"}[args.encoder]
    if args.no_adapt:
        values["adapt"] = False
    if args.checkpoint_interval is not None:
        values["checkpoint_interval"] = args.checkpoint_interval
    try:
        return TrainConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(f"bad config values: {exc}") from exc


def _resolve_camera(args) -> Camera:
    if args.camera:
        if not args.camera.startswith("colmap:"):
            raise ConfigError("--camera must be 'colmap:<image_name>'")
        if not args.manifest:
            raise ConfigError("--camera colmap:<name> requires --manifest")
        manifest = load_manifest(args.manifest)
        name = args.camera[len("colmap:") :]
        if name not in manifest.colmap.images:
            raise ConfigError(f"camera {name!r} not found in the manifest's COLMAP model")
        return manifest.colmap.images[name].camera
    if args.pose:
        vals = [float(v) for v in args.pose.split(",")]
        if len(vals) != 12:
            raise ConfigError("--pose needs 12 comma-separated numbers (row-major R, then t)")
        if not args.intrinsics or not args.size:
            raise ConfigError("--pose requires --intrinsics fx,fy,cx,cy and --size WxH")
        fx, fy, cx, cy = (float(v) for v in args.intrinsics.split(","))
        w, h = (int(v) for v in args.size.lower().split("x"))
        return Camera(
            fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h,
            rotation=np.array(vals[:9]).reshape(3, 3), translation=np.array(vals[9:]),
        )
    raise ConfigError("specify a camera: --camera colmap:<name> with --manifest, or --pose")


def _time_or_embedding(args, model):
    """Returns (time_index, embedding) with exactly one set."""
    if args.alpha is not None:
        parts = args.alpha.split(":")
        if len(parts) != 3:
            raise ConfigError("--alpha needs t0:t1:a")
        t0, t1, a = int(parts[0]), int(parts[1]), float(parts[2])
        z0 = embedding_for_time(model, t0)
        z1 = embedding_for_time(model, t1)
        return None, ((1.0 - a) * z0 + a * z1).astype(model.dtype)
    if args.time is None:
        raise ConfigError("specify --time or --alpha t0:t1:a")
    if not 0 <= args.time < model.n_times:
        raise IndexError(f"time index {args.time} outside [0, {model.n_times})")
    return args.time, None


def _geometry_digest(batch) -> dict:
    return {
        "count": len(batch),
        "means_sha256": hashlib.sha256(np.ascontiguousarray(batch.means).tobytes()).hexdigest(),
        "scales_sha256": hashlib.sha256(np.ascontiguousarray(batch.scales).tobytes()).hexdigest(),
        "rotations_sha256": hashlib.sha256(
            np.ascontiguousarray(batch.rotations).tobytes()
        ).hexdigest(),
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    config = _load_train_config(args)
    _echo_config("train", config.to_dict())
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    metrics_path = out_dir / "metrics.jsonl"
    resume = scene_io.load_checkpoint(args.resume) if args.resume else None
    mode = "a" if resume else "w"
    with open(metrics_path, mode) as metrics:
        def log_fn(entry):
            json.dump(entry, metrics)
            metrics.write("\n")
            if entry["iteration"] % 200 == 0 or entry["iteration"] == 1:
                _say(
                    f"iter {entry['iteration']}: total={entry['total']:.5f} "
                    f"l1={entry['l1']:.5f} anchors={entry['anchors']}"
                )

        result = train(manifest, config, out_dir=str(out_dir), resume=resume, log_fn=log_fn)

    scene_path = out_dir / "scene.gtms"
    scene_io.save_scene(result.model, scene_path)
    scene_io.save_checkpoint(
        out_dir / f"checkpoint_{config.iterations:06d}.gtmc",
        result.model, config.iterations, result.adam.step,
        {k: (result.adam.m[k], result.adam.v[k]) for k in result.adam.m},
        result.rng.bit_generator.state, result.stats, config.to_dict(),
    )
    _emit(
        {
            "scene": str(scene_path),
            "metrics": str(metrics_path),
            "iterations": config.iterations,
            "anchors": result.model.anchors.n_anchors,
            "final_total": result.log[-1]["total"] if result.log else None,
        }
    )
    return 0


def cmd_render(args) -> int:
    model = scene_io.load_scene(args.scene)
    camera = _resolve_camera(args)
    time_index, embedding = _time_or_embedding(args, model)
    _echo_config("render", {"scene": args.scene, "time": time_index, "alpha": args.alpha, "out": args.out})
    background = _parse_background(args.background)
    batch = decode_neural_gaussians(model, camera, time_index=time_index, embedding=embedding)
    splats = project(batch, camera)
    output = composite_forward(splats, camera, background=background)
    image_write(args.out, output.image)
    record = {"out": str(args.out), "splats": len(splats), "anchors": model.anchors.n_anchors}
    if args.dump_geometry:
        digest = _geometry_digest(batch)
        Path(args.dump_geometry).write_text(json.dumps(digest, indent=1))
        record["geometry"] = digest["means_sha256"]
    _emit(record)
    return 0


def cmd_eval(args) -> int:
    model = scene_io.load_scene(args.scene)
    manifest = load_manifest(args.manifest)
    samples = manifest.samples(args.split)
    if not samples:
        raise ConfigError(f"split {args.split!r} is empty")
    _echo_config("eval", {"scene": args.scene, "split": args.split, "views": len(samples)})
    background = _parse_background(args.background)
    views = []
    for s in samples:
        out = render(model, s.camera, time_index=s.time_index, background=background)
        gt = manifest.image(s)
        views.append(
            {
                "view": s.name,
                "time": s.time_tag,
                "psnr": psnr(out.image, gt),
                "ssim": float(ssim(out.image.astype(np.float64), gt.astype(np.float64))[0]),
            }
        )
    _emit(
        {
            "split": args.split,
            "mean_psnr": float(np.mean([v["psnr"] for v in views])),
            "mean_ssim": float(np.mean([v["ssim"] for v in views])),
            "views": views,
        }
    )
    return 0


def cmd_interpolate(args) -> int:
    model = scene_io.load_scene(args.scene)
    camera = _resolve_camera(args)
    if args.steps < 2:
        raise ConfigError("--steps must be >= 2 so both endpoints are rendered")
    for t in (args.t0, args.t1):
        if not 0 <= t < model.n_times:
            raise IndexError(f"time index {t} outside [0, {model.n_times})")
    _echo_config(
        "interpolate",
        {"scene": args.scene, "t0": args.t0, "t1": args.t1, "steps": args.steps, "out": args.out},
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    background = _parse_background(args.background)
    z0 = embedding_for_time(model, args.t0)
    z1 = embedding_for_time(model, args.t1)
    frames = []
    geometry = []
    for i, alpha in enumerate(np.linspace(0.0, 1.0, args.steps)):
        z = ((1.0 - alpha) * z0 + alpha * z1).astype(model.dtype)
        batch = decode_neural_gaussians(model, camera, embedding=z)
        splats = project(batch, camera)
        output = composite_forward(splats, camera, background=background)
        frame = out_dir / f"frame_{i:03d}.png"
        image_write(frame, output.image)
        frames.append(str(frame))
        geometry.append(_geometry_digest(batch))
    record = {"frames": frames, "steps": args.steps}
    if args.dump_geometry:
        Path(args.dump_geometry).write_text(json.dumps(geometry, indent=1))
        record["geometry_constant"] = len({g["means_sha256"] for g in geometry}) == 1
    _emit(record)
    return 0


def cmd_export(args) -> int:
    ckpt = scene_io.load_checkpoint(args.checkpoint)
    scene_io.save_scene(ckpt.model, args.out)
    _echo_config("export", {"checkpoint": args.checkpoint, "out": args.out})
    _emit({"out": str(args.out), "iteration": ckpt.iteration})
    return 0


def _bench_once(model, cameras, times, frames):
    decode_ms = []
    project_ms = []
    composite_ms = []
    totals = []
    n_splats = []
    for i in range(frames):
        cam = cameras[i % len(cameras)]
        t = times[i % len(times)]
        t0 = _time.perf_counter()
        batch = decode_neural_gaussians(model, cam, time_index=t)
        t1 = _time.perf_counter()
        splats = project(batch, cam)
        t2 = _time.perf_counter()
        composite_forward(splats, cam)
        t3 = _time.perf_counter()
        decode_ms.append((t1 - t0) * 1e3)
        project_ms.append((t2 - t1) * 1e3)
        composite_ms.append((t3 - t2) * 1e3)
        totals.append((t3 - t0) * 1e3)
        n_splats.append(len(splats))
    fps = [1000.0 / t for t in totals]
    return {
        "frames": frames,
        "splats_mean": float(np.mean(n_splats)),
        "fps_mean": float(np.mean(fps)),
        "fps_median": float(np.median(fps)),
        "total_ms_mean": float(np.mean(totals)),
        "stage_ms": {
            "decode": float(np.mean(decode_ms)),
            "project": float(np.mean(project_ms)),
            "composite": float(np.mean(composite_ms)),
        },
    }


def cmd_bench(args) -> int:
    model = scene_io.load_scene(args.scene)
    if args.camera or args.pose:
        cameras = [_resolve_camera(args)]
    else:
        # orbit around the anchor centroid at a distance related to the extent
        centroid = model.anchors.centers.mean(axis=0)
        radius = 1.3 * model.scene_extent
        cameras = []
        for j in range(12):
            az = 2 * np.pi * j / 12
            eye = centroid + radius * np.array([np.cos(az), np.sin(az), 0.45])
            cameras.append(
                look_at_camera(
                    eye, centroid, fx=1.1 * args.width, fy=1.1 * args.width,
                    width=args.width, height=args.height,
                )
            )
    times = list(range(model.n_times))
    _echo_config(
        "bench",
        {"scene": args.scene, "frames": args.frames, "size": f"{args.width}x{args.height}",
         "backend": get_backend(), "threads": args.threads},
    )
    # warm up JIT compilation outside the timed region
    _bench_once(model, cameras, times, 1)
    if args.compare_backends:
        results = {}
        for backend in ("numba", "numpy"):
            set_backend(backend)
            _bench_once(model, cameras, times, 1)
            results[backend] = _bench_once(model, cameras, times, args.frames)
        set_backend("numba")
        _emit({"backends": results, "threads": args.threads})
    else:
        result = _bench_once(model, cameras, times, args.frames)
        result["backend"] = get_backend()
        result["threads"] = args.threads
        _emit(result)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="timesplat",
        description="Train and render time-variant 3D scenes with neural Gaussian splatting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_camera_flags(p):
        p.add_argument("--camera", help="colmap:<image_name> (requires --manifest)")
        p.add_argument("--manifest", help="manifest JSON for camera lookup")
        p.add_argument("--pose", help="12 numbers: row-major rotation, then translation")
        p.add_argument("--intrinsics", help="fx,fy,cx,cy")
        p.add_argument("--size", help="WxH in pixels")

    p = sub.add_parser("train", help="optimize a scene from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="TOML config; keys mirror TrainConfig fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--encoder", choices=["embedding", "pe"])
    p.add_argument("--no-adapt", action="store_true", help="disable anchor adaptation")
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--resume", help="checkpoint file to resume from")
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render one view from a scene file")
    p.add_argument("--scene", required=True)
    p.add_argument("--time", type=int)
    p.add_argument("--alpha", help="t0:t1:a interpolated embedding")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--background", default="0,0,0")
    p.add_argument("--dump-geometry", help="write decoded-geometry digest JSON here")
    p.add_argument("--threads", type=int)
    add_camera_flags(p)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM against a manifest split")
    p.add_argument("--scene", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--background", default="0,0,0")
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("interpolate", help="render frames across interpolated embeddings")
    p.add_argument("--scene", required=True)
    p.add_argument("--t0", type=int, required=True)
    p.add_argument("--t1", type=int, required=True)
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--background", default="0,0,0")
    p.add_argument("--dump-geometry", help="write per-frame geometry digests here")
    p.add_argument("--threads", type=int)
    add_camera_flags(p)
    p.set_defaults(fn=cmd_interpolate)

    p = sub.add_parser("export", help="convert a checkpoint to a scene file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("bench", help="measure decode/render throughput")
    p.add_argument("--scene", required=True)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--compare-backends", action="store_true")
    p.add_argument("--threads", type=int)
    add_camera_flags(p)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(getattr(args, "threads", None))
    try:
        return args.fn(args)
    except USAGE_ERRORS as exc:
        _say(f"error: {exc}")
        return 2
    except RUNTIME_ERRORS as exc:
        _say(f"runtime error: {exc}")
        return 3


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
