#!/usr/bin/env python3
"""Generate the shared fixture corpus for the browser viewer tests.

Trains two small scenes (embedding and positional encoders), saves them as
.gtms files, renders reference views through the CLI code path, and writes a
refs.json with base64 float32 RGB buffers plus camera parameters.

Usage: python3 scripts/make_viewer_fixtures.py [out_dir]
"""

import base64
import json
import sys
from pathlib import Path

import numpy as np

from timesplat.dataset import load_manifest
from timesplat.optim import TrainConfig, train
from timesplat.rasterizer import render
from timesplat.scene_io import save_scene, load_scene
from timesplat.synthetic import make_scene, write_dataset

OUT = Path(sys.argv[1] if len(sys.argv) > 1 else "frontend/tests/fixtures")
BACKGROUND = (0.0, 0.0, 0.0)


def camera_record(cam):
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "rotation": [float(v) for v in cam.rotation.ravel()],
        "translation": [float(v) for v in cam.translation],
    }


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    work = OUT / "_work"
    scene = make_scene(n_times=2, seed=4, image_size=48, n_train_cams=6, n_test_cams=1)
    manifest = load_manifest(write_dataset(scene, work / "data"))

    result = train(manifest, TrainConfig(
        iterations=400, seed=0, background=scene.background,
        feature_dim=16, hidden_dim=24, k_offsets=6, adapt=False,
    ))
    save_scene(result.model, OUT / "scene.gtms")

    pe = train(manifest, TrainConfig(
        iterations=120, seed=0, background=scene.background, encoder_mode="positional",
        feature_dim=16, hidden_dim=24, k_offsets=6, adapt=False,
    ))
    save_scene(pe.model, OUT / "scene_pe.gtms")

    model = load_scene(OUT / "scene.gtms")  # reference through the file, like the CLI
    refs = []
    picks = [(manifest.samples("train")[0], 0), (manifest.samples("train")[3], 1),
             (manifest.samples("test")[0], 1)]
    for sample, t in picks:
        out = render(model, sample.camera, time_index=t, background=BACKGROUND)
        refs.append({
            "camera": camera_record(sample.camera),
            "time": t,
            "rgb_f32_base64": base64.b64encode(
                np.ascontiguousarray(out.image, dtype="<f4").tobytes()
            ).decode(),
        })
    (OUT / "refs.json").write_text(json.dumps({
        "background": list(BACKGROUND),
        "n_times": model.n_times,
        "views": refs,
    }, indent=1))

    import shutil

    shutil.rmtree(work)
    print(f"fixtures written to {OUT}")


if __name__ == "__main__":
    main()
