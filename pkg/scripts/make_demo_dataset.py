#!/usr/bin/env python3
"""Write a small self-rendered demo dataset (PNGs + COLMAP text + manifest).

Usage: python3 scripts/make_demo_dataset.py [out_dir] [--times N]
"""

import argparse

from timesplat.synthetic import make_scene, write_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", nargs="?", default="demo_data")
    ap.add_argument("--times", type=int, default=2)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    scene = make_scene(n_times=args.times, seed=args.seed, image_size=args.size)
    manifest = write_dataset(scene, args.out)
    print(f"dataset at {manifest}")
    print(f"train with background {','.join(str(c) for c in scene.background)}")


if __name__ == "__main__":
    main()
