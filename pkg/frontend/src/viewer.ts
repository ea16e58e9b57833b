// Viewer state machine: owns the decoded-splat cache and re-renders frames.
//
// Head evaluation (the decode) re-runs when the appearance slider moves or
// when the camera direction changes by more than one degree; in between,
// cached decoded attributes are reprojected as-is. That reuse is a
// documented visual approximation (colors are view-dependent).

import { decode, DecodedSplats, embeddingForSlider } from "./decode.js";
import { compositeFrame } from "./composite.js";
import { Scene } from "./gtms.js";
import { Camera, cameraCenter, project } from "./project.js";

const REDECODE_ANGLE = (1.0 * Math.PI) / 180;

export interface ViewerFrame {
  buffer: Float32Array;
  width: number;
  height: number;
  splatCount: number;
  decoded: boolean; // whether this frame re-ran the heads
}

export class SplatViewer {
  private cache: DecodedSplats | null = null;
  private cacheSlider = NaN;
  private cacheDir: [number, number, number] | null = null;

  constructor(
    public scene: Scene,
    public background: [number, number, number] = [0, 0, 0]
  ) {}

  private viewDirection(cam: Camera): [number, number, number] {
    const c = cameraCenter(cam);
    const dx = this.sceneCentroid[0] - c[0];
    const dy = this.sceneCentroid[1] - c[1];
    const dz = this.sceneCentroid[2] - c[2];
    const n = Math.hypot(dx, dy, dz) || 1;
    return [dx / n, dy / n, dz / n];
  }

  private _centroid: [number, number, number] | null = null;

  get sceneCentroid(): [number, number, number] {
    if (!this._centroid) {
      let x = 0,
        y = 0,
        z = 0;
      const n = this.scene.nAnchors;
      for (let a = 0; a < n; a++) {
        x += this.scene.centers[a * 3];
        y += this.scene.centers[a * 3 + 1];
        z += this.scene.centers[a * 3 + 2];
      }
      this._centroid = [x / n, y / n, z / n];
    }
    return this._centroid;
  }

  needsDecode(slider: number, cam: Camera): boolean {
    if (!this.cache || slider !== this.cacheSlider || !this.cacheDir) return true;
    const dir = this.viewDirection(cam);
    const dot = Math.min(
      1,
      dir[0] * this.cacheDir[0] + dir[1] * this.cacheDir[1] + dir[2] * this.cacheDir[2]
    );
    return Math.acos(dot) > REDECODE_ANGLE;
  }

  renderFrame(slider: number, cam: Camera): ViewerFrame {
    const decodedNow = this.needsDecode(slider, cam);
    if (decodedNow) {
      const z = embeddingForSlider(this.scene, slider);
      this.cache = decode(this.scene, cam, z);
      this.cacheSlider = slider;
      this.cacheDir = this.viewDirection(cam);
    }
    const splats2d = project(this.cache!, cam);
    const buffer = compositeFrame(splats2d, cam.width, cam.height, this.background);
    return {
      buffer,
      width: cam.width,
      height: cam.height,
      splatCount: splats2d.count,
      decoded: decodedNow,
    };
  }

  // debug overlay support: a digest of the decoded geometry, used to check
  // that moving only the slider never changes means/scales/rotations
  geometryDigest(): { count: number; meanSum: number; scaleSum: number; quatSum: number } | null {
    if (!this.cache) return null;
    const sum = (arr: Float64Array) => {
      let acc = 0;
      for (let i = 0; i < arr.length; i++) acc += arr[i];
      return acc;
    };
    return {
      count: this.cache.count,
      meanSum: sum(this.cache.means),
      scaleSum: sum(this.cache.scales),
      quatSum: sum(this.cache.quats),
    };
  }
}
