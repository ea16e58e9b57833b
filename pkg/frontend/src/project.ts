// Pinhole camera (x right, y down, z forward) and EWA-style projection of
// 3D Gaussians to screen-space splats, matching the trainer's conventions.

import { DecodedSplats } from "./decode.js";

export interface Camera {
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
  rotation: Float64Array; // (9) row-major world-to-camera
  translation: Float64Array; // (3)
}

export interface Splats2D {
  count: number;
  mean2d: Float64Array; // (M*2)
  conic: Float64Array; // (M*3) inverse covariance (a, b, c)
  radius: Float64Array; // (M)
  depth: Float64Array; // (M)
  alpha: Float64Array; // (M) in [0, 0.99]
  color: Float64Array; // (M*3)
  order: Int32Array; // indices sorted back-to-front
}

const COV2D_DILATION = 0.3;
const NEAR_CLIP = 0.01;
const ALPHA_CLAMP = 0.99;
const RADIUS_SIGMAS = 3.0;

export function cameraCenter(cam: Camera): Float64Array {
  const r = cam.rotation;
  const t = cam.translation;
  // -R^T t
  return new Float64Array([
    -(r[0] * t[0] + r[3] * t[1] + r[6] * t[2]),
    -(r[1] * t[0] + r[4] * t[1] + r[7] * t[2]),
    -(r[2] * t[0] + r[5] * t[1] + r[8] * t[2]),
  ]);
}

export function lookAtCamera(
  eye: [number, number, number],
  target: [number, number, number],
  fx: number,
  fy: number,
  width: number,
  height: number,
  up: [number, number, number] = [0, 0, 1]
): Camera {
  const fwd = [target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]];
  const fn = Math.hypot(fwd[0], fwd[1], fwd[2]);
  fwd[0] /= fn;
  fwd[1] /= fn;
  fwd[2] /= fn;
  let right = [
    fwd[1] * up[2] - fwd[2] * up[1],
    fwd[2] * up[0] - fwd[0] * up[2],
    fwd[0] * up[1] - fwd[1] * up[0],
  ];
  let rn = Math.hypot(right[0], right[1], right[2]);
  if (rn < 1e-9) {
    right = [fwd[1], -fwd[0], 0];
    rn = Math.hypot(right[0], right[1], right[2]) || 1;
  }
  right = [right[0] / rn, right[1] / rn, right[2] / rn];
  const down = [
    fwd[1] * right[2] - fwd[2] * right[1],
    fwd[2] * right[0] - fwd[0] * right[2],
    fwd[0] * right[1] - fwd[1] * right[0],
  ];
  const rot = new Float64Array([...right, ...down, ...fwd]);
  const t = new Float64Array([
    -(rot[0] * eye[0] + rot[1] * eye[1] + rot[2] * eye[2]),
    -(rot[3] * eye[0] + rot[4] * eye[1] + rot[5] * eye[2]),
    -(rot[6] * eye[0] + rot[7] * eye[1] + rot[8] * eye[2]),
  ]);
  return { fx, fy, cx: width / 2, cy: height / 2, width, height, rotation: rot, translation: t };
}

function quatToRot(w: number, x: number, y: number, z: number): number[] {
  return [
    1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
    2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
    2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
  ];
}

export function project(splats: DecodedSplats, cam: Camera): Splats2D {
  const r = cam.rotation;
  const t = cam.translation;
  const kept: number[] = [];
  const mean2d: number[] = [];
  const conic: number[] = [];
  const radius: number[] = [];
  const depth: number[] = [];
  const alpha: number[] = [];
  const color: number[] = [];

  for (let i = 0; i < splats.count; i++) {
    const o = splats.opacities[i];
    if (o <= 0) continue; // visibility gate
    const mx = splats.means[i * 3];
    const my = splats.means[i * 3 + 1];
    const mz = splats.means[i * 3 + 2];
    const pz = r[6] * mx + r[7] * my + r[8] * mz + t[2];
    if (pz <= NEAR_CLIP) continue;
    const px = r[0] * mx + r[1] * my + r[2] * mz + t[0];
    const py = r[3] * mx + r[4] * my + r[5] * mz + t[1];

    // Sigma = R_q diag(s^2) R_q^T
    const q = splats.quats;
    const rq = quatToRot(q[i * 4], q[i * 4 + 1], q[i * 4 + 2], q[i * 4 + 3]);
    const s0 = splats.scales[i * 3] ** 2;
    const s1 = splats.scales[i * 3 + 1] ** 2;
    const s2 = splats.scales[i * 3 + 2] ** 2;
    const sigma = new Array<number>(9);
    for (let a = 0; a < 3; a++) {
      for (let b = 0; b < 3; b++) {
        sigma[a * 3 + b] =
          rq[a * 3] * s0 * rq[b * 3] +
          rq[a * 3 + 1] * s1 * rq[b * 3 + 1] +
          rq[a * 3 + 2] * s2 * rq[b * 3 + 2];
      }
    }
    // M = J W ; J is the pinhole Jacobian at (px, py, pz)
    const j00 = cam.fx / pz;
    const j02 = (-cam.fx * px) / (pz * pz);
    const j11 = cam.fy / pz;
    const j12 = (-cam.fy * py) / (pz * pz);
    const m0 = [
      j00 * r[0] + j02 * r[6],
      j00 * r[1] + j02 * r[7],
      j00 * r[2] + j02 * r[8],
    ];
    const m1 = [
      j11 * r[3] + j12 * r[6],
      j11 * r[4] + j12 * r[7],
      j11 * r[5] + j12 * r[8],
    ];
    const sv = (row: number[], col: number[]) => {
      let acc = 0;
      for (let a = 0; a < 3; a++) {
        for (let b = 0; b < 3; b++) acc += row[a] * sigma[a * 3 + b] * col[b];
      }
      return acc;
    };
    const ca = sv(m0, m0) + COV2D_DILATION;
    const cb = sv(m0, m1);
    const cc = sv(m1, m1) + COV2D_DILATION;
    const det = ca * cc - cb * cb;
    if (det <= 1e-12) continue;

    const lamMax = 0.5 * (ca + cc) + Math.sqrt(Math.max(0.25 * (ca - cc) ** 2 + cb * cb, 0));
    const rad = RADIUS_SIGMAS * Math.sqrt(Math.max(lamMax, 0));
    const u = (cam.fx * px) / pz + cam.cx;
    const v = (cam.fy * py) / pz + cam.cy;
    if (u + rad < 0.5 || u - rad > cam.width - 0.5) continue;
    if (v + rad < 0.5 || v - rad > cam.height - 0.5) continue;

    kept.push(kept.length);
    mean2d.push(u, v);
    conic.push(cc / det, -cb / det, ca / det);
    radius.push(rad);
    depth.push(pz);
    alpha.push(Math.min(o, ALPHA_CLAMP));
    color.push(splats.colors[i * 3], splats.colors[i * 3 + 1], splats.colors[i * 3 + 2]);
  }

  const order = Int32Array.from(kept);
  // back-to-front for OVER compositing; stable tie-break on index
  order.sort((a, b) => depth[b] - depth[a] || a - b);
  return {
    count: kept.length,
    mean2d: Float64Array.from(mean2d),
    conic: Float64Array.from(conic),
    radius: Float64Array.from(radius),
    depth: Float64Array.from(depth),
    alpha: Float64Array.from(alpha),
    color: Float64Array.from(color),
    order,
  };
}
