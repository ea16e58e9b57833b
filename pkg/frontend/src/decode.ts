// Neural Gaussian decoding: mirrors the trainer's decoder so viewer frames
// match CLI renders.
//
//   mean    mu = mu_a + v_o * exp(logScaling)      (per axis)
//   opacity o  = tanh(F_o(f, delta, dir, z))        o <= 0 culled at render
//   color   c  = (1 - m) sigma(F_cs(..)) + m sigma(F_cd(.., z))
//   (scale, quat) = F_cov(f, delta, dir)            time-independent

import { Mlp, Scene } from "./gtms.js";
import { Camera, cameraCenter } from "./project.js";

export interface DecodedSplats {
  count: number; // visible anchors * k
  means: Float64Array; // (M*3)
  opacities: Float64Array; // (M)
  scales: Float64Array; // (M*3)
  quats: Float64Array; // (M*4) unit (w,x,y,z)
  colors: Float64Array; // (M*3)
}

export function mlpForward(mlp: Mlp, x: Float64Array): Float64Array {
  let h = x;
  for (let li = 0; li < mlp.layers.length; li++) {
    const { weight, bias, inDim, outDim } = mlp.layers[li];
    const out = new Float64Array(outDim);
    for (let o = 0; o < outDim; o++) {
      let acc = bias[o];
      const row = o * inDim;
      for (let i = 0; i < inDim; i++) acc += weight[row + i] * h[i];
      out[o] = li < mlp.layers.length - 1 && acc < 0 ? 0 : acc; // ReLU hidden
    }
    h = out;
  }
  return h;
}

const sigmoid = (x: number) => 1 / (1 + Math.exp(-x));

export function positionalEncoding(t: number, levels: number): Float64Array {
  const out = new Float64Array(2 * levels);
  for (let j = 0; j < levels; j++) {
    const arg = Math.pow(2, j) * Math.PI * t;
    out[2 * j] = Math.sin(arg);
    out[2 * j + 1] = Math.cos(arg);
  }
  return out;
}

export function embeddingForTime(scene: Scene, t: number): Float64Array {
  if (scene.encoderMode === "positional") {
    const tMax = Math.max(scene.nTimes - 1, 1);
    return positionalEncoding(t / tMax, scene.embedDim / 2);
  }
  const z = new Float64Array(scene.embedDim);
  for (let i = 0; i < scene.embedDim; i++) {
    z[i] = scene.embeddings[t * scene.embedDim + i];
  }
  return z;
}

// slider value in [0, T-1] -> blended embedding between its neighbors
export function embeddingForSlider(scene: Scene, slider: number): Float64Array {
  const t0 = Math.min(Math.floor(slider), scene.nTimes - 1);
  const t1 = Math.min(t0 + 1, scene.nTimes - 1);
  const alpha = slider - t0;
  const z0 = embeddingForTime(scene, t0);
  const z1 = embeddingForTime(scene, t1);
  const z = new Float64Array(z0.length);
  for (let i = 0; i < z.length; i++) z[i] = (1 - alpha) * z0[i] + alpha * z1[i];
  return z;
}

const NEAR_CLIP = 0.01;
const FRUSTUM_MARGIN = 0.1;
const SCALE_FLOOR = 1e-6;

export function visibleAnchors(scene: Scene, cam: Camera): Int32Array {
  const out: number[] = [];
  const r = cam.rotation;
  const t = cam.translation;
  const mx = FRUSTUM_MARGIN * cam.width;
  const my = FRUSTUM_MARGIN * cam.height;
  for (let a = 0; a < scene.nAnchors; a++) {
    const x = scene.centers[a * 3];
    const y = scene.centers[a * 3 + 1];
    const zc = scene.centers[a * 3 + 2];
    const pz = r[6] * x + r[7] * y + r[8] * zc + t[2];
    if (pz <= NEAR_CLIP) continue;
    const px = r[0] * x + r[1] * y + r[2] * zc + t[0];
    const py = r[3] * x + r[4] * y + r[5] * zc + t[1];
    const u = (cam.fx * px) / pz + cam.cx;
    const v = (cam.fy * py) / pz + cam.cy;
    if (u < -mx || u > cam.width + mx || v < -my || v > cam.height + my) continue;
    out.push(a);
  }
  return Int32Array.from(out);
}

export function decode(scene: Scene, cam: Camera, z: Float64Array): DecodedSplats {
  const visible = visibleAnchors(scene, cam);
  const k = scene.k;
  const f = scene.featureDim;
  const m = visible.length * k;
  const means = new Float64Array(m * 3);
  const opacities = new Float64Array(m);
  const scales = new Float64Array(m * 3);
  const quats = new Float64Array(m * 4);
  const colors = new Float64Array(m * 3);

  const center = cameraCenter(cam);
  const xStatic = new Float64Array(f + 4);
  const xTime = new Float64Array(f + 4 + scene.embedDim);
  const scaleHi = scene.sceneExtent / 2;

  for (let vi = 0; vi < visible.length; vi++) {
    const a = visible[vi];
    const ax = scene.centers[a * 3];
    const ay = scene.centers[a * 3 + 1];
    const az = scene.centers[a * 3 + 2];
    const dx = ax - center[0];
    const dy = ay - center[1];
    const dz = az - center[2];
    const dist = Math.sqrt(dx * dx + dy * dy + dz * dz);

    for (let i = 0; i < f; i++) xStatic[i] = scene.features[a * f + i];
    xStatic[f] = dist / scene.sceneExtent;
    xStatic[f + 1] = dx / dist;
    xStatic[f + 2] = dy / dist;
    xStatic[f + 3] = dz / dist;
    xTime.set(xStatic);
    for (let i = 0; i < scene.embedDim; i++) xTime[f + 4 + i] = z[i];

    const oRaw = mlpForward(scene.heads.opacity, xTime);
    const covRaw = mlpForward(scene.heads.covariance, xStatic);
    const csRaw = mlpForward(scene.heads.staticColor, xStatic);
    const cdRaw = mlpForward(scene.heads.dynamicColor, xTime);
    const mRaw = mlpForward(scene.heads.blend, xTime);

    const sx = Math.exp(scene.logScalings[a * 3]);
    const sy = Math.exp(scene.logScalings[a * 3 + 1]);
    const sz = Math.exp(scene.logScalings[a * 3 + 2]);

    for (let o = 0; o < k; o++) {
      const gi = vi * k + o;
      means[gi * 3] = ax + scene.offsets[(a * k + o) * 3] * sx;
      means[gi * 3 + 1] = ay + scene.offsets[(a * k + o) * 3 + 1] * sy;
      means[gi * 3 + 2] = az + scene.offsets[(a * k + o) * 3 + 2] * sz;
      opacities[gi] = Math.tanh(oRaw[o]);

      for (let axis = 0; axis < 3; axis++) {
        const s = Math.exp(covRaw[o * 7 + axis]);
        scales[gi * 3 + axis] = Math.min(Math.max(s, SCALE_FLOOR), scaleHi);
      }
      const qw = covRaw[o * 7 + 3] + 1.0; // identity bias, as in the trainer
      const qx = covRaw[o * 7 + 4];
      const qy = covRaw[o * 7 + 5];
      const qz = covRaw[o * 7 + 6];
      const qn = Math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz);
      quats[gi * 4] = qw / qn;
      quats[gi * 4 + 1] = qx / qn;
      quats[gi * 4 + 2] = qy / qn;
      quats[gi * 4 + 3] = qz / qn;

      const blend = sigmoid(mRaw[o]);
      for (let ch = 0; ch < 3; ch++) {
        const cs = sigmoid(csRaw[o * 3 + ch]);
        const cd = sigmoid(cdRaw[o * 3 + ch]);
        colors[gi * 3 + ch] = (1 - blend) * cs + blend * cd;
      }
    }
  }
  return { count: m, means, opacities, scales, quats, colors };
}
