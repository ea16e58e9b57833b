// CPU alpha compositing of depth-sorted splats into an RGB float buffer.
//
// Splats are drawn back to front with the OVER operator, which is
// mathematically the same composite as the trainer's front-to-back
// transmittance accumulation (the trainer additionally early-stops once a
// pixel is saturated; that only changes results below its 1e-4 threshold).

import { Splats2D } from "./project.js";

const ALPHA_MIN = 1 / 255;

export function compositeFrame(
  splats: Splats2D,
  width: number,
  height: number,
  background: [number, number, number]
): Float32Array {
  const buf = new Float32Array(width * height * 3);
  for (let p = 0; p < width * height; p++) {
    buf[p * 3] = background[0];
    buf[p * 3 + 1] = background[1];
    buf[p * 3 + 2] = background[2];
  }
  for (let oi = 0; oi < splats.count; oi++) {
    const i = splats.order[oi];
    const ux = splats.mean2d[i * 2];
    const uy = splats.mean2d[i * 2 + 1];
    const rad = splats.radius[i];
    const qa = splats.conic[i * 3];
    const qb = splats.conic[i * 3 + 1];
    const qc = splats.conic[i * 3 + 2];
    const ab = splats.alpha[i];
    const cr = splats.color[i * 3];
    const cg = splats.color[i * 3 + 1];
    const cb2 = splats.color[i * 3 + 2];

    const c0 = Math.max(0, Math.ceil(ux - rad - 0.5));
    const c1 = Math.min(width - 1, Math.floor(ux + rad - 0.5));
    const r0 = Math.max(0, Math.ceil(uy - rad - 0.5));
    const r1 = Math.min(height - 1, Math.floor(uy + rad - 0.5));
    for (let row = r0; row <= r1; row++) {
      const dy = row + 0.5 - uy;
      for (let col = c0; col <= c1; col++) {
        const dx = col + 0.5 - ux;
        const power = -0.5 * (qa * dx * dx + qc * dy * dy) - qb * dx * dy;
        if (power > 0) continue;
        const a = ab * Math.exp(power);
        if (a < ALPHA_MIN) continue;
        const p = (row * width + col) * 3;
        buf[p] = a * cr + (1 - a) * buf[p];
        buf[p + 1] = a * cg + (1 - a) * buf[p + 1];
        buf[p + 2] = a * cb2 + (1 - a) * buf[p + 2];
      }
    }
  }
  return buf;
}

export function frameToImageData(buf: Float32Array, width: number, height: number): ImageData {
  const out = new ImageData(width, height);
  for (let p = 0; p < width * height; p++) {
    out.data[p * 4] = Math.min(255, Math.max(0, Math.floor(buf[p * 3] * 255 + 0.5)));
    out.data[p * 4 + 1] = Math.min(255, Math.max(0, Math.floor(buf[p * 3 + 1] * 255 + 0.5)));
    out.data[p * 4 + 2] = Math.min(255, Math.max(0, Math.floor(buf[p * 3 + 2] * 255 + 0.5)));
    out.data[p * 4 + 3] = 255;
  }
  return out;
}
