// Orbit camera state + input math. Pure functions so the bindings are
// trivially testable without a DOM.

import { Camera, lookAtCamera } from "./project.js";

export interface OrbitState {
  target: [number, number, number];
  radius: number;
  azimuth: number; // radians
  elevation: number; // radians, clamped away from the poles
  fov: number; // vertical, radians
}

const MIN_RADIUS = 1e-3;
const MAX_ELEVATION = Math.PI / 2 - 0.02;

export function orbitDrag(state: OrbitState, dxPixels: number, dyPixels: number): OrbitState {
  const azimuth = state.azimuth + dxPixels * 0.008;
  const elevation = Math.min(
    MAX_ELEVATION,
    Math.max(-MAX_ELEVATION, state.elevation + dyPixels * 0.008)
  );
  return { ...state, azimuth, elevation };
}

export function orbitDolly(state: OrbitState, wheelDelta: number): OrbitState {
  const radius = Math.max(MIN_RADIUS, state.radius * Math.exp(wheelDelta * 0.001));
  return { ...state, radius };
}

export function orbitPan(state: OrbitState, dx: number, dy: number): OrbitState {
  // pan in the camera's right/up plane, scaled by radius
  const ca = Math.cos(state.azimuth);
  const sa = Math.sin(state.azimuth);
  const step = state.radius * 0.02;
  const right: [number, number, number] = [-sa, ca, 0];
  const upish: [number, number, number] = [0, 0, 1];
  return {
    ...state,
    target: [
      state.target[0] + step * (dx * right[0] + dy * upish[0]),
      state.target[1] + step * (dx * right[1] + dy * upish[1]),
      state.target[2] + step * (dx * right[2] + dy * upish[2]),
    ],
  };
}

export function orbitEye(state: OrbitState): [number, number, number] {
  const ce = Math.cos(state.elevation);
  return [
    state.target[0] + state.radius * ce * Math.cos(state.azimuth),
    state.target[1] + state.radius * ce * Math.sin(state.azimuth),
    state.target[2] + state.radius * Math.sin(state.elevation),
  ];
}

export function orbitCamera(state: OrbitState, width: number, height: number): Camera {
  const focal = height / (2 * Math.tan(state.fov / 2));
  return lookAtCamera(orbitEye(state), state.target, focal, focal, width, height);
}
