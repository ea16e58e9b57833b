// Browser entry point: loads a scene over HTTP (?scene=<url>), renders it to
// a canvas with orbit controls and an appearance slider, shows an FPS
// overlay, and exposes a geometry digest for debugging.

import { parseScene, Scene, SceneFormatError } from "./gtms.js";
import { OrbitState, orbitCamera, orbitDolly, orbitDrag, orbitPan } from "./orbit.js";
import { SplatViewer } from "./viewer.js";
import { frameToImageData } from "./composite.js";

const canvas = document.getElementById("view") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const slider = document.getElementById("time-slider") as HTMLInputElement;
const sliderLabel = document.getElementById("time-label")!;
const fpsLabel = document.getElementById("fps")!;
const banner = document.getElementById("banner")!;

let viewer: SplatViewer | null = null;
let orbit: OrbitState = {
  target: [0, 0, 0.4],
  radius: 6,
  azimuth: 0.6,
  elevation: 0.45,
  fov: (50 * Math.PI) / 180,
};
let dirty = true;
let lastFrameMs = 0;

function showError(message: string) {
  banner.textContent = message;
  banner.classList.add("visible");
}

async function loadScene(): Promise<Scene> {
  const params = new URLSearchParams(window.location.search);
  const url = params.get("scene") ?? "scene.gtms";
  const response = await fetch(url);
  if (!response.ok) {
    throw new SceneFormatError(`failed to fetch ${url}: HTTP ${response.status}`);
  }
  return parseScene(await response.arrayBuffer());
}

function requestFrame() {
  dirty = true;
}

function tick() {
  if (viewer && dirty) {
    dirty = false;
    const t0 = performance.now();
    const cam = orbitCamera(orbit, canvas.width, canvas.height);
    const frame = viewer.renderFrame(parseFloat(slider.value), cam);
    ctx.putImageData(frameToImageData(frame.buffer, frame.width, frame.height), 0, 0);
    lastFrameMs = performance.now() - t0;
    fpsLabel.textContent = `${(1000 / Math.max(lastFrameMs, 0.01)).toFixed(1)} fps · ${
      frame.splatCount
    } splats${frame.decoded ? " · decoded" : ""}`;
    sliderLabel.textContent = `appearance ${parseFloat(slider.value).toFixed(2)}`;
  }
  requestAnimationFrame(tick);
}

function bindInput() {
  let dragging = false;
  let panning = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("mousedown", (e) => {
    dragging = true;
    panning = e.shiftKey || e.button === 2;
    lastX = e.clientX;
    lastY = e.clientY;
  });
  window.addEventListener("mouseup", () => (dragging = false));
  window.addEventListener("mousemove", (e) => {
    if (!dragging) return;
    const dx = e.clientX - lastX;
    const dy = e.clientY - lastY;
    lastX = e.clientX;
    lastY = e.clientY;
    orbit = panning ? orbitPan(orbit, dx, -dy) : orbitDrag(orbit, dx, dy);
    requestFrame();
  });
  canvas.addEventListener("wheel", (e) => {
    e.preventDefault();
    orbit = orbitDolly(orbit, e.deltaY);
    requestFrame();
  });
  canvas.addEventListener("contextmenu", (e) => e.preventDefault());
  window.addEventListener("keydown", (e) => {
    const panKeys: Record<string, [number, number]> = {
      ArrowLeft: [-1, 0],
      ArrowRight: [1, 0],
      ArrowUp: [0, 1],
      ArrowDown: [0, -1],
      a: [-1, 0],
      d: [1, 0],
      w: [0, 1],
      s: [0, -1],
    };
    const pan = panKeys[e.key];
    if (pan) {
      orbit = orbitPan(orbit, pan[0], pan[1]);
      requestFrame();
    }
  });
  slider.addEventListener("input", requestFrame);
}

declare global {
  interface Window {
    timesplatDebug?: () => unknown;
  }
}

function backgroundFromUrl(): [number, number, number] {
  const raw = new URLSearchParams(window.location.search).get("bg");
  if (!raw) return [0, 0, 0];
  const parts = raw.split(",").map(Number);
  if (parts.length !== 3 || parts.some((v) => !Number.isFinite(v))) return [0, 0, 0];
  return [parts[0], parts[1], parts[2]];
}

async function start() {
  try {
    const scene = await loadScene();
    viewer = new SplatViewer(scene, backgroundFromUrl());
    slider.max = String(Math.max(scene.nTimes - 1, 0));
    slider.step = scene.nTimes > 1 ? "0.01" : "1";
    slider.value = "0";
    orbit.target = viewer.sceneCentroid;
    orbit.radius = 1.4 * scene.sceneExtent;
    window.timesplatDebug = () => viewer?.geometryDigest();
    requestFrame();
  } catch (err) {
    showError(err instanceof Error ? err.message : String(err));
  }
}

bindInput();
tick();
start();
