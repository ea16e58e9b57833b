import { readFileSync } from "node:fs";
import { describe, expect, it } from "vitest";

import { parseScene, SceneFormatError } from "../src/gtms.js";

const FIXTURES = new URL("./fixtures/", import.meta.url);

function loadFixture(name: string): ArrayBuffer {
  const buf = readFileSync(new URL(name, FIXTURES));
  return buf.buffer.slice(buf.byteOffset, buf.byteOffset + buf.byteLength);
}

describe("scene parser", () => {
  it("parses the trained fixture with consistent counts", () => {
    const scene = parseScene(loadFixture("scene.gtms"));
    expect(scene.nAnchors).toBeGreaterThan(0);
    expect(scene.k).toBe(6);
    expect(scene.featureDim).toBe(16);
    expect(scene.nTimes).toBe(2);
    expect(scene.encoderMode).toBe("embedding");
    expect(scene.centers.length).toBe(scene.nAnchors * 3);
    expect(scene.features.length).toBe(scene.nAnchors * scene.featureDim);
    expect(scene.offsets.length).toBe(scene.nAnchors * scene.k * 3);
    expect(scene.embeddings.length).toBe(scene.nTimes * scene.embedDim);
    expect(scene.heads.opacity.layers[0].inDim).toBe(scene.featureDim + 4 + scene.embedDim);
    expect(scene.heads.staticColor.layers[0].inDim).toBe(scene.featureDim + 4);
    expect(scene.heads.covariance.layers.at(-1)!.outDim).toBe(7 * scene.k);
    expect(Number.isFinite(scene.sceneExtent)).toBe(true);
  });

  it("parses the positional-encoder fixture", () => {
    const scene = parseScene(loadFixture("scene_pe.gtms"));
    expect(scene.encoderMode).toBe("positional");
    expect(scene.embedDim % 2).toBe(0);
  });

  it("rejects a bad magic", () => {
    const data = loadFixture("scene.gtms");
    new Uint8Array(data).set([0x4e, 0x4f, 0x50, 0x45], 0); // 'NOPE'
    expect(() => parseScene(data)).toThrowError(SceneFormatError);
    expect(() => parseScene(data)).toThrowError(/magic/);
  });

  it("reports the offset for truncated payloads", () => {
    const data = loadFixture("scene.gtms");
    const cut = data.slice(0, data.byteLength - 64);
    try {
      parseScene(cut);
      expect.unreachable("should have thrown");
    } catch (err) {
      expect(err).toBeInstanceOf(SceneFormatError);
      expect(String(err)).toMatch(/truncated .* byte \d+/);
    }
  });
});
