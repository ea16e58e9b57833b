// Parser for the binary scene format written by the trainer.
//
// Layout (little-endian, float32 arrays):
//   magic 'GTMS' | version u16 | flags u16 (bit0 = positional encoder)
//   N u32 | k u32 | F u32 | l u32 | T u32 | sceneExtent f32
//   nHeads u8, per head: nLayers u8, (nLayers+1) x u16 layer dims
//   anchors: centers (N,3)  features (N,F)  offsets (N,k,3)  logScalings (N,3)
//   per head, per layer: weight (out,in) row-major, bias (out)
//   embedding table (T,l)

export interface MlpLayer {
  weight: Float32Array; // (outDim * inDim) row-major
  bias: Float32Array;
  inDim: number;
  outDim: number;
}

export interface Mlp {
  layers: MlpLayer[];
}

export interface Scene {
  nAnchors: number;
  k: number;
  featureDim: number;
  embedDim: number;
  nTimes: number;
  sceneExtent: number;
  encoderMode: "embedding" | "positional";
  centers: Float32Array; // (N*3)
  features: Float32Array; // (N*F)
  offsets: Float32Array; // (N*k*3)
  logScalings: Float32Array; // (N*3)
  heads: {
    opacity: Mlp;
    staticColor: Mlp;
    dynamicColor: Mlp;
    blend: Mlp;
    covariance: Mlp;
  };
  embeddings: Float32Array; // (T*l)
}

export class SceneFormatError extends Error {}

class Reader {
  private view: DataView;
  private pos = 0;

  constructor(private data: ArrayBuffer) {
    this.view = new DataView(data);
  }

  get offset(): number {
    return this.pos;
  }

  private need(n: number) {
    if (this.pos + n > this.view.byteLength) {
      throw new SceneFormatError(
        `truncated scene file at byte ${this.pos} (wanted ${n} more bytes)`
      );
    }
  }

  u8(): number {
    this.need(1);
    return this.view.getUint8(this.pos++);
  }

  u16(): number {
    this.need(2);
    const v = this.view.getUint16(this.pos, true);
    this.pos += 2;
    return v;
  }

  u32(): number {
    this.need(4);
    const v = this.view.getUint32(this.pos, true);
    this.pos += 4;
    return v;
  }

  f32(): number {
    this.need(4);
    const v = this.view.getFloat32(this.pos, true);
    this.pos += 4;
    return v;
  }

  bytes(n: number): Uint8Array {
    this.need(n);
    const out = new Uint8Array(this.data, this.pos, n);
    this.pos += n;
    return out;
  }

  floats(count: number): Float32Array {
    this.need(count * 4);
    // copy so alignment of the source buffer never matters
    const out = new Float32Array(count);
    for (let i = 0; i < count; i++) {
      out[i] = this.view.getFloat32(this.pos + 4 * i, true);
    }
    this.pos += count * 4;
    return out;
  }

  atEnd(): boolean {
    return this.pos === this.view.byteLength;
  }
}

const HEAD_ORDER = ["opacity", "staticColor", "dynamicColor", "blend", "covariance"] as const;

export function parseScene(data: ArrayBuffer): Scene {
  const r = new Reader(data);
  const magic = r.bytes(4);
  if (String.fromCharCode(...magic) !== "GTMS") {
    throw new SceneFormatError("bad magic: not a scene file");
  }
  const version = r.u16();
  if (version !== 1) {
    throw new SceneFormatError(`unsupported scene version ${version}`);
  }
  const flags = r.u16();
  const nAnchors = r.u32();
  const k = r.u32();
  const featureDim = r.u32();
  const embedDim = r.u32();
  const nTimes = r.u32();
  const sceneExtent = r.f32();
  const nHeads = r.u8();
  if (nHeads !== HEAD_ORDER.length) {
    throw new SceneFormatError(`expected ${HEAD_ORDER.length} heads, found ${nHeads}`);
  }
  const headDims: number[][] = [];
  for (let h = 0; h < nHeads; h++) {
    const nLayers = r.u8();
    const dims: number[] = [];
    for (let i = 0; i <= nLayers; i++) dims.push(r.u16());
    headDims.push(dims);
  }

  const centers = r.floats(nAnchors * 3);
  const features = r.floats(nAnchors * featureDim);
  const offsets = r.floats(nAnchors * k * 3);
  const logScalings = r.floats(nAnchors * 3);

  const heads: Partial<Record<(typeof HEAD_ORDER)[number], Mlp>> = {};
  HEAD_ORDER.forEach((name, h) => {
    const dims = headDims[h];
    const layers: MlpLayer[] = [];
    for (let i = 0; i + 1 < dims.length; i++) {
      const inDim = dims[i];
      const outDim = dims[i + 1];
      layers.push({
        weight: r.floats(outDim * inDim),
        bias: r.floats(outDim),
        inDim,
        outDim,
      });
    }
    heads[name] = { layers };
  });
  const embeddings = r.floats(nTimes * embedDim);
  if (!r.atEnd()) {
    throw new SceneFormatError(`trailing bytes after payload (offset ${r.offset})`);
  }

  return {
    nAnchors,
    k,
    featureDim,
    embedDim,
    nTimes,
    sceneExtent,
    encoderMode: flags & 1 ? "positional" : "embedding",
    centers,
    features,
    offsets,
    logScalings,
    heads: heads as Scene["heads"],
    embeddings,
  };
}
