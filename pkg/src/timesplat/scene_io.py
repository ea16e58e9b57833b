"""Binary scene files (.gtms) and training checkpoints (.gtmc).

Scene layout (all integers and floats little-endian, arrays float32):

    magic 'GTMS' | version u16 | flags u16 (bit0: positional encoder)
    N u32 | k u32 | F u32 | l u32 | T u32 | scene_extent f32
    n_heads u8, then per head: n_layers u8, (n_layers + 1) x u16 layer dims
    payload: anchor centers (N,3), features (N,F), offsets (N,k,3),
             log scalings (N,3);
             per head, per layer: weight (out,in) row-major, bias (out);
             embedding table (T,l)

Head order: opacity, static_color, dynamic_color, blend, covariance.
A byte-offset table lives in docs/format.md. Writes are atomic
(temp file + rename).
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, TimesplatError
from .model import (
    HEAD_NAMES,
    AnchorSet,
    HeadSet,
    SceneModel,
    TimeEmbeddingTable,
)
from .mlp import MlpParams

SCENE_MAGIC = b"GTMS"
CHECKPOINT_MAGIC = b"GTMC"
SCENE_VERSION = 1
CHECKPOINT_VERSION = 1
FLAG_POSITIONAL = 1


class _Reader:
    def __init__(self, data: bytes, label: str):
        self.buf = io.BytesIO(data)
        self.label = label

    @property
    def offset(self) -> int:
        return self.buf.tell()

    def exact(self, n: int) -> bytes:
        data = self.buf.read(n)
        if len(data) != n:
            raise FormatError(
                f"{self.label}: truncated at byte {self.offset - len(data)}"
                f" (wanted {n} more bytes)"
            )
        return data

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.exact(struct.calcsize("<" + fmt)))

    def array(self, shape, dtype=np.float32) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = self.exact(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(
            dtype
        ).reshape(shape)

    def expect_end(self):
        if self.buf.read(1):
            raise FormatError(f"{self.label}: trailing bytes after payload")


def _write_array(out: io.BytesIO, arr: np.ndarray, dtype=np.float32):
    out.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def model_to_bytes(model: SceneModel) -> bytes:
    out = io.BytesIO()
    flags = FLAG_POSITIONAL if model.encoder_mode == "positional" else 0
    n = model.anchors.n_anchors
    out.write(SCENE_MAGIC)
    out.write(struct.pack("<HH", SCENE_VERSION, flags))
    out.write(
        struct.pack(
            "<IIIIIf",
            n, model.k, model.feature_dim, model.embed_dim, model.n_times,
            float(model.scene_extent),
        )
    )
    out.write(struct.pack("<B", len(HEAD_NAMES)))
    for _, head in model.heads.named():
        dims = head.dims
        out.write(struct.pack("<B", head.n_layers))
        out.write(struct.pack(f"<{len(dims)}H", *dims))
    _write_array(out, model.anchors.centers)
    _write_array(out, model.anchors.features)
    _write_array(out, model.anchors.offsets)
    _write_array(out, model.anchors.log_scalings)
    for _, head in model.heads.named():
        for w, b in zip(head.weights, head.biases):
            _write_array(out, w)
            _write_array(out, b)
    _write_array(out, model.embeddings.embeddings)
    return out.getvalue()


def model_from_bytes(data: bytes, label: str = "scene") -> SceneModel:
    r = _Reader(data, label)
    magic = r.exact(4)
    if magic != SCENE_MAGIC:
        raise FormatError(f"{label}: bad magic {magic!r}")
    version, flags = r.unpack("HH")
    if version != SCENE_VERSION:
        raise FormatError(f"{label}: unsupported scene version {version}")
    n, k, fdim, ldim, t, extent = r.unpack("IIIIIf")
    (n_heads,) = r.unpack("B")
    if n_heads != len(HEAD_NAMES):
        raise FormatError(f"{label}: expected {len(HEAD_NAMES)} heads, found {n_heads}")
    head_dims = []
    for _ in range(n_heads):
        (n_layers,) = r.unpack("B")
        head_dims.append(list(r.unpack(f"{n_layers + 1}H")))

    centers = r.array((n, 3))
    features = r.array((n, fdim))
    offsets = r.array((n, k, 3))
    log_scalings = r.array((n, 3))
    heads = {}
    for name, dims in zip(HEAD_NAMES, head_dims):
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            weights.append(r.array((d_out, d_in)))
            biases.append(r.array((d_out,)))
        heads[name] = MlpParams(weights, biases)
    embeddings = r.array((t, ldim))
    r.expect_end()

    try:
        return SceneModel(
            anchors=AnchorSet(centers, features, offsets, log_scalings),
            heads=HeadSet(**heads),
            embeddings=TimeEmbeddingTable(embeddings),
            scene_extent=float(extent),
            encoder_mode="positional" if flags & FLAG_POSITIONAL else "embedding",
        )
    except TimesplatError as exc:
        raise FormatError(f"{label}: inconsistent scene contents: {exc}") from exc


def save_scene(model: SceneModel, path):
    """Write a model as a .gtms file (float32, little-endian, atomic)."""
    _atomic_write(path, model_to_bytes(model.astype(np.float32)))


def load_scene(path) -> SceneModel:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"scene file not found: {path}")
    return model_from_bytes(path.read_bytes(), label=str(path))


# ---------------------------------------------------------------------------
# checkpoints


_STAT_DTYPES = {0: np.float32, 1: np.int64, 2: np.float64}
_STAT_CODES = {np.dtype(np.float32): 0, np.dtype(np.int64): 1, np.dtype(np.float64): 2}


@dataclass
class CheckpointData:
    model: SceneModel
    iteration: int
    adam_step: int
    moments: dict  # name -> (m, v) float32 arrays
    rng_state: dict
    stats: dict  # name -> ndarray
    config: dict


def _write_blob(out: io.BytesIO, data: bytes):
    out.write(struct.pack("<Q", len(data)))
    out.write(data)


def save_checkpoint(
    path,
    model: SceneModel,
    iteration: int,
    adam_step: int,
    moments: dict,
    rng_state: dict,
    stats: dict,
    config: dict,
):
    """Scene payload plus optimizer moments, RNG state and adaptation stats;
    enough to resume a run on the exact trajectory it would have taken."""
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<H", CHECKPOINT_VERSION))
    out.write(struct.pack("<QQ", iteration, adam_step))
    _write_blob(out, json.dumps(rng_state).encode())
    _write_blob(out, json.dumps(config).encode())
    _write_blob(out, model_to_bytes(model.astype(np.float32)))
    param_names = list(model.parameters().keys())
    out.write(struct.pack("<H", len(param_names)))
    for name in param_names:
        m, v = moments[name]
        _write_array(out, m)
        _write_array(out, v)
    out.write(struct.pack("<H", len(stats)))
    for name in sorted(stats):
        arr = np.asarray(stats[name])
        enc = name.encode()
        out.write(struct.pack("<H", len(enc)))
        out.write(enc)
        out.write(struct.pack("<BB", _STAT_CODES[arr.dtype], arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        _write_array(out, arr, dtype=arr.dtype)
    _atomic_write(path, out.getvalue())


def load_checkpoint(path) -> CheckpointData:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes(), str(path))
    if r.exact(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (version,) = r.unpack("H")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    iteration, adam_step = r.unpack("QQ")
    (rng_len,) = r.unpack("Q")
    rng_state = json.loads(r.exact(rng_len))
    (cfg_len,) = r.unpack("Q")
    config = json.loads(r.exact(cfg_len))
    (scene_len,) = r.unpack("Q")
    model = model_from_bytes(r.exact(scene_len), label=f"{path}[scene]")
    (n_params,) = r.unpack("H")
    params = model.parameters()
    if n_params != len(params):
        raise FormatError(f"{path}: moment count {n_params} != parameter count {len(params)}")
    moments = {}
    for name, p in params.items():
        m = r.array(p.shape)
        v = r.array(p.shape)
        moments[name] = (m, v)
    (n_stats,) = r.unpack("H")
    stats = {}
    for _ in range(n_stats):
        (name_len,) = r.unpack("H")
        name = r.exact(name_len).decode()
        code, ndim = r.unpack("BB")
        if code not in _STAT_DTYPES:
            raise FormatError(f"{path}: unknown stat dtype code {code}")
        shape = r.unpack(f"{ndim}I") if ndim else ()
        stats[name] = r.array(shape, dtype=_STAT_DTYPES[code])
    r.expect_end()
    return CheckpointData(
        model=model, iteration=iteration, adam_step=adam_step,
        moments=moments, rng_state=rng_state, stats=stats, config=config,
    )
