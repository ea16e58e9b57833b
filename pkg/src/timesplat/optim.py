"""Adam optimization of the full scene, plus simplified anchor adaptation.

One training iteration renders a single uniformly-sampled training image,
backpropagates the loss through compositing, projection and decoding into
every learnable tensor, and applies per-group Adam updates. Anchors are
periodically grown where screen-space positional gradients are large and
pruned where opacity activations stay decisively negative.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.spatial import cKDTree

from .dataset import SceneManifest
from .errors import ConfigError, NumericalError, ShapeError
from .loss_metrics import LossWeights, total_loss
from .model import (
    AnchorSet,
    SceneModel,
    TimeEmbeddingTable,
    decode_backward,
    default_heads,
    zero_gradients,
)
from .rasterizer import composite_backward, project_backward, render_pipeline
from . import scene_io


@dataclass
class TrainConfig:
    iterations: int = 3000
    seed: int = 0
    encoder_mode: str = "embedding"  # or "positional"
    # model shape
    k_offsets: int = 10
    feature_dim: int = 32
    embed_dim: int = 16
    hidden_dim: int = 32
    # time rows must be separable from the start or the opacity gate loses
    # the race against per-time color fitting and visibility changes get
    # painted instead of gated
    embed_init_sigma: float = 2.0
    # learning rates per parameter group
    lr_centers: float = 0.0
    lr_features: float = 1.6e-4
    lr_offsets: float = 1.6e-4
    lr_scalings: float = 0.007
    lr_heads: float = 2e-3
    lr_embeddings: float = 5e-3
    lr_decay: float = 0.1  # anchor-group decay factor over the whole run
    # loss weights
    lambda_ssim: float = 0.2
    lambda_vol: float = 0.01
    # anchor adaptation
    adapt: bool = True
    adapt_interval: int = 100
    adapt_start: int = 500
    adapt_stop_fraction: float = 0.8
    grow_grad_threshold: float = 0.12  # mean |d loss / d mean2d| in pixels^-1
    prune_opacity_threshold: float = -0.5
    voxel_fraction: float = 1.0 / 128.0
    # rendering
    background: tuple = (0.0, 0.0, 0.0)
    tile_size: int = 16
    # io
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be positive")
        for name in (
            "lr_centers", "lr_features", "lr_offsets", "lr_scalings",
            "lr_heads", "lr_embeddings",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.encoder_mode not in ("embedding", "positional"):
            raise ConfigError(f"unknown encoder mode {self.encoder_mode!r}")
        if self.adapt_interval < 1:
            raise ConfigError("adapt_interval must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f for f in TrainConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "background" in d:
            d = dict(d, background=tuple(d["background"]))
        return TrainConfig(**d)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @staticmethod
    def for_params(params: dict) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr) -> None:
    """One Adam update, in place. `lr` is a scalar or a name->rate dict."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        rate = lr[name] if isinstance(lr, dict) else lr
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if rate == 0.0:
            continue
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= (rate * update).astype(p.dtype)


def _learning_rates(model: SceneModel, config: TrainConfig, iteration: int) -> dict:
    decay = config.lr_decay ** ((iteration + 1) / config.iterations)
    rates = {
        "anchors.centers": config.lr_centers * decay,
        "anchors.features": config.lr_features * decay,
        "anchors.offsets": config.lr_offsets * decay,
        "anchors.log_scalings": config.lr_scalings,
        "embeddings": config.lr_embeddings,
    }
    for name in model.parameters():
        if name.startswith("heads."):
            rates[name] = config.lr_heads
    return rates


# ---------------------------------------------------------------------------
# initialization


def voxel_centers(points: np.ndarray, voxel: float) -> np.ndarray:
    """Deduplicate points onto a voxel grid (unique sorts, so the result is
    deterministic regardless of input order)."""
    keys = np.unique(np.round(points / voxel).astype(np.int64), axis=0)
    return keys.astype(np.float64) * voxel


def scene_extent_of(points: np.ndarray, camera_centers=None) -> float:
    """Scene diameter estimate. Camera spread is included so that sparse or
    degenerate point clouds (e.g. a single seed point) still produce a sane
    working scale for scale clamps and input normalization."""
    centroid = points.mean(axis=0)
    radius = np.linalg.norm(points - centroid, axis=1).max()
    if camera_centers is not None and len(camera_centers):
        cam_radius = np.linalg.norm(np.asarray(camera_centers) - centroid, axis=1).max()
        radius = max(radius, 1.1 * cam_radius)
    return float(max(2.0 * radius, 1e-3))


def init_model(manifest: SceneManifest, config: TrainConfig, rng: np.random.Generator) -> SceneModel:
    points = manifest.sfm.positions
    cam_centers = [s.camera.center for s in manifest.samples("train")]
    extent = scene_extent_of(points, cam_centers)
    voxel = extent * config.voxel_fraction
    centers = voxel_centers(points, voxel)
    n = centers.shape[0]
    if n > 1:
        dists, _ = cKDTree(centers).query(centers, k=2)
        nn = np.maximum(dists[:, 1], voxel * 0.25)
    else:
        nn = np.full(n, voxel)
    dtype = np.float32
    anchors = AnchorSet(
        centers=centers.astype(dtype),
        features=np.zeros((n, config.feature_dim), dtype=dtype),
        offsets=np.zeros((n, config.k_offsets, 3), dtype=dtype),
        log_scalings=np.log(nn)[:, None].repeat(3, axis=1).astype(dtype),
    )
    heads = default_heads(
        config.feature_dim, config.k_offsets, config.embed_dim,
        hidden=config.hidden_dim, seed=rng, dtype=dtype,
    )
    # separation between rows only matters when there is more than one time;
    # for a single time a large random row is just an input bias
    sigma = config.embed_init_sigma if manifest.n_times > 1 else min(config.embed_init_sigma, 0.01)
    table = TimeEmbeddingTable(
        rng.normal(0.0, sigma, (manifest.n_times, config.embed_dim)).astype(dtype)
    )
    return SceneModel(
        anchors=anchors, heads=heads, embeddings=table,
        scene_extent=extent, encoder_mode=config.encoder_mode,
    )


def _fresh_stats(n: int, k: int) -> dict:
    return {
        "grad_accum": np.zeros((n, k), dtype=np.float32),
        "grad_count": np.zeros((n, k), dtype=np.int64),
        "opacity_max": np.full((n, k), -np.inf, dtype=np.float32),
    }


# ---------------------------------------------------------------------------
# anchor adaptation


def adapt_anchors(
    model: SceneModel, adam: AdamState, stats: dict, config: TrainConfig
) -> dict:
    """Grow anchors at high-gradient Gaussian positions (voxel-deduplicated)
    and prune anchors whose opacity stayed below the threshold for the whole
    interval. Mutates the model, optimizer state and stats in place."""
    anchors = model.anchors
    n, k = anchors.n_anchors, anchors.k
    voxel = model.scene_extent * config.voxel_fraction

    observed = stats["grad_count"] > 0
    mean_grad = np.where(
        observed, stats["grad_accum"] / np.maximum(stats["grad_count"], 1), 0.0
    )

    # growth candidates: current positions of flagged neural Gaussians
    flagged = observed & (mean_grad > config.grow_grad_threshold)
    scalings = np.exp(anchors.log_scalings)
    positions = anchors.centers[:, None, :] + anchors.offsets * scalings[:, None, :]
    cand_pos = positions[flagged]
    cand_anchor = np.nonzero(flagged)[0]

    existing_keys = {tuple(kk) for kk in np.round(anchors.centers / voxel).astype(np.int64)}
    new_centers, new_sources, taken = [], [], set()
    for pos, src in zip(cand_pos, cand_anchor):
        key = tuple(np.round(pos / voxel).astype(np.int64))
        if key in existing_keys or key in taken:
            continue
        taken.add(key)
        new_centers.append(np.asarray(key, dtype=np.float64) * voxel)
        new_sources.append(src)
    n_grow = len(new_centers)

    # prune anchors whose best opacity over the interval stayed below the
    # threshold (only anchors that were actually decoded at least once)
    anchor_seen = observed.any(axis=1) | np.isfinite(stats["opacity_max"]).any(axis=1)
    omax = np.where(
        np.isfinite(stats["opacity_max"]), stats["opacity_max"], -np.inf
    ).max(axis=1)
    prune = anchor_seen & (omax < config.prune_opacity_threshold)
    if prune.all() and n_grow == 0:
        prune[:] = False  # never empty the anchor set
    keep = ~prune
    n_pruned = int(prune.sum())

    dtype = anchors.centers.dtype
    parts = {
        "anchors.centers": anchors.centers[keep],
        "anchors.features": anchors.features[keep],
        "anchors.offsets": anchors.offsets[keep],
        "anchors.log_scalings": anchors.log_scalings[keep],
    }
    if n_grow:
        src = np.asarray(new_sources, dtype=np.int64)
        parts["anchors.centers"] = np.concatenate(
            [parts["anchors.centers"], np.asarray(new_centers, dtype=dtype)]
        )
        parts["anchors.features"] = np.concatenate(
            [parts["anchors.features"], anchors.features[src]]
        )
        parts["anchors.offsets"] = np.concatenate(
            [parts["anchors.offsets"], np.zeros((n_grow, k, 3), dtype=dtype)]
        )
        parts["anchors.log_scalings"] = np.concatenate(
            [parts["anchors.log_scalings"], anchors.log_scalings[src]]
        )

    model.anchors = AnchorSet(
        centers=np.ascontiguousarray(parts["anchors.centers"]),
        features=np.ascontiguousarray(parts["anchors.features"]),
        offsets=np.ascontiguousarray(parts["anchors.offsets"]),
        log_scalings=np.ascontiguousarray(parts["anchors.log_scalings"]),
    )

    # optimizer rows follow: kept rows survive, new rows start at zero
    for name in parts:
        for buf in (adam.m, adam.v):
            old = buf[name]
            kept = old[keep]
            if n_grow:
                kept = np.concatenate(
                    [kept, np.zeros((n_grow,) + old.shape[1:], dtype=old.dtype)]
                )
            buf[name] = np.ascontiguousarray(kept)

    fresh = _fresh_stats(model.anchors.n_anchors, k)
    for key in fresh:
        stats[key] = fresh[key]
    return {"grown": n_grow, "pruned": n_pruned, "anchors": model.anchors.n_anchors}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: SceneModel
    log: list
    adam: AdamState
    rng: np.random.Generator
    stats: dict = field(default_factory=dict)


def train(
    manifest: SceneManifest,
    config: TrainConfig,
    out_dir=None,
    resume: "scene_io.CheckpointData" = None,
    log_fn=None,
) -> TrainResult:
    """Optimize a scene model on the manifest's train split.

    Deterministic for a given (config, manifest) in single-threaded mode;
    resuming from a checkpoint continues the exact trajectory.
    """
    samples = manifest.samples("train")
    if not samples:
        raise ConfigError("training requires a non-empty train split")
    for s in samples:
        if not 0 <= s.time_index < manifest.n_times:
            raise ConfigError(f"sample {s.name} has time index outside [0, T)")

    if resume is not None:
        config = TrainConfig.from_dict(resume.config)
        model = resume.model
        adam = AdamState.for_params(model.parameters())
        for name, (m, v) in resume.moments.items():
            adam.m[name] = m.copy()
            adam.v[name] = v.copy()
        adam.step = resume.adam_step
        rng = np.random.default_rng(0)
        rng.bit_generator.state = resume.rng_state
        stats = {k: v.copy() for k, v in resume.stats.items()}
        start_iteration = resume.iteration
    else:
        rng = np.random.default_rng(config.seed)
        model = init_model(manifest, config, rng)
        adam = AdamState.for_params(model.parameters())
        stats = _fresh_stats(model.anchors.n_anchors, model.k)
        start_iteration = 0

    weights = LossWeights(config.lambda_ssim, config.lambda_vol)
    adapt_stop = int(config.adapt_stop_fraction * config.iterations)
    log = []
    t0 = _time.perf_counter()

    for i in range(start_iteration, config.iterations):
        pick = int(rng.integers(len(samples)))
        sample = samples[pick]
        gt = manifest.image(sample)

        output, batch, splats = render_pipeline(
            model, sample.camera, time_index=sample.time_index,
            background=config.background, tile_size=config.tile_size,
        )
        kept = splats.source_index
        report = total_loss(output.image, gt, batch.scales[kept], weights)
        if not np.isfinite(report.total):
            raise NumericalError(
                f"training diverged at iteration {i + 1}: "
                f"l1={report.l1} ssim_term={report.ssim_term} vol={report.vol}"
            )

        d_color, d_alpha, d_mean2d, d_cov2d = composite_backward(output, report.image_grad)
        gauss_grads = project_backward(
            splats, batch, sample.camera, d_mean2d, d_cov2d,
            d_alpha=d_alpha, d_color=d_color,
        )
        gauss_grads.scales[kept] += report.scale_grad
        grads, _ = decode_backward(model, batch, gauss_grads)

        if config.adapt:
            cache = batch.cache
            if cache is not None and kept.size:
                anchor_of = batch.anchor_index[kept]
                slot_of = kept % model.k
                norms = np.linalg.norm(d_mean2d, axis=1)
                np.add.at(stats["grad_accum"], (anchor_of, slot_of), norms.astype(np.float32))
                np.add.at(stats["grad_count"], (anchor_of, slot_of), 1)
            if cache is not None and cache.visible.size:
                vis = cache.visible
                stats["opacity_max"][vis] = np.maximum(
                    stats["opacity_max"][vis], cache.opacity.astype(np.float32)
                )

        adam_step(model.parameters(), grads, adam, _learning_rates(model, config, i))

        entry = {
            "iteration": i + 1,
            "total": report.total,
            "l1": report.l1,
            "ssim_term": report.ssim_term,
            "vol": report.vol,
            "anchors": model.anchors.n_anchors,
            "splats": int(kept.size),
            "wall_time": _time.perf_counter() - t0,
        }

        it = i + 1
        if (
            config.adapt
            and it >= config.adapt_start
            and it <= adapt_stop
            and it % config.adapt_interval == 0
        ):
            adaptation = adapt_anchors(model, adam, stats, config)
            entry["adaptation"] = adaptation

        log.append(entry)
        if log_fn is not None:
            log_fn(entry)

        if (
            out_dir is not None
            and config.checkpoint_interval > 0
            and it % config.checkpoint_interval == 0
            and it < config.iterations
        ):
            scene_io.save_checkpoint(
                f"{out_dir}/checkpoint_{it:06d}.gtmc",
                model, it, adam.step,
                {k: (adam.m[k], adam.v[k]) for k in adam.m},
                rng.bit_generator.state, stats, config.to_dict(),
            )

    return TrainResult(model=model, log=log, adam=adam, rng=rng, stats=stats)
