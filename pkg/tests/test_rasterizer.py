import numpy as np
import pytest

from timesplat.errors import StateError
from timesplat.model import GaussianGrads, NeuralGaussianBatch, decode_neural_gaussians
from timesplat.rasterizer import (
    COV2D_DILATION,
    Splat2DList,
    composite_backward,
    composite_forward,
    get_backend,
    project,
    project_backward,
    render,
    set_backend,
)

from helpers import central_diff, make_camera, make_model, random_batch, rel_err


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    previous = get_backend()
    set_backend(request.param)
    yield request.param
    set_backend(previous)


# --- independent oracle -------------------------------------------------------
# Per pixel: sort every splat by depth (ties by source index), composite in
# float64 with no tiling, no alpha threshold, no early stop. Uses cumulative
# products and a matrix inverse rather than the renderer's loop/conic path.


def oracle_composite(splats: Splat2DList, height, width, background):
    order = np.lexsort((splats.source_index, splats.depth))
    mean = splats.mean2d[order].astype(np.float64)
    cov = splats.cov2d[order].astype(np.float64)
    ab = splats.alpha_base[order].astype(np.float64)
    col = splats.color[order].astype(np.float64)
    m = mean.shape[0]
    full = np.empty((m, 2, 2))
    full[:, 0, 0] = cov[:, 0]
    full[:, 0, 1] = cov[:, 1]
    full[:, 1, 0] = cov[:, 1]
    full[:, 1, 1] = cov[:, 2]
    conic = np.linalg.inv(full)

    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    px = (cc.ravel() + 0.5)[:, None] - mean[None, :, 0]
    py = (rr.ravel() + 0.5)[:, None] - mean[None, :, 1]
    power = -0.5 * (
        conic[None, :, 0, 0] * px**2
        + 2.0 * conic[None, :, 0, 1] * px * py
        + conic[None, :, 1, 1] * py**2
    )
    alpha = ab[None, :] * np.exp(power)
    t_cum = np.cumprod(1.0 - alpha, axis=1)
    t_before = np.concatenate([np.ones((alpha.shape[0], 1)), t_cum[:, :-1]], axis=1)
    img = (t_before * alpha) @ col
    img += t_cum[:, -1:] * np.asarray(background, dtype=np.float64)[None, :]
    return img.reshape(height, width, 3), t_cum[:, -1].reshape(height, width)


def make_raw_splats(rng, m, width, height, dtype=np.float64, alpha_range=(0.05, 0.95)):
    mean2d = rng.uniform(-4, [width + 4, height + 4], (m, 2))
    base = rng.normal(0, 1.2, (m, 2, 2))
    cov = np.einsum("nij,nkj->nik", base, base) + np.eye(2) * 0.3
    packed = np.stack([cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]], axis=1)
    depth = rng.uniform(1.0, 9.0, m)
    return Splat2DList(
        mean2d=mean2d.astype(dtype),
        cov2d=packed.astype(dtype),
        depth=depth.astype(dtype),
        alpha_base=rng.uniform(*alpha_range, m).astype(dtype),
        color=rng.uniform(0, 1, (m, 3)).astype(dtype),
        source_index=np.arange(m, dtype=np.int64),
        p_cam=np.zeros((m, 3), dtype=dtype),
        n_source=m,
    )


# --- projection ---------------------------------------------------------------


def _single_gaussian_batch(mean, opacity, scale, quat, color, dtype=np.float64):
    return NeuralGaussianBatch(
        means=np.array([mean], dtype=dtype),
        opacities=np.array([opacity], dtype=dtype),
        scales=np.array([scale], dtype=dtype),
        rotations=np.array([quat], dtype=dtype),
        colors=np.array([color], dtype=dtype),
        anchor_index=np.zeros(1, dtype=np.int64),
    )


def test_project_on_axis_isotropic():
    # identity pose, isotropic unit covariance at depth z = fx = fy:
    # J = [[1,0,0],[0,1,0]] so cov2d = I + 0.3 I (hand-multiplied)
    from timesplat.model import Camera

    cam = Camera(fx=60.0, fy=60.0, cx=32.0, cy=32.0, width=64, height=64,
                 rotation=np.eye(3), translation=np.zeros(3))
    batch = _single_gaussian_batch([0, 0, 60.0], 0.7, [1, 1, 1], [1, 0, 0, 0], [1, 0, 0])
    splats = project(batch, cam)
    assert len(splats) == 1
    np.testing.assert_allclose(splats.cov2d[0], [1.3, 0.0, 1.3], atol=1e-9)
    np.testing.assert_allclose(splats.mean2d[0], [32.0, 32.0], atol=1e-9)
    assert splats.alpha_base[0] == pytest.approx(0.7)


def test_project_culls_behind_camera():
    from timesplat.model import Camera

    cam = Camera(fx=60.0, fy=60.0, cx=32.0, cy=32.0, width=64, height=64,
                 rotation=np.eye(3), translation=np.zeros(3))
    batch = _single_gaussian_batch([0, 0, -3.0], 0.7, [1, 1, 1], [1, 0, 0, 0], [1, 0, 0])
    assert len(project(batch, cam)) == 0


def test_project_culls_negative_opacity():
    batch, cam = random_batch(np.random.default_rng(0), 4)
    batch.opacities[1] = -0.1
    batch.opacities[3] = 0.0
    splats = project(batch, cam)
    assert set(splats.source_index) == {0, 2}


def test_project_alpha_clamp():
    batch, cam = random_batch(np.random.default_rng(0), 2)
    batch.opacities[:] = 0.9999
    splats = project(batch, cam)
    assert np.all(splats.alpha_base <= 0.99)


# --- compositing: exact examples ----------------------------------------------


def _tiny_splats(alphas, colors, depths, mean, cov=(4.0, 0.0, 4.0), dtype=np.float64):
    m = len(alphas)
    return Splat2DList(
        mean2d=np.tile(np.asarray(mean, dtype=dtype), (m, 1)),
        cov2d=np.tile(np.asarray(cov, dtype=dtype), (m, 1)),
        depth=np.asarray(depths, dtype=dtype),
        alpha_base=np.asarray(alphas, dtype=dtype),
        color=np.asarray(colors, dtype=dtype),
        source_index=np.arange(m, dtype=np.int64),
        p_cam=np.zeros((m, 3), dtype=dtype),
        n_source=m,
    )


def test_single_opaque_splat(backend):
    cam = make_camera(width=8, height=8)
    splats = _tiny_splats([1.0], [[1.0, 0.0, 0.0]], [1.0], mean=(4.5, 3.5))
    out = composite_forward(splats, cam)
    np.testing.assert_allclose(out.image[3, 4], [1.0, 0.0, 0.0], atol=1e-12)
    assert out.final_transmittance[3, 4] == 0.0


def test_front_back_blend(backend):
    # front alpha 0.5 red over back alpha 1.0 blue on black background
    cam = make_camera(width=8, height=8)
    splats = _tiny_splats(
        [1.0, 0.5], [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]], [5.0, 1.0], mean=(4.5, 3.5)
    )
    out = composite_forward(splats, cam)
    np.testing.assert_allclose(out.image[3, 4], [0.5, 0.0, 0.5], atol=1e-12)


def test_empty_splat_list(backend):
    cam = make_camera(width=8, height=6)
    splats = _tiny_splats([], np.zeros((0, 3)), [], mean=np.zeros((0, 2)))
    out = composite_forward(splats, cam, background=(0.2, 0.4, 0.6))
    assert np.allclose(out.image, [0.2, 0.4, 0.6])
    assert np.all(out.final_transmittance == 1.0)


def test_singular_cov_skipped(backend):
    cam = make_camera(width=8, height=8)
    splats = _tiny_splats(
        [0.9, 0.9], [[1, 0, 0], [0, 1, 0]], [1.0, 2.0], mean=(4.5, 3.5)
    )
    splats.cov2d[0] = (1.0, 1.0, 1.0)  # det = 0
    out = composite_forward(splats, cam)
    assert out.n_skipped_singular == 1
    assert out.image[3, 4, 1] > 0.0  # the healthy splat still renders
    assert out.image[3, 4, 0] == 0.0


# --- compositing: oracle equivalence -------------------------------------------


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tile_renderer_matches_oracle(backend, dtype):
    rng = np.random.default_rng(42)
    worst = 0.0
    for trial in range(6):
        m = int(rng.integers(5, 120))
        splats = make_raw_splats(rng, m, 64, 48, dtype=dtype)
        cam = make_camera(width=64, height=48)
        out = composite_forward(splats, cam, exact=True, background=(0.1, 0.2, 0.3))
        ref, ref_t = oracle_composite(splats, 48, 64, (0.1, 0.2, 0.3))
        worst = max(worst, np.abs(out.image - ref).max())
        worst = max(worst, np.abs(out.final_transmittance - ref_t).max())
    assert worst <= 2e-3


def test_transmittance_and_energy_properties(backend):
    rng = np.random.default_rng(3)
    splats = make_raw_splats(rng, 60, 32, 32)
    cam = make_camera(width=32, height=32)
    out = composite_forward(splats, cam, background=(1.0, 1.0, 1.0))
    t = out.final_transmittance
    assert np.all((t >= 0.0) & (t <= 1.0))
    assert np.all(out.image >= -1e-9)
    assert np.all(out.image <= 1.0 + 1e-9)


def test_order_invariance(backend):
    rng = np.random.default_rng(5)
    splats = make_raw_splats(rng, 40, 32, 32)
    cam = make_camera(width=32, height=32)
    ref = composite_forward(splats, cam).image
    perm = rng.permutation(40)
    shuffled = Splat2DList(
        mean2d=splats.mean2d[perm],
        cov2d=splats.cov2d[perm],
        depth=splats.depth[perm],
        alpha_base=splats.alpha_base[perm],
        color=splats.color[perm],
        source_index=splats.source_index[perm],
        p_cam=splats.p_cam[perm],
        n_source=splats.n_source,
    )
    np.testing.assert_array_equal(composite_forward(shuffled, cam).image, ref)


def test_visibility_gate_invariance(backend):
    # deleting all Gaussians with opacity <= 0 leaves renders bitwise equal
    rng = np.random.default_rng(11)
    batch, cam = random_batch(rng, 50)
    batch.opacities[:] = rng.uniform(-0.9, 0.9, 50)
    full = composite_forward(project(batch, cam), cam).image
    keep = batch.opacities > 0
    filtered = NeuralGaussianBatch(
        means=batch.means[keep],
        opacities=batch.opacities[keep],
        scales=batch.scales[keep],
        rotations=batch.rotations[keep],
        colors=batch.colors[keep],
        anchor_index=batch.anchor_index[keep],
    )
    np.testing.assert_array_equal(composite_forward(project(filtered, cam), cam).image, full)


def test_backends_agree():
    rng = np.random.default_rng(7)
    splats = make_raw_splats(rng, 80, 48, 40, dtype=np.float32)
    cam = make_camera(width=48, height=40)
    set_backend("numba")
    a = composite_forward(splats, cam).image
    set_backend("numpy")
    b = composite_forward(splats, cam).image
    set_backend("numba")
    np.testing.assert_allclose(a, b, atol=2e-6)


# --- compositing backward -------------------------------------------------------


def test_composite_backward_zero_grad(backend):
    rng = np.random.default_rng(0)
    splats = make_raw_splats(rng, 10, 16, 16)
    cam = make_camera(width=16, height=16)
    out = composite_forward(splats, cam)
    d_color, d_alpha, d_mean, d_cov = composite_backward(out, np.zeros((16, 16, 3)))
    assert np.all(d_color == 0) and np.all(d_alpha == 0)
    assert np.all(d_mean == 0) and np.all(d_cov == 0)


def test_composite_backward_requires_state():
    out = composite_forward(
        _tiny_splats([0.5], [[1, 0, 0]], [1.0], mean=(2.0, 2.0)), make_camera(width=8, height=8)
    )
    out.tile_offsets = None
    with pytest.raises(StateError):
        composite_backward(out, np.zeros((8, 8, 3)))


def test_composite_backward_finite_differences(backend):
    # 5 splats, 16x16, thresholds disabled, 64-bit, step 1e-4
    rng = np.random.default_rng(8)
    splats = make_raw_splats(rng, 5, 16, 16)
    cam = make_camera(width=16, height=16)
    w_img = rng.normal(0, 1, (16, 16, 3))

    def forward(sp):
        return float((composite_forward(sp, cam, exact=True).image * w_img).sum())

    out = composite_forward(splats, cam, exact=True)
    d_color, d_alpha, d_mean, d_cov = composite_backward(out, w_img)

    def clone(**kw):
        base = dict(
            mean2d=splats.mean2d, cov2d=splats.cov2d, depth=splats.depth,
            alpha_base=splats.alpha_base, color=splats.color,
            source_index=splats.source_index, p_cam=splats.p_cam, n_source=5,
        )
        base.update(kw)
        return Splat2DList(**base)

    fd_color = central_diff(lambda x: forward(clone(color=x)), splats.color.copy(), eps=1e-4)
    fd_alpha = central_diff(lambda x: forward(clone(alpha_base=x)), splats.alpha_base.copy(), eps=1e-4)
    fd_mean = central_diff(lambda x: forward(clone(mean2d=x)), splats.mean2d.copy(), eps=1e-4)
    fd_cov_packed = central_diff(lambda x: forward(clone(cov2d=x)), splats.cov2d.copy(), eps=1e-4)
    # packed off-diagonal appears twice in the full matrix
    d_cov_packed = np.stack(
        [d_cov[:, 0, 0], d_cov[:, 0, 1] + d_cov[:, 1, 0], d_cov[:, 1, 1]], axis=1
    )
    assert rel_err(d_color, fd_color) < 1e-3
    assert rel_err(d_alpha, fd_alpha) < 1e-3
    assert rel_err(d_mean, fd_mean) < 1e-3
    assert rel_err(d_cov_packed, fd_cov_packed) < 1e-3


def test_occluded_splat_gets_no_gradient(backend):
    # a stack of alpha-0.99 walls drives T below the early-stop threshold;
    # the splat behind them is never composited and gets zero gradient
    cam = make_camera(width=16, height=16)
    huge = (1e8, 0.0, 1e8)  # flat over the whole canvas
    splats = _tiny_splats(
        [0.99, 0.99, 0.99, 0.9],
        [[1.0, 0, 0], [1.0, 0, 0], [1.0, 0, 0], [0.0, 1.0, 0]],
        [1.0, 2.0, 3.0, 5.0],
        mean=(8.0, 8.0),
        cov=huge,
    )
    out = composite_forward(splats, cam)
    # T after three walls = 1e-6 < 1e-4: stop crossed everywhere
    assert np.all(out.final_transmittance <= 1e-4)
    d_color, _, _, _ = composite_backward(out, np.ones((16, 16, 3)))
    assert np.abs(d_color[3]).max() < 1e-6


# --- projection backward ---------------------------------------------------------


def test_project_backward_finite_differences():
    rng = np.random.default_rng(15)
    batch, cam = random_batch(rng, 3)
    w_mean = rng.normal(0, 1, (3, 2))
    w_cov = rng.normal(0, 1, (3, 3))

    def forward(b):
        sp = project(b, cam)
        packed = sp.cov2d
        return float((sp.mean2d * w_mean).sum() + (packed * w_cov).sum())

    splats = project(batch, cam)
    d_cov_full = np.empty((3, 2, 2))
    d_cov_full[:, 0, 0] = w_cov[:, 0]
    d_cov_full[:, 0, 1] = 0.5 * w_cov[:, 1]
    d_cov_full[:, 1, 0] = 0.5 * w_cov[:, 1]
    d_cov_full[:, 1, 1] = w_cov[:, 2]
    grads = project_backward(splats, batch, cam, w_mean, d_cov_full)

    def clone(**kw):
        base = dict(
            means=batch.means, opacities=batch.opacities, scales=batch.scales,
            rotations=batch.rotations, colors=batch.colors, anchor_index=batch.anchor_index,
        )
        base.update(kw)
        return NeuralGaussianBatch(**base)

    fd_means = central_diff(lambda x: forward(clone(means=x)), batch.means.copy(), eps=1e-5)
    fd_scales = central_diff(lambda x: forward(clone(scales=x)), batch.scales.copy(), eps=1e-5)
    fd_rots = central_diff(lambda x: forward(clone(rotations=x)), batch.rotations.copy(), eps=1e-5)
    assert rel_err(grads.means, fd_means) < 1e-3
    assert rel_err(grads.scales, fd_scales) < 1e-3
    assert rel_err(grads.rotations, fd_rots) < 1e-3


def test_project_backward_isotropic_rotation_grad_zero():
    rng = np.random.default_rng(16)
    batch, cam = random_batch(rng, 1)
    batch.scales[0] = (0.2, 0.2, 0.2)
    splats = project(batch, cam)
    d_cov = np.full((1, 2, 2), 1.0)
    grads = project_backward(splats, batch, cam, np.zeros((1, 2)), d_cov)
    np.testing.assert_allclose(grads.rotations, 0.0, atol=1e-12)


def test_project_backward_on_axis_scale_grad():
    # on-axis isotropic case: cov2d = (fx/z)^2 * diag(sx^2, sy^2) + 0.3I,
    # so d cov2d_00 / d sx = 2 sx (fx/z)^2 and cross terms vanish
    from timesplat.model import Camera

    cam = Camera(fx=60.0, fy=60.0, cx=32.0, cy=32.0, width=64, height=64,
                 rotation=np.eye(3), translation=np.zeros(3))
    s = np.array([0.5, 0.8, 1.1])
    batch = _single_gaussian_batch([0, 0, 30.0], 0.7, s, [1, 0, 0, 0], [1, 0, 0])
    splats = project(batch, cam)
    d_cov = np.zeros((1, 2, 2))
    d_cov[0, 0, 0] = 1.0
    grads = project_backward(splats, batch, cam, np.zeros((1, 2)), d_cov)
    expected = np.array([2 * s[0] * (60.0 / 30.0) ** 2, 0.0, 0.0])
    np.testing.assert_allclose(grads.scales[0], expected, atol=1e-9)


def test_end_to_end_rasterizer_finite_differences(backend):
    # chain composite_backward -> project_backward against FD on the batch
    rng = np.random.default_rng(23)
    batch, cam16 = random_batch(rng, 5, width=16, height=16)
    w_img = rng.normal(0, 1, (16, 16, 3))

    def forward(b):
        sp = project(b, cam16)
        return float((composite_forward(sp, cam16, exact=True).image * w_img).sum())

    splats = project(batch, cam16)
    out = composite_forward(splats, cam16, exact=True)
    d_color, d_alpha, d_mean, d_cov = composite_backward(out, w_img)
    grads = project_backward(splats, batch, cam16, d_mean, d_cov, d_alpha=d_alpha, d_color=d_color)

    def clone(**kw):
        base = dict(
            means=batch.means, opacities=batch.opacities, scales=batch.scales,
            rotations=batch.rotations, colors=batch.colors, anchor_index=batch.anchor_index,
        )
        base.update(kw)
        return NeuralGaussianBatch(**base)

    for name, analytic in [
        ("means", grads.means), ("opacities", grads.opacities),
        ("scales", grads.scales), ("rotations", grads.rotations),
        ("colors", grads.colors),
    ]:
        arr = getattr(batch, name).copy()
        fd = central_diff(lambda x, n=name: forward(clone(**{n: x})), arr, eps=1e-4)
        assert rel_err(analytic, fd) < 1e-3, name


# --- render ----------------------------------------------------------------------


def test_render_no_visible_anchors(backend):
    model = make_model(seed=0)
    model.anchors.centers[:, 1] = -50.0  # behind the test camera at y=-5
    out = render(model, make_camera(), time_index=0, background=(0.3, 0.1, 0.2))
    assert np.allclose(out.image, [0.3, 0.1, 0.2])
    assert np.all(out.final_transmittance == 1.0)


def test_render_by_index_equals_by_embedding(backend):
    model = make_model(seed=4)
    cam = make_camera()
    a = render(model, cam, time_index=1)
    b = render(model, cam, embedding=model.embeddings.embeddings[1].copy())
    np.testing.assert_array_equal(a.image, b.image)


def test_render_deterministic(backend):
    model = make_model(seed=4)
    cam = make_camera()
    a = render(model, cam, time_index=0)
    b = render(model, cam, time_index=0)
    np.testing.assert_array_equal(a.image, b.image)
