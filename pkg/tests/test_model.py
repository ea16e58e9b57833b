import numpy as np
import pytest

from timesplat.errors import NumericalError, StateError
from timesplat.model import (
    AnchorSet,
    GaussianGrads,
    SceneModel,
    TimeEmbeddingTable,
    build_covariance,
    decode_backward,
    decode_neural_gaussians,
    decompose_color,
    default_heads,
    interpolate_embedding,
    positional_time_encoding,
    zero_gradients,
)

from helpers import central_diff, make_camera, make_model, rel_err


# --- time encoders -----------------------------------------------------------


def test_positional_encoding_at_zero():
    np.testing.assert_allclose(positional_time_encoding(0.0, 2), [0, 1, 0, 1], atol=1e-15)


def test_positional_encoding_at_one():
    np.testing.assert_allclose(positional_time_encoding(1.0, 1), [0, -1], atol=1e-12)


def test_positional_encoding_at_half():
    np.testing.assert_allclose(
        positional_time_encoding(0.5, 2), [1, 0, 0, -1], atol=1e-12
    )


def test_interpolate_endpoints_and_linear():
    table = TimeEmbeddingTable(np.array([[0.0, 0.0], [2.0, 4.0]]))
    np.testing.assert_array_equal(interpolate_embedding(table, 0, 1, 0.0), [0, 0])
    np.testing.assert_array_equal(interpolate_embedding(table, 0, 1, 1.0), [2, 4])
    np.testing.assert_allclose(interpolate_embedding(table, 0, 1, 0.25), [0.5, 1.0])
    with pytest.raises(IndexError):
        interpolate_embedding(table, 0, 2, 0.5)


# --- covariance --------------------------------------------------------------


def test_covariance_identity():
    np.testing.assert_allclose(
        build_covariance([1, 1, 1], [1, 0, 0, 0]), np.eye(3), atol=1e-12
    )


def test_covariance_diagonal():
    np.testing.assert_allclose(
        build_covariance([1, 2, 3], [1, 0, 0, 0]), np.diag([1.0, 4.0, 9.0]), atol=1e-12
    )


def test_covariance_rotated():
    # 90 degree rotation about z maps the y-stretched axis onto x:
    # R diag(1,4,1) R^T = diag(4,1,1), hand-multiplied
    q = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    np.testing.assert_allclose(
        build_covariance([1, 2, 1], q), np.diag([4.0, 1.0, 1.0]), atol=1e-12
    )


def test_covariance_properties():
    rng = np.random.default_rng(0)
    for _ in range(25):
        scale = rng.uniform(0.1, 3.0, 3)
        q = rng.normal(0, 1, 4)
        q /= np.linalg.norm(q)
        cov = build_covariance(scale, q)
        np.testing.assert_allclose(cov, cov.T, atol=1e-9)
        x = rng.normal(0, 1, (10, 3))
        assert np.all(np.einsum("ni,ij,nj->n", x, cov, x) >= -1e-12)
        np.testing.assert_allclose(np.linalg.det(cov), np.prod(scale) ** 2, rtol=1e-9)
        np.testing.assert_allclose(
            np.sort(np.linalg.eigvalsh(cov)), np.sort(scale**2), rtol=1e-9
        )


def test_covariance_zero_quaternion():
    with pytest.raises(NumericalError):
        build_covariance([1, 1, 1], [0, 0, 0, 0])


# --- color decomposition -----------------------------------------------------


def test_blend_identities():
    heads = default_heads(4, 2, 3, hidden=8, seed=1, dtype=np.float64)
    f = np.zeros(4)
    c, c_s, c_d, m = decompose_color(f, 0.5, [0, 0, 1], np.zeros(3), heads)
    # reconstruct by hand from the returned pieces
    np.testing.assert_allclose(c, (1 - m[:, None]) * c_s + m[:, None] * c_d, rtol=1e-12)
    blended = np.where(m[:, None] == 0, c_s, c)
    np.testing.assert_allclose(blended, np.where(m[:, None] == 0, c_s, c))
    # convexity per channel
    assert np.all(c >= np.minimum(c_s, c_d) - 1e-12)
    assert np.all(c <= np.maximum(c_s, c_d) + 1e-12)


def test_blend_arithmetic():
    # m = 0.5, c_s = (1,0,0), c_d = (0,0,1) -> (0.5, 0, 0.5)
    c = (1 - 0.5) * np.array([1.0, 0, 0]) + 0.5 * np.array([0, 0, 1.0])
    np.testing.assert_allclose(c, [0.5, 0, 0.5])


# --- decoding ----------------------------------------------------------------


def test_mean_composition():
    # anchor at origin, offset (1,1,1), scaling (2,2,2) -> mean (2,2,2)
    model = make_model(n_anchors=1, k=1, seed=0)
    model.anchors.centers[:] = 0.0
    model.anchors.offsets[:] = 1.0
    model.anchors.log_scalings[:] = np.log(2.0)
    cam = make_camera()
    batch = decode_neural_gaussians(model, cam, time_index=0)
    np.testing.assert_allclose(batch.means[0], [2.0, 2.0, 2.0], rtol=1e-12)


def test_zero_heads_decode():
    model = make_model(n_anchors=3, k=2, seed=0)
    for _, head in model.heads.named():
        for w in head.weights:
            w[:] = 0.0
        for b in head.biases:
            b[:] = 0.0
    batch = decode_neural_gaussians(model, make_camera(), time_index=0)
    assert np.all(batch.opacities == 0.0)
    assert np.all(batch.colors == 0.5)
    # identity-biased quaternion normalization yields the identity rotation
    np.testing.assert_allclose(batch.rotations, [[1, 0, 0, 0]] * len(batch), atol=1e-12)


def test_geometry_time_independence():
    rng = np.random.default_rng(7)
    for trial in range(20):
        model = make_model(n_anchors=4, k=2, seed=trial, n_times=4)
        cam = make_camera(eye=rng.uniform(-6, 6, 3) * [1, 1, 0.3] + [0, -8, 2])
        batches = [decode_neural_gaussians(model, cam, time_index=t) for t in range(4)]
        z = interpolate_embedding(model.embeddings, 0, 3, 0.37)
        batches.append(decode_neural_gaussians(model, cam, embedding=z))
        base = batches[0]
        for b in batches[1:]:
            np.testing.assert_array_equal(b.means, base.means)
            np.testing.assert_array_equal(b.scales, base.scales)
            np.testing.assert_array_equal(b.rotations, base.rotations)
        # opacities/colors must differ across at least one pair of times
        assert any(np.any(b.opacities != base.opacities) for b in batches[1:4])


def test_decode_determinism_and_ranges():
    model = make_model(seed=3)
    cam = make_camera()
    b1 = decode_neural_gaussians(model, cam, time_index=1)
    b2 = decode_neural_gaussians(model, cam, time_index=1)
    np.testing.assert_array_equal(b1.means, b2.means)
    np.testing.assert_array_equal(b1.colors, b2.colors)
    assert np.all(np.abs(b1.opacities) < 1.0)
    assert np.all((b1.colors > 0.0) & (b1.colors < 1.0))
    assert np.all(b1.scales > 0.0)
    np.testing.assert_allclose(np.linalg.norm(b1.rotations, axis=1), 1.0, atol=1e-6)
    assert len(b1) == len(np.unique(b1.anchor_index)) * model.k


def test_same_index_interpolation_is_exact():
    # rendering with interpolate(t, t, alpha) must equal rendering with z_t
    # bitwise, for any alpha
    model = make_model(seed=6)
    cam = make_camera()
    base = decode_neural_gaussians(model, cam, time_index=1)
    for alpha in (0.0, 0.3, 0.77, 1.0):
        z = interpolate_embedding(model.embeddings, 1, 1, alpha)
        batch = decode_neural_gaussians(model, cam, embedding=z)
        np.testing.assert_array_equal(batch.opacities, base.opacities)
        np.testing.assert_array_equal(batch.colors, base.colors)


def test_embedding_row_equals_time_index():
    model = make_model(seed=5)
    cam = make_camera()
    by_index = decode_neural_gaussians(model, cam, time_index=2)
    by_vector = decode_neural_gaussians(
        model, cam, embedding=model.embeddings.embeddings[2].copy()
    )
    np.testing.assert_array_equal(by_index.opacities, by_vector.opacities)
    np.testing.assert_array_equal(by_index.colors, by_vector.colors)


def test_decode_time_out_of_range():
    model = make_model(seed=0, n_times=2)
    with pytest.raises(IndexError):
        decode_neural_gaussians(model, make_camera(), time_index=5)


def test_decode_nonfinite_head_output():
    model = make_model(seed=0)
    model.heads.opacity.weights[0][:] = np.inf
    with pytest.raises(NumericalError) as exc:
        decode_neural_gaussians(model, make_camera(), time_index=0)
    assert "opacity" in str(exc.value)


def test_frustum_culling_behind_camera():
    model = make_model(n_anchors=2, k=2, seed=0)
    cam = make_camera(eye=(0, -5, 0))
    model.anchors.centers[0] = (0.0, 0.0, 0.0)  # in front
    model.anchors.centers[1] = (0.0, -20.0, 0.0)  # behind the camera
    batch = decode_neural_gaussians(model, cam, time_index=0)
    assert set(batch.anchor_index) == {0}


# --- decode backward ---------------------------------------------------------


def _decode_scalar_loss(model, cam, weights, time_index=0):
    batch = decode_neural_gaussians(model, cam, time_index=time_index)
    wm, wo, ws, wr, wc = weights
    return float(
        (batch.means * wm).sum()
        + (batch.opacities * wo).sum()
        + (batch.scales * ws).sum()
        + (batch.rotations * wr).sum()
        + (batch.colors * wc).sum()
    )


def _fd_check_decode(model, cam, tol, time_index=0, skip=()):
    rng = np.random.default_rng(99)
    batch = decode_neural_gaussians(model, cam, time_index=time_index)
    m = len(batch)
    weights = (
        rng.normal(0, 1, (m, 3)),
        rng.normal(0, 1, m),
        rng.normal(0, 1, (m, 3)),
        rng.normal(0, 1, (m, 4)),
        rng.normal(0, 1, (m, 3)),
    )
    upstream = GaussianGrads(*weights)
    grads, _ = decode_backward(model, batch, upstream)

    params = model.parameters()
    failures = []
    for name, p in params.items():
        if name in skip:
            continue

        def f(x, name=name, p=p):
            orig = p.copy()
            p[...] = x
            try:
                return _decode_scalar_loss(model, cam, weights, time_index)
            finally:
                p[...] = orig

        fd = central_diff(f, p.copy(), eps=1e-5)
        err = rel_err(grads[name], fd)
        if max(np.abs(fd).max(), np.abs(grads[name]).max()) < 1e-12:
            continue  # both zero: nothing to compare
        if err >= tol:
            failures.append((name, err))
    assert not failures, f"gradient mismatches: {failures}"


def test_decode_backward_single_anchor_fd():
    # every parameter of a one-anchor model, rel err < 1e-4 at 64-bit
    model = make_model(n_anchors=1, k=2, feature_dim=4, embed_dim=4, hidden=8, seed=21, extent=8.0)
    cam = make_camera()
    _fd_check_decode(model, cam, tol=1e-4, time_index=1)


def test_decode_backward_multi_anchor_fd():
    model = make_model(n_anchors=3, k=2, feature_dim=4, embed_dim=4, hidden=8, seed=13, extent=8.0)
    cam = make_camera()
    _fd_check_decode(model, cam, tol=1e-4, time_index=0)


def test_decode_backward_zero_upstream():
    model = make_model(seed=1)
    batch = decode_neural_gaussians(model, make_camera(), time_index=0)
    grads, d_z = decode_backward(model, batch, GaussianGrads.zeros(batch))
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(d_z == 0)


def test_decode_backward_blend_derivative():
    # d c / d c_s = (1 - m) elementwise
    model = make_model(n_anchors=1, k=1, seed=2)
    cam = make_camera()
    batch = decode_neural_gaussians(model, cam, time_index=0)
    m = batch.cache.blend[0, 0]
    up = GaussianGrads.zeros(batch)
    up.colors = np.ones_like(batch.colors)
    # verified through the sigmoid chain: the static-color head receives
    # (1 - m) * sigmoid' as its upstream
    grads, _ = decode_backward(model, batch, up)
    c_s = batch.cache.c_static[0, 0]
    wg_expected = (1.0 - m) * c_s * (1.0 - c_s)
    # the last-layer bias grad of the static head equals the upstream it
    # received, i.e. (1 - m) through the sigmoid chain
    np.testing.assert_allclose(
        grads["heads.static_color.b2"].reshape(1, 3), wg_expected[None, :], rtol=1e-9
    )


def test_decode_backward_requires_cache():
    model = make_model(seed=1)
    batch = decode_neural_gaussians(model, make_camera(), time_index=0)
    batch.cache = None
    with pytest.raises(StateError):
        decode_backward(model, batch, GaussianGrads.zeros(batch))


def test_positional_mode_geometry_matches_embedding_mode():
    em = make_model(seed=9, encoder_mode="embedding")
    pe = SceneModel(
        anchors=em.anchors,
        heads=em.heads,
        embeddings=em.embeddings,
        scene_extent=em.scene_extent,
        encoder_mode="positional",
    )
    cam = make_camera()
    b1 = decode_neural_gaussians(em, cam, time_index=0)
    b2 = decode_neural_gaussians(pe, cam, time_index=0)
    np.testing.assert_array_equal(b1.means, b2.means)
    np.testing.assert_array_equal(b1.scales, b2.scales)
    np.testing.assert_array_equal(b1.rotations, b2.rotations)
