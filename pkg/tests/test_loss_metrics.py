import numpy as np
import pytest

from timesplat.errors import ShapeError
from timesplat.loss_metrics import (
    PSNR_CAP,
    SSIM_C1,
    SSIM_C2,
    LossWeights,
    l1_loss,
    psnr,
    ssim,
    total_loss,
    volume_regularizer,
)

from helpers import central_diff, rel_err


# --- L1 ------------------------------------------------------------------------


def test_l1_identical():
    img = np.random.default_rng(0).uniform(0, 1, (6, 6, 3))
    val, grad = l1_loss(img, img)
    assert val == 0.0
    assert np.all(grad == 0.0)


def test_l1_uniform_offset():
    gt = np.zeros((4, 4, 3))
    pred = gt + 0.5
    val, grad = l1_loss(pred, gt)
    assert val == pytest.approx(0.5)
    np.testing.assert_allclose(grad, 1.0 / 48)


def test_l1_shape_mismatch():
    with pytest.raises(ShapeError):
        l1_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_l1_grad_finite_differences():
    rng = np.random.default_rng(1)
    pred = rng.uniform(0, 1, (4, 4, 3))
    gt = rng.uniform(0, 1, (4, 4, 3))
    _, grad = l1_loss(pred, gt)
    fd = central_diff(lambda x: l1_loss(x, gt)[0], pred.copy(), eps=1e-7)
    assert rel_err(grad, fd) < 1e-6


# --- SSIM ----------------------------------------------------------------------


def test_ssim_identical_images():
    img = np.random.default_rng(2).uniform(0, 1, (16, 16, 3))
    val, _ = ssim(img, img)
    assert val == pytest.approx(1.0, abs=1e-12)


def test_ssim_uniform_extremes():
    # mu1=0, mu2=1, all variances 0:
    # SSIM = C1*C2 / ((1+C1)*C2), from the formula with uniform statistics
    pred = np.zeros((16, 16, 3))
    gt = np.ones((16, 16, 3))
    val, _ = ssim(pred, gt)
    expected = SSIM_C1 * SSIM_C2 / ((1.0 + SSIM_C1) * SSIM_C2)
    assert val == pytest.approx(expected, rel=1e-9)


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(3)
    for _ in range(5):
        a = rng.uniform(0, 1, (14, 18, 3))
        b = rng.uniform(0, 1, (14, 18, 3))
        va, _ = ssim(a, b)
        vb, _ = ssim(b, a)
        assert va == pytest.approx(vb, abs=1e-9)
        assert -1.0 <= va <= 1.0


def test_ssim_too_small():
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_ssim_grad_finite_differences():
    rng = np.random.default_rng(4)
    pred = rng.uniform(0.2, 0.8, (16, 16, 3))
    gt = np.clip(pred + rng.normal(0, 0.1, pred.shape), 0, 1)
    _, grad = ssim(pred, gt)
    fd = central_diff(lambda x: ssim(x, gt)[0], pred.copy(), eps=1e-6)
    assert rel_err(grad, fd) < 1e-4


# --- volume regularizer -----------------------------------------------------------


def test_volume_single():
    val, grad = volume_regularizer(np.array([[1.0, 2.0, 3.0]]))
    assert val == pytest.approx(6.0)
    np.testing.assert_allclose(grad, [[6.0, 3.0, 2.0]])


def test_volume_ones():
    scales = np.ones((7, 3))
    val, grad = volume_regularizer(scales)
    assert val == pytest.approx(7.0)
    np.testing.assert_allclose(grad, np.ones((7, 3)))


def test_volume_grad_finite_differences():
    rng = np.random.default_rng(5)
    scales = rng.uniform(0.1, 2.0, (9, 3))
    _, grad = volume_regularizer(scales)
    fd = central_diff(lambda x: volume_regularizer(x)[0], scales.copy(), eps=1e-6)
    assert rel_err(grad, fd) < 1e-8


def test_volume_empty():
    val, grad = volume_regularizer(np.zeros((0, 3)))
    assert val == 0.0
    assert grad.shape == (0, 3)


# --- total loss --------------------------------------------------------------------


def test_total_loss_identical_images():
    rng = np.random.default_rng(6)
    img = rng.uniform(0, 1, (16, 16, 3))
    scales = rng.uniform(0.1, 1.0, (5, 3))
    weights = LossWeights(lambda_ssim=0.2, lambda_vol=0.01)
    rep = total_loss(img, img, scales, weights)
    vol, _ = volume_regularizer(scales)
    assert rep.total == pytest.approx(0.01 * vol, rel=1e-9)
    assert rep.l1 == 0.0
    assert rep.ssim_term == pytest.approx(0.0, abs=1e-12)


def test_total_loss_reduces_to_l1():
    rng = np.random.default_rng(7)
    pred = rng.uniform(0, 1, (16, 16, 3))
    gt = rng.uniform(0, 1, (16, 16, 3))
    rep = total_loss(pred, gt, np.ones((2, 3)), LossWeights(0.0, 0.0))
    assert rep.total == pytest.approx(rep.l1)
    np.testing.assert_allclose(rep.image_grad, l1_loss(pred, gt)[1])


def test_total_loss_linearity_and_identity():
    rng = np.random.default_rng(8)
    pred = rng.uniform(0, 1, (16, 16, 3))
    gt = rng.uniform(0, 1, (16, 16, 3))
    scales = rng.uniform(0.1, 1.0, (4, 3))
    r1 = total_loss(pred, gt, scales, LossWeights(0.2, 0.01))
    r2 = total_loss(pred, gt, scales, LossWeights(0.2, 0.02))
    assert r2.total - r2.l1 - 0.2 * r2.ssim_term == pytest.approx(
        2 * (r1.total - r1.l1 - 0.2 * r1.ssim_term), rel=1e-9
    )
    # decomposition identity
    assert r1.total == pytest.approx(r1.l1 + 0.2 * r1.ssim_term + 0.01 * r1.vol, abs=1e-9)


def test_total_loss_image_grad_finite_differences():
    rng = np.random.default_rng(9)
    pred = rng.uniform(0.2, 0.8, (16, 16, 3))
    gt = rng.uniform(0.2, 0.8, (16, 16, 3))
    scales = rng.uniform(0.1, 1.0, (3, 3))
    weights = LossWeights(0.2, 0.01)
    rep = total_loss(pred, gt, scales, weights)
    fd = central_diff(lambda x: total_loss(x, gt, scales, weights).total, pred.copy(), eps=1e-6)
    assert rel_err(rep.image_grad, fd) < 1e-4


# --- PSNR ----------------------------------------------------------------------------


def test_psnr_identical():
    img = np.random.default_rng(10).uniform(0, 1, (8, 8, 3))
    assert psnr(img, img) == PSNR_CAP


def test_psnr_uniform_error():
    gt = np.zeros((8, 8, 3))
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0)


def test_psnr_worst_case():
    assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == pytest.approx(0.0)
