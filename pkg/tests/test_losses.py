import numpy as np
import pytest

from skinsplat import LossWeights, loss_l1, loss_ssim, metric_psnr, ssim_value, total_loss


def rand_img(seed, shape=(16, 16, 3)):
    return np.random.default_rng(seed).uniform(0.05, 0.95, size=shape)


# -- L1 -------------------------------------------------------------------------


def test_l1_identical_zero():
    img = rand_img(0)
    v, g = loss_l1(img, img)
    assert v == 0.0
    assert np.allclose(g, 0)


def test_l1_constant_offset():
    img = rand_img(1) * 0.4
    v, _ = loss_l1(img + 0.5, img)
    assert abs(v - 0.5) <= 1e-12


def test_l1_gradient_matches_fd():
    pred, gt = rand_img(2), rand_img(3)
    v, g = loss_l1(pred, gt)
    rng = np.random.default_rng(4)
    h = 1e-5
    for _ in range(30):
        i = tuple(rng.integers(s) for s in pred.shape)
        orig = pred[i]
        # Stay away from the |.| kink.
        if abs(orig - gt[i]) < 1e-3:
            continue
        pred[i] = orig + h
        up, _ = loss_l1(pred, gt)
        pred[i] = orig - h
        down, _ = loss_l1(pred, gt)
        pred[i] = orig
        fd = (up - down) / (2 * h)
        assert abs(fd - g[i]) <= 1e-4


def test_l1_shape_mismatch():
    with pytest.raises(ValueError):
        loss_l1(np.zeros((4, 4)), np.zeros((5, 4)))


# -- SSIM -----------------------------------------------------------------------


def test_ssim_self_is_zero():
    img = rand_img(5)
    v, g = loss_ssim(img, img)
    assert abs(v) <= 1e-12
    assert np.abs(g).max() <= 1e-9


def test_ssim_constant_images_closed_form():
    c, delta = 0.4, 0.1
    a = np.full((16, 16), c)
    b = np.full((16, 16), c + delta)
    v, _ = loss_ssim(a, b)
    # Constant patches: mu_x = c, mu_y = c + delta, sigmas = 0.
    c1, c2 = 0.01**2, 0.03**2
    s = (2 * c * (c + delta) + c1) * c2 / ((c**2 + (c + delta) ** 2 + c1) * c2)
    assert abs(v - (1.0 - s)) <= 1e-9


def test_ssim_symmetry():
    a, b = rand_img(6), rand_img(7)
    va, _ = loss_ssim(a, b)
    vb, _ = loss_ssim(b, a)
    assert abs(va - vb) <= 1e-9


def test_ssim_gradient_matches_fd():
    pred, gt = rand_img(8), rand_img(9)
    v, g = loss_ssim(pred, gt)
    rng = np.random.default_rng(10)
    h = 1e-5
    for _ in range(25):
        i = tuple(rng.integers(s) for s in pred.shape)
        orig = pred[i]
        pred[i] = orig + h
        up, _ = loss_ssim(pred, gt)
        pred[i] = orig - h
        down, _ = loss_ssim(pred, gt)
        pred[i] = orig
        fd = (up - down) / (2 * h)
        assert abs(fd - g[i]) <= 1e-6 + 1e-3 * abs(fd), f"at {i}: fd={fd} got={g[i]}"


def test_ssim_small_image_errors():
    with pytest.raises(ValueError):
        loss_ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# -- total loss -------------------------------------------------------------------


def test_total_identical_images_zero():
    img = rand_img(11)
    v, g, parts = total_loss(img, img, LossWeights(0.6, 0.4, 0.4))
    assert v == 0.0
    assert parts["l1"] == 0.0 and parts["ssim"] == 0.0


def test_total_hook_contributes_weighted_constant():
    img = rand_img(12)

    def hook(pred, gt):
        return 1.0, np.zeros_like(pred)

    v, _, parts = total_loss(img, img, LossWeights(0.6, 0.4, 0.4), perceptual_hook=hook)
    assert abs(v - 0.4) <= 1e-12
    assert parts["lpips"] == 1.0


def test_total_linear_in_weights():
    pred, gt = rand_img(13), rand_img(14)
    v1, g1, _ = total_loss(pred, gt, LossWeights(0.6, 0.4, 0.0))
    v2, g2, _ = total_loss(pred, gt, LossWeights(1.2, 0.8, 0.0))
    assert abs(v2 - 2 * v1) <= 1e-12
    assert np.allclose(g2, 2 * g1)
    v3, _, _ = total_loss(pred, gt, LossWeights(0.0, 0.0, 0.0))
    assert v3 == 0.0


def test_total_gradient_combines_terms():
    pred, gt = rand_img(15), rand_img(16)
    _, g_total, _ = total_loss(pred, gt, LossWeights(0.6, 0.4, 0.0))
    _, g_l1 = loss_l1(pred, gt)
    _, g_ssim = loss_ssim(pred, gt)
    assert np.allclose(g_total, 0.6 * g_l1 + 0.4 * g_ssim)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.4, 0.4)


# -- PSNR -----------------------------------------------------------------------


def test_psnr_identical_hits_cap():
    img = rand_img(17)
    assert metric_psnr(img, img) == 100.0
    assert metric_psnr(img, img, cap=55.0) == 55.0


def test_psnr_uniform_error_closed_form():
    img = rand_img(18) * 0.5
    assert abs(metric_psnr(img + 0.1, img) - 20.0) <= 1e-9


def test_psnr_monotone_in_noise():
    img = rand_img(19)
    rng = np.random.default_rng(20)
    noise = rng.normal(size=img.shape)
    values = [metric_psnr(np.clip(img + amp * noise, 0, 1), img) for amp in (0.01, 0.05, 0.2)]
    assert values[0] > values[1] > values[2]


def test_ssim_value_metric():
    img = rand_img(21)
    assert abs(ssim_value(img, img) - 1.0) <= 1e-12
