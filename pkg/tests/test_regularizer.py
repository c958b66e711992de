import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import rel_err
from rankuap.regularizer import MiConfig, _adjoint, gradient_energy, image_gradients, mi_grad, mi_loss

L1 = MiConfig(w1=1.0, w2=0.0)
L2 = MiConfig(w1=0.0, w2=1.0)


def loop_penalty(img, w1, w2):
    # direct per-pixel evaluation of the forward differences
    c, h, w = img.shape
    total = 0.0
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                dx = img[ch, i, j + 1] - img[ch, i, j] if j + 1 < w else 0.0
                dy = img[ch, i + 1, j] - img[ch, i, j] if i + 1 < h else 0.0
                total += w1 * (abs(dx) + abs(dy)) + w2 * (dx * dx + dy * dy)
    return total


def test_config_validation():
    with pytest.raises(ValueError):
        MiConfig(w1=-1)
    with pytest.raises(ValueError):
        MiConfig(w1=0, w2=0, lam=1)
    MiConfig(w1=0, w2=0, lam=0)


def test_constant_image():
    img = np.full((3, 4, 5), 42.0)
    assert mi_loss(img, MiConfig(1, 1)) == 0.0
    assert not np.any(mi_grad(img, MiConfig(1, 1)))
    assert gradient_energy(img) == 0.0


def test_two_pixel_example():
    img = np.array([[[0.0, 10.0]]])
    assert mi_loss(img, L1) == 10.0
    assert mi_loss(img, L2) == 100.0


def test_checkerboard_example():
    img = np.array([[[0.0, 10.0], [10.0, 0.0]]])
    assert mi_loss(img, L2) == 400.0


def test_trailing_differences_are_zero():
    dx, dy = image_gradients(np.arange(12.0).reshape(1, 3, 4))
    assert not dx[..., -1].any() and not dy[..., -1, :].any()
    assert np.all(dx[..., :-1] == 1) and np.all(dy[..., :-1, :] == 4)


@settings(max_examples=50, deadline=None)
@given(img=arrays(np.float64, (2, 3, 4), elements=st.floats(0, 255)),
       w1=st.floats(0, 3), w2=st.floats(0, 3))
def test_matches_loop_oracle(img, w1, w2):
    assert mi_loss(img, MiConfig(w1, w2, 0)) == pytest.approx(loop_penalty(img, w1, w2), rel=1e-12, abs=1e-9)


def test_batch_gives_one_value_per_image(rng):
    imgs = rng.uniform(0, 255, (4, 3, 5, 5))
    vals = mi_loss(imgs, L2)
    assert vals.shape == (4,)
    np.testing.assert_allclose(vals, [mi_loss(i, L2) for i in imgs])
    np.testing.assert_allclose(mi_grad(imgs, L2)[2], mi_grad(imgs[2], L2))


@settings(max_examples=50, deadline=None)
@given(img=arrays(np.float64, (3, 4, 4), elements=st.floats(-100, 100)), c=st.floats(-5, 5))
def test_scaling(img, c):
    assert mi_loss(c * img, L1) == pytest.approx(abs(c) * mi_loss(img, L1), rel=1e-9, abs=1e-9)
    assert mi_loss(c * img, L2) == pytest.approx(c * c * mi_loss(img, L2), rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(img=arrays(np.float64, (3, 4, 4), elements=st.floats(0, 255)),
       shift=arrays(np.float64, (3, 1, 1), elements=st.floats(-50, 50)))
def test_per_channel_constant_invariance(img, shift):
    for cfg in (L1, L2):
        assert mi_loss(img + shift, cfg) == pytest.approx(mi_loss(img, cfg), rel=1e-9, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(img=arrays(np.float64, (2, 3, 3), elements=st.floats(0, 255)))
def test_zero_iff_constant_per_channel(img):
    constant = all(np.ptp(ch) == 0 for ch in img)
    assert (mi_loss(img, L2) == 0) == constant


@pytest.mark.parametrize("seed", range(5))
def test_l2_gradient_directional_derivative(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 255, (3, 6, 5))
    v = rng.normal(size=img.shape)
    h = 1e-3
    fd = (mi_loss(img + h * v, L2) - mi_loss(img - h * v, L2)) / (2 * h)
    assert abs(np.sum(mi_grad(img, L2) * v) - fd) <= 1e-4 * abs(fd)


def _coordinate_fd(img, cfg, coords, h=1e-3):
    out = []
    for idx in coords:
        p, m = img.copy(), img.copy()
        p[idx] += h
        m[idx] -= h
        out.append((mi_loss(p, cfg) - mi_loss(m, cfg)) / (2 * h))
    return np.array(out)


def test_l2_gradient_coordinates(rng):
    img = rng.uniform(0, 255, (3, 8, 6))
    flat = rng.choice(img.size, 20, replace=False)
    coords = [np.unravel_index(i, img.shape) for i in flat]
    g = mi_grad(img, L2)
    assert rel_err([g[c] for c in coords], _coordinate_fd(img, L2, coords)) < 1e-4


def test_l1_gradient_at_kink_free_points(rng):
    # continuous random values keep every difference well away from zero
    img = rng.uniform(0, 255, (3, 8, 6))
    flat = rng.choice(img.size, 20, replace=False)
    coords = [np.unravel_index(i, img.shape) for i in flat]
    cfg = MiConfig(w1=1.0, w2=0.5)
    g = mi_grad(img, cfg)
    assert rel_err([g[c] for c in coords], _coordinate_fd(img, cfg, coords)) < 1e-3


def test_l1_sign_of_zero_is_zero():
    img = np.array([[[5.0, 5.0, 9.0]]])
    # the first difference is zero, so only the second contributes
    np.testing.assert_array_equal(mi_grad(img, L1), [[[0.0, -1.0, 1.0]]])


def test_gradient_is_adjoint_of_differences(rng):
    # <D x, y> = <x, D^T y> for the stacked forward-difference operator
    x = rng.normal(size=(2, 5, 4))
    gx, gy = rng.normal(size=x.shape), rng.normal(size=x.shape)
    gx[..., -1] = 0
    gy[..., -1, :] = 0
    dx, dy = image_gradients(x)
    assert np.sum(dx * gx + dy * gy) == pytest.approx(np.sum(x * _adjoint(gx, gy)))


def test_float32_input_keeps_dtype(rng):
    img = rng.uniform(0, 255, (3, 4, 4)).astype(np.float32)
    assert mi_grad(img, L2).dtype == np.float32
    assert mi_grad(img.astype(np.float64), L2).dtype == np.float64
