"""Tests for the UNet reconstructor."""

import numpy as np
import pytest

import autodiff as ad
from errors import ShapeError
from gradient_suite import TOLERANCE, check_reconstructor
from reconstructor import ReconNet, input_scale, reconstruct

TINY = (2, 2, 2, 2)


@pytest.fixture
def net():
    return ReconNet(np.random.default_rng(0), widths=TINY, dtype=np.float64)


def test_output_shape(net, rng):
    out = net(rng.standard_normal((3, 2, 16, 16)))
    assert out.shape == (3, 1, 16, 16)


def test_zero_input_gives_finite_output(net):
    out = net(np.zeros((1, 2, 16, 16)))
    assert np.all(np.isfinite(out.value))


def test_deterministic(net, rng):
    x_hat = rng.standard_normal((1, 2, 32, 32))
    np.testing.assert_array_equal(net(x_hat).value, net(x_hat).value)


def test_not_scale_invariant(net, rng):
    x_hat = rng.standard_normal((1, 2, 16, 16))
    assert np.max(np.abs(net(2.0 * x_hat).value - net(x_hat).value)) > 0


def test_rejects_small_or_single_channel_input(net):
    with pytest.raises(ShapeError):
        reconstruct(np.zeros((1, 2, 8, 8)), net)
    with pytest.raises(ShapeError):
        reconstruct(np.zeros((1, 1, 16, 16)), net)
    with pytest.raises(ShapeError):
        reconstruct(np.zeros((1, 2, 24, 24)), net)


def test_input_scale_is_per_image_percentile(rng):
    grid = rng.standard_normal((2, 2, 16, 16))
    grid[1] *= 10.0
    scale = input_scale(ad.Node(grid)).value.reshape(-1)
    magnitude = np.hypot(grid[:, 0], grid[:, 1]).reshape(2, -1)
    np.testing.assert_allclose(scale, np.percentile(magnitude, 99.0, axis=-1), rtol=1e-10)


def test_ssim_loss_gradient_matches_finite_differences():
    assert check_reconstructor(0) < TOLERANCE


def test_every_parameter_receives_gradient(net, rng):
    x_hat = rng.standard_normal((2, 2, 16, 16))
    gt = rng.uniform(0.1, 1.0, (2, 16, 16))
    with ad.Tape() as tape:
        value = 1.0 - ad.ssim(ad.reshape(net(x_hat), (2, 16, 16)), gt)
    tape.backward(value)
    for name, grad in net.params.grads().items():
        assert np.any(grad != 0), name
