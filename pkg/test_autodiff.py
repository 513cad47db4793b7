"""Tests for the reverse-mode engine, Params, Adam and checkpoints."""

import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import autodiff as ad
from errors import FormatError, NonFiniteError, ShapeError
from networks import MLP, UNet

finite = st.floats(-100.0, 100.0, allow_nan=False, allow_infinity=False)


def test_no_tape_means_no_recording():
    x = ad.Node(np.ones(3), requires_grad=True)
    y = ad.sum(x * 2.0)
    assert ad.active_tape() is None
    assert y.tape_id is None
    assert y.item() == 6.0


def test_backward_of_square():
    x = ad.Node(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sum(x * x)
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])


def test_backward_broadcasting_unbroadcasts():
    x = ad.Node(np.ones((2, 3)), requires_grad=True)
    b = ad.Node(np.zeros(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sum(x + b)
    tape.backward(y)
    assert b.grad.shape == (3,)
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


def test_backward_needs_scalar():
    x = ad.Node(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError):
        ad.log1p(ad.Node(np.array([-2.0])))
    with pytest.raises(NonFiniteError):
        ad.Node(np.array([1.0])) / 0.0


def test_tape_is_thread_local():
    seen = []
    with ad.Tape():
        worker = threading.Thread(target=lambda: seen.append(ad.active_tape()))
        worker.start()
        worker.join()
    assert seen == [None]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 40)), elements=finite),
       st.floats(0.0, 100.0))
def test_percentile_matches_numpy(values, q):
    got = ad.percentile(ad.Node(values), q).value
    np.testing.assert_allclose(got, np.percentile(values, q, axis=-1), rtol=1e-12, atol=1e-9)


def test_ssim_of_identical_images_is_one(rng):
    x = rng.uniform(0.0, 1.0, (2, 12, 12))
    assert ad.ssim(ad.Node(x), x).item() == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetric_with_fixed_range(rng):
    a = rng.uniform(0.0, 1.0, (16, 16))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0.0, 1.0)
    ab = ad.ssim(ad.Node(a), b, data_range=1.0).item()
    ba = ad.ssim(ad.Node(b), a, data_range=1.0).item()
    assert ab == pytest.approx(ba, abs=1e-12)
    assert -1.0 <= ab < 1.0


def test_ssim_rejects_small_images():
    with pytest.raises(ShapeError):
        ad.ssim(ad.Node(np.ones((5, 5))), np.ones((5, 5)))


def test_fft_round_trip(rng):
    grid = rng.standard_normal((2, 2, 8, 8))
    back = ad.ifft2(ad.fft2(ad.Node(grid))).value
    np.testing.assert_allclose(back, grid, atol=1e-12)


def test_fft_is_unitary(rng):
    x = rng.standard_normal((8, 8))
    y = ad.fft2(ad.complexify(ad.Node(x))).value
    assert np.sum(y ** 2) == pytest.approx(np.sum(x ** 2), rel=1e-12)


def test_seeded_init_is_bit_identical():
    a = MLP("net", [4, 8, 2], np.random.default_rng(3))
    b = MLP("net", [4, 8, 2], np.random.default_rng(3))
    for (name, node), (_, other) in zip(a.params.items(), b.params.items()):
        np.testing.assert_array_equal(node.value, other.value)
        if node.ndim == 2:
            assert np.all(np.abs(node.value) <= np.sqrt(1.0 / node.shape[0]))


def test_unet_parameter_names_are_unique():
    unet = UNet("recon", 2, 1, (2, 2, 2, 2), np.random.default_rng(0))
    assert len(unet.params) == 2 * 8 + 2
    assert "recon.head.bias" in unet.params


def test_checkpoint_round_trip_is_bit_exact():
    net = MLP("net", [3, 5, 2], np.random.default_rng(0))
    state = ad.AdamState(lr=1e-3)
    grads = {name: np.ones(node.shape, dtype=np.float32) for name, node in net.params.items()}
    ad.adam_step(net.params, grads, state)

    params, restored = ad.decode_checkpoint(ad.encode_checkpoint(net.params, state))
    assert list(params) == list(net.params)
    for name, node in net.params.items():
        assert params[name].dtype == np.float32
        np.testing.assert_array_equal(params[name], node.value)
        np.testing.assert_array_equal(restored.m[name], state.m[name])
        np.testing.assert_array_equal(restored.v[name], state.v[name])
    assert restored.step == 1
    assert restored.lr == pytest.approx(1e-3)


@pytest.mark.parametrize("step", [0, 7, 2 ** 24 + 1, 2 ** 40 + 12345])
def test_checkpoint_keeps_large_adam_steps_exact(step):
    net = MLP("net", [2, 2], np.random.default_rng(0))
    _, restored = ad.decode_checkpoint(ad.encode_checkpoint(net.params, ad.AdamState(step=step)))
    assert restored.step == step


def test_checkpoint_without_state():
    net = MLP("net", [2, 2], np.random.default_rng(0))
    params, state = ad.decode_checkpoint(ad.encode_checkpoint(net.params))
    assert state is None
    assert set(params) == set(net.params)


@pytest.mark.parametrize("mangle", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + (99).to_bytes(4, "little") + b[8:],
    lambda b: b[:-3],
    lambda b: b + b"\x00",
])
def test_checkpoint_rejects_malformed_bytes(mangle):
    data = ad.encode_checkpoint(MLP("net", [2, 2], np.random.default_rng(0)).params)
    with pytest.raises(FormatError):
        ad.decode_checkpoint(mangle(data))


def test_restore_checks_names_and_shapes():
    params = MLP("net", [2, 3], np.random.default_rng(0)).params
    snapshot = params.snapshot()
    with pytest.raises(ShapeError):
        params.restore({"other": np.zeros(1)})
    bad = dict(snapshot)
    bad["net.layer0.bias"] = np.zeros(7)
    with pytest.raises(ShapeError):
        params.restore(bad)
    handle = params["net.layer0.weight"]
    params.restore(snapshot)
    assert params["net.layer0.weight"] is handle


def test_first_adam_step_moves_by_learning_rate():
    params = ad.Params()
    node = params.add("w", np.zeros(3))
    ad.adam_step(params, {"w": np.array([2.0, -0.5, 1e-3])}, ad.AdamState(lr=0.1))
    np.testing.assert_allclose(node.value, [-0.1, 0.1, -0.1], atol=1e-4)


def test_adam_rejects_mismatched_gradients():
    params = ad.Params()
    params.add("w", np.zeros(3))
    with pytest.raises(ShapeError):
        ad.adam_step(params, {"v": np.zeros(3)}, ad.AdamState())


def test_grad_check_needs_64_bit_params():
    params = MLP("net", [2, 2], np.random.default_rng(0), dtype=np.float32).params
    with pytest.raises(ValueError):
        ad.grad_check(lambda: ad.sum(params["net.layer0.weight"]), params)


def test_grad_check_catches_a_wrong_gradient():
    def wrong(x):
        # value of x^2 with the gradient of x
        return ad.sum(ad.straight_through(x.value ** 2, x))

    assert ad.grad_check(wrong, [np.array([3.0, -1.5])]) > 1e-2


def test_grad_check_of_composite(rng):
    x = rng.standard_normal((4, 5))
    error = ad.grad_check(lambda x: ad.sum(ad.sigmoid(x) * ad.softplus(x)) / 3.0, [x])
    assert error < 1e-6


def _linear_loop(x, w, b):
    out = np.zeros((x.shape[0], w.shape[1]))
    for n in range(x.shape[0]):
        for j in range(w.shape[1]):
            out[n, j] = b[j]
            for i in range(w.shape[0]):
                out[n, j] += x[n, i] * w[i, j]
    return out


def test_linear_values(rng):
    identity = ad.linear(ad.Node(np.array([1.0, 0.0])), ad.Node(np.eye(2)), ad.Node(np.zeros(2)))
    np.testing.assert_array_equal(identity.value, [1.0, 0.0])
    summed = ad.linear(ad.Node(np.array([2.0, 3.0])), ad.Node(np.array([[1.0], [1.0]])), ad.Node(np.array([-5.0])))
    np.testing.assert_array_equal(summed.value, [0.0])
    x, w, b = rng.standard_normal((2, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)
    got = ad.linear(ad.Node(x), ad.Node(w), ad.Node(b)).value
    np.testing.assert_allclose(got, _linear_loop(x, w, b), rtol=0, atol=1e-12)
    with pytest.raises(ShapeError):
        ad.linear(ad.Node(x), ad.Node(w.T), ad.Node(b))


def _conv_sum(x, kernel, stride, padding):
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    k = kernel.shape[-1]
    out_h = (padded.shape[2] - k) // stride + 1
    out_w = (padded.shape[3] - k) // stride + 1
    out = np.zeros((x.shape[0], kernel.shape[0], out_h, out_w))
    for n in range(x.shape[0]):
        for o in range(kernel.shape[0]):
            for i in range(out_h):
                for j in range(out_w):
                    patch = padded[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, o, i, j] = np.sum(patch * kernel[o])
    return out


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_direct_summation(rng, stride, padding):
    x = rng.standard_normal((1, 2, 6, 6))
    kernel = rng.standard_normal((3, 2, 3, 3))
    got = ad.conv2d(ad.Node(x), ad.Node(kernel), stride=stride, padding=padding).value
    expected = _conv_sum(x, kernel, stride, padding)
    assert got.shape == expected.shape
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)


def test_conv2d_identity_and_box_kernels(rng):
    x = rng.standard_normal((1, 1, 5, 5))
    np.testing.assert_array_equal(ad.conv2d(ad.Node(x), ad.Node(np.ones((1, 1, 1, 1)))).value, x)
    constant = np.full((1, 1, 6, 6), 2.5)
    boxed = ad.conv2d(ad.Node(constant), ad.Node(np.ones((1, 1, 3, 3))), padding=1).value
    np.testing.assert_allclose(boxed[0, 0, 1:-1, 1:-1], 9 * 2.5)
    assert boxed[0, 0, 0, 0] == pytest.approx(4 * 2.5)
    with pytest.raises(ValueError):
        ad.conv2d(ad.Node(x), ad.Node(np.ones((1, 1, 1, 1))), stride=0)


def test_resampling_and_concat(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    up = ad.upsample2x(ad.Node(x))
    assert up.shape == (2, 3, 8, 8)
    np.testing.assert_allclose(ad.avgpool2x(up).value, x, rtol=1e-15, atol=0)
    pooled = ad.avgpool2x(ad.Node(np.full((1, 1, 8, 8), 0.7))).value
    assert pooled.shape == (1, 1, 4, 4)
    np.testing.assert_allclose(pooled, 0.7, rtol=1e-15)
    joined = ad.concat_channels(ad.Node(np.zeros((1, 2, 4, 4))), ad.Node(np.ones((1, 3, 4, 4))))
    assert joined.shape == (1, 5, 4, 4)
    assert joined.value[0, :2].sum() == 0 and joined.value[0, 2:].sum() == 48
    with pytest.raises(ShapeError):
        ad.avgpool2x(ad.Node(np.ones((1, 1, 5, 4))))
    with pytest.raises(ShapeError):
        ad.concat_channels(ad.Node(np.zeros((1, 2, 4, 4))), ad.Node(np.zeros((1, 3, 2, 2))))


def test_activation_values():
    assert ad.softplus(ad.Node(np.array(0.0))).item() == pytest.approx(np.log(2.0), abs=1e-15)
    np.testing.assert_array_equal(ad.relu(ad.Node(np.array([-1.0, 2.0]))).value, [0.0, 2.0])
    assert ad.sigmoid(ad.Node(np.array(0.0))).item() == 0.5
    x = ad.Node(np.array([0.0]), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sum(ad.softplus(x))
    tape.backward(y)
    assert x.grad[0] == pytest.approx(0.5)


def test_instance_norm_statistics(rng):
    x = rng.normal(2.0, 3.0, (2, 3, 8, 8))
    out = ad.instance_norm(ad.Node(x)).value
    assert np.max(np.abs(out.mean(axis=(-2, -1)))) < 1e-7
    assert np.max(np.abs(out.var(axis=(-2, -1)) - 1.0)) < 1e-4
    flat = ad.instance_norm(ad.Node(np.full((1, 1, 8, 8), 2.5))).value
    np.testing.assert_array_equal(flat, np.zeros((1, 1, 8, 8)))


def _ssim_windows(x, y, window=7, k1=0.01, k2=0.03):
    c1 = (k1 * y.max()) ** 2
    c2 = (k2 * y.max()) ** 2
    scores = []
    for i in range(x.shape[0] - window + 1):
        for j in range(x.shape[1] - window + 1):
            a = x[i:i + window, j:j + window].ravel()
            b = y[i:i + window, j:j + window].ravel()
            mu_a, mu_b = a.mean(), b.mean()
            cov = np.cov(a, b)
            scores.append((2 * mu_a * mu_b + c1) * (2 * cov[0, 1] + c2)
                          / ((mu_a ** 2 + mu_b ** 2 + c1) * (cov[0, 0] + cov[1, 1] + c2)))
    return float(np.mean(scores))


def test_ssim_matches_per_window_formula():
    rng = np.random.default_rng(5)
    for _ in range(50):
        y = rng.uniform(0.0, 1.0, (16, 16))
        x = y + 0.3 * rng.standard_normal((16, 16))
        assert ad.ssim(ad.Node(x), y).item() == pytest.approx(_ssim_windows(x, y), abs=1e-9)
        assert ad.ssim(ad.Node(y), y).item() == 1.0


def test_ssim_of_blank_target_uses_unit_range():
    blank = np.zeros((8, 8))
    assert ad.ssim(ad.Node(blank), blank).item() == 1.0
    shifted = ad.ssim(ad.Node(blank + 0.5), blank).item()
    assert shifted == pytest.approx(ad.ssim(ad.Node(blank + 0.5), blank, data_range=1.0).item())
    assert -1.0 <= shifted < 1.0
    with pytest.raises(ValueError):
        ad.ssim(ad.Node(blank), blank, data_range=0.0)


def test_adam_zero_gradient_leaves_params():
    params = ad.Params()
    node = params.add("w", np.array([1.0, -2.0, 0.5]))
    for _ in range(3):
        ad.adam_step(params, {"w": np.zeros(3)}, ad.AdamState(lr=0.1))
    np.testing.assert_array_equal(node.value, [1.0, -2.0, 0.5])


def test_adam_converges_on_a_quadratic():
    params = ad.Params()
    node = params.add("p", np.zeros(1))
    state = ad.AdamState(lr=0.1)
    for _ in range(200):
        ad.adam_step(params, {"p": 2.0 * (node.value - 3.0)}, state)
    assert state.step == 200
    assert abs(node.value[0] - 3.0) < 0.05
