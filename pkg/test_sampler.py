"""Tests for heatmap normalization, binarization and the policy networks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

import autodiff as ad
from errors import BudgetError, ShapeError
from forward_model import LINE, POINT, AccelSpec, apply_mask, low_freq_mask, to_kspace
from pipeline import SequentialModel, loss
from reconstructor import ReconNet
from sampler import (LinePolicy, NoiseInputPolicy, PointPolicy, PolicyInput, StaticPolicy, binarize,
                     mask_acquired, normalize_heatmap, sample_step)

TINY = (2, 2, 2, 2)
scores = arrays(np.float64, st.integers(2, 64), elements=st.floats(-20.0, 20.0))


@settings(max_examples=100, deadline=None)
@given(scores, st.floats(0.01, 0.99))
def test_heatmap_has_exact_mean_and_range(raw, target):
    p = normalize_heatmap(ad.Node(raw), target).value
    assert p.mean() == pytest.approx(target, abs=1e-6)
    assert p.min() >= 0.0
    assert p.max() <= 1.0


def test_heatmap_mean_over_support():
    raw = np.random.default_rng(1).standard_normal((3, 40))
    support = np.ones((3, 40))
    support[:, :10] = 0.0
    target = np.array([0.1, 0.5, 0.9])
    p = normalize_heatmap(ad.Node(raw), target, support).value
    np.testing.assert_allclose(p[:, 10:].mean(axis=-1), target, atol=1e-6)


def test_constant_scores_give_uniform_heatmap():
    p = normalize_heatmap(ad.Node(np.full(10, 0.3)), 0.2).value
    np.testing.assert_allclose(p, 0.2, atol=1e-12)
    dead = normalize_heatmap(ad.Node(np.full(10, -1e4)), 0.2).value
    np.testing.assert_allclose(dead, 0.2, atol=1e-12)


def test_heatmap_preserves_score_order():
    rng = np.random.default_rng(2)
    raw = rng.standard_normal((1000, 32))
    targets = rng.uniform(0.02, 0.98, size=1000)
    p = normalize_heatmap(ad.Node(raw), targets).value
    order = np.argsort(raw, axis=-1)
    assert np.all(np.diff(np.take_along_axis(p, order, axis=-1), axis=-1) >= 0)


def test_heatmap_rejects_bad_target():
    with pytest.raises(ValueError):
        normalize_heatmap(ad.Node(np.zeros(4)), 0.0)
    with pytest.raises(ValueError):
        normalize_heatmap(ad.Node(np.zeros(4)), 1.5)


def test_mask_acquired():
    p = ad.Node(np.linspace(0.1, 0.9, 6).reshape(1, 6))
    np.testing.assert_array_equal(mask_acquired(p, np.zeros((1, 6))).value, p.value)
    np.testing.assert_array_equal(mask_acquired(p, np.ones((1, 6))).value, np.zeros((1, 6)))
    prev = np.array([[1, 0, 1, 0, 0, 1]], dtype=float)
    assert np.all(mask_acquired(p, prev).value * prev == 0)
    with pytest.raises(ShapeError):
        mask_acquired(p, np.zeros((1, 5)))


def test_certain_entries_are_selected():
    p = np.zeros((1, 10))
    p[0, [1, 4, 7]] = 1.0
    m, draw = binarize(ad.Node(p), ad.Node(np.zeros((1, 10))), 3, np.random.default_rng(0))
    np.testing.assert_array_equal(m.value, p)
    assert draw.retries == [1]
    assert draw.fallback == [False]


def test_budget_is_exact_over_many_draws():
    rng = np.random.default_rng(3)
    rows, size, budget = 10_000, 32, 4
    prev = np.zeros((rows, size))
    prev[:, 14:18] = 1.0
    free = 1.0 - prev
    raw = rng.standard_normal((rows, size))
    p = mask_acquired(normalize_heatmap(ad.Node(raw), budget / free.sum(axis=-1), free), prev)
    m, draw = binarize(p, ad.Node(prev), budget, rng)
    delta = m.value - prev
    assert set(np.unique(m.value)) <= {0.0, 1.0}
    assert np.all(delta >= 0)
    assert np.all(delta.sum(axis=-1) == budget)
    assert np.all(delta * prev == 0)
    assert len(draw.retries) == rows


def test_inclusion_frequency_follows_heatmap():
    rng = np.random.default_rng(4)
    rows, size, budget = 50_000, 16, 4
    p_row = np.linspace(0.02, 0.48, size)
    p = np.broadcast_to(p_row, (rows, size)).copy()
    m, _ = binarize(ad.Node(p), ad.Node(np.zeros((rows, size))), budget, rng)
    frequency = m.value.mean(axis=0)
    rho, _ = stats.spearmanr(frequency, p_row)
    assert rho > 0.95


def test_fallback_takes_top_entries():
    p = np.zeros((1, 8))
    p[0, 5] = 1e-300
    m, draw = binarize(ad.Node(p), ad.Node(np.zeros((1, 8))), 2, np.random.default_rng(0), max_rejections=5)
    assert m.value.sum() == 2
    assert m.value[0, 5] == 1.0
    assert draw.fallback == [True]
    assert draw.retries == [5]


def test_binarize_budget_infeasible():
    prev = np.ones((1, 8))
    prev[0, 0] = 0.0
    with pytest.raises(BudgetError):
        binarize(ad.Node(np.full((1, 8), 0.5)), ad.Node(prev), 2, np.random.default_rng(0))


def test_new_seed_changes_draw_not_budget():
    p = ad.Node(np.full((1, 64), 0.125))
    prev = ad.Node(np.zeros((1, 64)))
    a, _ = binarize(p, prev, 8, np.random.default_rng(0))
    b, _ = binarize(p, prev, 8, np.random.default_rng(1))
    assert a.value.sum() == b.value.sum() == 8
    assert not np.array_equal(a.value, b.value)


def test_surrogate_gradient_only_on_free_indices():
    rng = np.random.default_rng(5)
    prev = np.zeros((2, 12))
    prev[:, :4] = 1.0
    p = ad.Node(mask_acquired(ad.Node(rng.uniform(0.1, 0.6, (2, 12))), prev).value, requires_grad=True)
    weights = rng.standard_normal((2, 12))
    with ad.Tape() as tape:
        m, _ = binarize(p, ad.Node(prev), 3, rng)
        out = ad.sum(m * weights)
    tape.backward(out)
    assert np.all(p.grad[:, :4] == 0)
    assert np.all(p.grad[:, 4:] != 0)
    assert set(np.unique(m.value)) <= {0.0, 1.0}


def test_relaxed_forward_is_the_sigmoid():
    p = ad.Node(np.full((1, 6), 0.5))
    m, draw = binarize(p, ad.Node(np.zeros((1, 6))), 2, np.random.default_rng(0), slope=5.0, relaxed=True)
    expected = 1.0 / (1.0 + np.exp(-5.0 * (0.5 - draw.noise)))
    np.testing.assert_allclose(m.value, expected, rtol=1e-12)


def _line_input(rng, extent=64, batch=1):
    y = to_kspace(rng.uniform(0.0, 1.0, (batch, extent, extent)))
    mask = np.zeros((batch, extent))
    mask[:, extent // 2 - 1: extent // 2 + 1] = 1.0
    return PolicyInput(apply_mask(y, mask, LINE), y, ad.Node(mask), LINE)


def _point_input(rng, extent=16, batch=1):
    y = to_kspace(rng.uniform(0.0, 1.0, (batch, extent, extent)))
    spec = AccelSpec(4.0, POINT, extent, 2)
    mask = low_freq_mask(spec).batch(batch).values
    return PolicyInput(apply_mask(y, mask, POINT), y, ad.Node(mask), POINT)


def test_line_policy_shape_and_determinism(rng):
    policy = LinePolicy(64, np.random.default_rng(0), hidden=16, dtype=np.float64)
    inp = _line_input(rng)
    first = policy(inp).value
    assert first.shape == (1, 64)
    np.testing.assert_array_equal(policy(inp).value, first)


def test_point_policy_shape_and_determinism(rng):
    policy = PointPolicy(16, np.random.default_rng(0), widths=TINY, dtype=np.float64)
    inp = _point_input(rng, batch=2)
    first = policy(inp).value
    assert first.shape == (2, 256)
    np.testing.assert_array_equal(policy(inp).value, first)


def test_policies_reject_wrong_mode(rng):
    with pytest.raises(ShapeError):
        LinePolicy(16, rng, hidden=8)(_point_input(rng))
    with pytest.raises(ShapeError):
        PointPolicy(16, rng, widths=TINY)(_line_input(rng, extent=16))


def test_policy_input_validates_mask_shape(rng):
    y = to_kspace(rng.uniform(0.0, 1.0, (1, 8, 8)))
    with pytest.raises(ShapeError):
        PolicyInput(y, y, ad.Node(np.zeros((1, 64))), LINE)


def test_sample_step_respects_budget_and_history(rng):
    policy = PointPolicy(16, np.random.default_rng(0), widths=TINY, dtype=np.float64)
    inp = _point_input(rng, batch=2)
    m_next, heatmap, draw = sample_step(policy, inp, inp.mask, 20, np.random.default_rng(1))
    prev = inp.mask.value
    assert np.all(heatmap.value[prev == 1] == 0)
    np.testing.assert_allclose(heatmap.value.sum(axis=-1), 20.0, atol=1e-6)
    np.testing.assert_array_equal((m_next.value - prev).sum(axis=-1), [20, 20])
    assert np.all(m_next.value >= prev)


def test_static_policy_ignores_inputs(rng):
    policy = StaticPolicy(LINE, 16, np.random.default_rng(0))
    a = policy(_line_input(rng, extent=16, batch=3)).value
    assert a.shape == (3, 16)
    np.testing.assert_array_equal(a[0], a[2])


def test_noise_policy_ignores_measurements():
    policy = NoiseInputPolicy(LinePolicy(16, np.random.default_rng(0), hidden=8, dtype=np.float64), seed=11)
    a = policy(_line_input(np.random.default_rng(1), extent=16)).value
    b = policy(_line_input(np.random.default_rng(2), extent=16)).value
    np.testing.assert_array_equal(a, b)


def test_policy_gradient_is_not_dead():
    rng = np.random.default_rng(6)
    policy = PointPolicy(16, rng, widths=TINY, dtype=np.float64)
    recon = ReconNet(rng, widths=TINY, dtype=np.float64)
    model = SequentialModel("sequential", policy, recon, AccelSpec(4.0, POINT, 16, 2))
    x = rng.uniform(0.1, 1.0, (2, 16, 16))
    with ad.Tape() as tape:
        value = loss(model.run_episode(x, np.random.default_rng(0)), x)
    tape.backward(value)
    grads = policy.params.grads()
    assert any(np.any(g != 0) for g in grads.values())
