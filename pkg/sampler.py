"""
Sampler policy for SeqSample.

A policy network scores every k-space index, the scores become a heatmap
whose mean matches the per-step budget, already-acquired indices are
zeroed, and the heatmap is binarized by thresholding uniform noise. The
hard draw is repeated until it contains exactly the step budget; gradients
pass through a sigmoid surrogate of the threshold (straight-through).
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

import autodiff as ad
from errors import BudgetError, ShapeError
from forward_model import LINE, POINT, realize_mask
from networks import MLP, UNet

logger = logging.getLogger(__name__)

DEFAULT_SLOPE = 5.0
MAX_REJECTIONS = 200
LINE_HIDDEN = 256
LINE_LAYERS = 5
POINT_WIDTHS = (16, 32, 64, 128)
SCALE_FLOOR = 1e-8


@dataclass
class PolicyInput:
    """Arguments of one policy call: measured k-space, k-space of the current reconstruction, current mask."""

    y_hat: ad.Node
    y_tilde: ad.Node
    mask: ad.Node
    mode: str

    def __post_init__(self):
        if self.y_hat.shape != self.y_tilde.shape:
            raise ShapeError(f"y_hat {self.y_hat.shape} vs y_tilde {self.y_tilde.shape}")
        extent = self.y_hat.shape[-1]
        expected = extent if self.mode == LINE else extent * extent
        if self.mask.shape != (self.y_hat.shape[0], expected):
            raise ShapeError(f"{self.mode} mask {self.mask.shape} does not fit grid {self.y_hat.shape}")

    @property
    def extent(self) -> int:
        return self.y_hat.shape[-1]


@dataclass
class StepDraw:
    """Record of one binarization: the accepted noise, new indices and retry statistics per image."""

    noise: np.ndarray
    delta: np.ndarray
    retries: List[int] = field(default_factory=list)
    fallback: List[bool] = field(default_factory=list)


def kspace_scale(y_hat: ad.Node) -> ad.Node:
    """Per-image 99th percentile magnitude of a (B, 2, H, W) grid, shaped (B, 1)."""
    mag = ad.reshape(ad.magnitude(y_hat), (y_hat.shape[0], -1))
    scale = ad.percentile(mag, 99.0)
    scale = scale + (scale.value < SCALE_FLOOR) * SCALE_FLOOR
    return ad.reshape(scale, (-1, 1))


class LinePolicy:
    """Five-layer MLP over column-pooled k-space features."""

    mode = LINE

    def __init__(self, extent: int, rng: np.random.Generator, hidden: int = LINE_HIDDEN,
                 layers: int = LINE_LAYERS, dtype=np.float32):
        sizes = [3 * extent] + [hidden] * (layers - 1) + [extent]
        self.extent = extent
        self.mlp = MLP("sampler.mlp", sizes, rng, dtype)
        self.params = self.mlp.params

    def __call__(self, inp: PolicyInput) -> ad.Node:
        return line_policy_forward(inp, self)


class PointPolicy:
    """Eight-block UNet over (Re y_hat, Im y_hat, Re y_tilde, Im y_tilde, M)."""

    mode = POINT

    def __init__(self, extent: int, rng: np.random.Generator, widths: Sequence[int] = POINT_WIDTHS,
                 dtype=np.float32):
        self.extent = extent
        self.unet = UNet("sampler.unet", 5, 1, widths, rng, dtype)
        self.params = self.unet.params

    def __call__(self, inp: PolicyInput) -> ad.Node:
        return point_policy_forward(inp, self)


class StaticPolicy:
    """
    Free learnable score vector: the same heatmap for every input and step.

    Trained through the identical normalize / binarize path, it gives the
    static learned-mask baseline.
    """

    def __init__(self, mode: str, extent: int, rng: np.random.Generator, dtype=np.float32):
        self.mode = mode
        self.extent = extent
        size = extent if mode == LINE else extent * extent
        self.params = ad.Params()
        self.scores = self.params.add("sampler.scores", rng.uniform(-0.01, 0.01, size=size).astype(dtype))

    def __call__(self, inp: PolicyInput) -> ad.Node:
        batch = inp.y_hat.shape[0]
        return ad.reshape(self.scores, (1, -1)) + np.zeros((batch, self.scores.shape[0]), dtype=self.scores.dtype)


class NoiseInputPolicy:
    """Wraps a policy so its k-space inputs are fixed-seed noise instead of measurements."""

    def __init__(self, policy, seed: int):
        self.policy = policy
        self.seed = seed
        self.mode = policy.mode
        self.extent = policy.extent
        self.params = policy.params

    def _noise(self, like: ad.Node, stream: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, stream])
        single = rng.standard_normal((1,) + like.shape[1:]).astype(like.dtype)
        return np.broadcast_to(single, like.shape).copy()

    def __call__(self, inp: PolicyInput) -> ad.Node:
        noisy = PolicyInput(
            y_hat=ad.Node(self._noise(inp.y_hat, 0)),
            y_tilde=ad.Node(self._noise(inp.y_tilde, 1)),
            mask=inp.mask,
            mode=inp.mode,
        )
        return self.policy(noisy)


def line_features(inp: PolicyInput) -> ad.Node:
    """log1p of per-column mean magnitudes of y_hat and y_tilde, plus the line mask: (B, 3N)."""
    scale = kspace_scale(inp.y_hat)
    measured = ad.mean(ad.magnitude(inp.y_hat), axis=-2)
    predicted = ad.mean(ad.magnitude(inp.y_tilde), axis=-2)
    return ad.concat([ad.log1p(measured / scale), ad.log1p(predicted / scale), inp.mask], axis=-1)


def line_policy_forward(inp: PolicyInput, policy: LinePolicy) -> ad.Node:
    """
    Raw scores over the N lines.

    Raises:
        ShapeError: If the input is not a line-mode grid of the policy's extent
    """
    if inp.mode != LINE or inp.extent != policy.extent:
        raise ShapeError(f"line policy for extent {policy.extent} got {inp.mode} input of extent {inp.extent}")
    return policy.mlp(line_features(inp))


def point_policy_forward(inp: PolicyInput, policy: PointPolicy) -> ad.Node:
    """
    Raw scores over the M*N points, flattened to (B, K).

    Raises:
        ShapeError: If the input is not a point-mode grid of the policy's extent
    """
    if inp.mode != POINT or inp.extent != policy.extent:
        raise ShapeError(f"point policy for extent {policy.extent} got {inp.mode} input of extent {inp.extent}")
    scale = ad.reshape(kspace_scale(inp.y_hat), (-1, 1, 1, 1))
    mask_plane = realize_mask(inp.mask, POINT, inp.extent)
    stacked = ad.concat([inp.y_hat / scale, inp.y_tilde / scale, mask_plane], axis=1)
    scores = policy.unet(stacked)
    return ad.reshape(scores, (scores.shape[0], -1))


def normalize_heatmap(raw: ad.Node, target_mean: Union[float, np.ndarray],
                      support: Optional[np.ndarray] = None) -> ad.Node:
    """
    Map raw scores to probabilities in [0, 1] with an exact mean.

    p = softplus(raw) / max(softplus(raw)); then, with m the mean of p over
    ``support`` (all indices by default), p <- p * t / m when m >= t, else
    p <- 1 - (1 - p) * (1 - t) / (1 - m). Both maps are monotone.

    Args:
        raw: (K,) or (B, K) scores
        target_mean: t in (0, 1], scalar or one value per row
        support: Optional 0/1 array marking the indices the mean is taken over

    Raises:
        ValueError: If a target mean lies outside (0, 1] or a support row is empty
    """
    unbatched = raw.ndim == 1
    if unbatched:
        raw = ad.reshape(raw, (1, -1))
    batch, size = raw.shape
    target = np.broadcast_to(np.asarray(target_mean, dtype=raw.dtype).reshape(-1, 1), (batch, 1))
    if np.any(target <= 0) or np.any(target > 1):
        raise ValueError(f"target mean must lie in (0, 1], got {np.unique(target)}")
    support = np.ones((batch, size), dtype=raw.dtype) if support is None else \
        np.broadcast_to(np.asarray(support, dtype=raw.dtype).reshape(-1, size), (batch, size))
    count = support.sum(axis=-1, keepdims=True)
    if np.any(count < 1):
        raise ValueError("normalize_heatmap: empty support")

    p = ad.softplus(raw)
    # softplus can underflow to zero everywhere on very negative rows; those rows become uniform
    dead = (p.value.max(axis=-1, keepdims=True) <= 0).astype(raw.dtype)
    if np.any(dead):
        p = p + dead
    p = p / ad.max(p, axis=-1)
    m = ad.sum(p * support, axis=-1, keepdims=True) * (1.0 / count)
    above = (m.value >= target).astype(raw.dtype)
    shrunk = p * (target / (m + (1.0 - above)))
    lifted = 1.0 - (1.0 - p) * ((1.0 - target) / ((1.0 - m) + above))
    out = above * shrunk + (1.0 - above) * lifted
    return ad.reshape(out, (size,)) if unbatched else out


def mask_acquired(p: ad.Node, m_prev: ad.Operand) -> ad.Node:
    """P' = P * (1 - M_prev): no probability mass on already-acquired indices."""
    m_prev = ad.as_node(m_prev, p.dtype)
    if m_prev.shape != p.shape:
        raise ShapeError(f"heatmap {p.shape} vs mask {m_prev.shape}")
    return p * (1.0 - m_prev)


def _top_s(prob: np.ndarray, free: np.ndarray, budget: int, rng: np.random.Generator) -> np.ndarray:
    ties = rng.random(prob.shape[0])
    order = np.lexsort((ties, -prob))
    chosen = order[free[order]][:budget]
    draw = np.zeros(prob.shape[0], dtype=bool)
    draw[chosen] = True
    return draw


def binarize(p_prime: ad.Node, m_prev: ad.Node, budget: int, rng: np.random.Generator,
             slope: float = DEFAULT_SLOPE, max_rejections: int = MAX_REJECTIONS,
             relaxed: bool = False) -> Tuple[ad.Node, StepDraw]:
    """
    Draw exactly ``budget`` new indices per row and add them to the mask.

    Uniform noise U is redrawn until 1[U < P'] (restricted to un-acquired
    indices) has exactly ``budget`` entries; after ``max_rejections`` attempts
    the top-``budget`` un-acquired indices of P' are taken with random
    tie-breaking. The backward pass sees sigmoid(slope * (P' - U)). With
    ``relaxed`` a single U is drawn and the forward value is that sigmoid
    too (gradient checks only).

    Returns:
        (M_t node of shape (B, K), StepDraw)

    Raises:
        BudgetError: If a row has fewer than ``budget`` un-acquired indices
    """
    if budget < 1:
        raise BudgetError(f"step budget {budget} must be at least 1")
    if p_prime.shape != m_prev.shape or p_prime.ndim != 2:
        raise ShapeError(f"binarize: heatmap {p_prime.shape} vs mask {m_prev.shape}")
    prob = p_prime.value
    free = m_prev.value < 0.5
    noise = np.empty_like(prob)
    hard = np.zeros_like(prob)
    draw_record = StepDraw(noise=noise, delta=hard)
    for row in range(prob.shape[0]):
        available = int(free[row].sum())
        if available < budget:
            raise BudgetError(f"only {available} un-acquired indices left for a step budget of {budget}")
        if relaxed:
            # one draw, so the noise never depends on P'
            noise[row] = rng.random(prob.shape[1])
            hard[row] = (noise[row] < prob[row]) & free[row]
            draw_record.retries.append(1)
            draw_record.fallback.append(False)
            continue
        for attempt in range(1, max_rejections + 1):
            u = rng.random(prob.shape[1])
            draw = (u < prob[row]) & free[row]
            if int(draw.sum()) == budget:
                draw_record.fallback.append(False)
                break
        else:
            draw = _top_s(prob[row], free[row], budget, rng)
            draw_record.fallback.append(True)
        draw_record.retries.append(attempt)
        noise[row] = u
        hard[row] = draw

    fallbacks = sum(draw_record.fallback)
    if fallbacks:
        logger.warning(f"binarize: no exact draw after {max_rejections} attempts for {fallbacks} of "
                       f"{prob.shape[0]} rows, took the top-{budget} entries")

    free_mask = free.astype(prob.dtype)
    soft = ad.sigmoid(slope * (p_prime - noise)) * free_mask
    delta = soft if relaxed else ad.straight_through(hard, soft)
    return m_prev + delta, draw_record


def sample_step(policy, inp: PolicyInput, m_prev: ad.Node, budget: int, rng: np.random.Generator,
                slope: float = DEFAULT_SLOPE, max_rejections: int = MAX_REJECTIONS,
                relaxed: bool = False) -> Tuple[ad.Node, ad.Node, StepDraw]:
    """
    One policy step: score, normalize over un-acquired indices to a mean of
    budget / #un-acquired, mask acquired indices, binarize.

    Returns:
        (M_t, heatmap P'_t, StepDraw)
    """
    raw = policy(inp)
    free = (m_prev.value < 0.5).astype(raw.dtype)
    target = budget / free.sum(axis=-1, keepdims=True)
    if np.any(target > 1):
        raise BudgetError(f"step budget {budget} exceeds the un-acquired indices")
    heatmap = mask_acquired(normalize_heatmap(raw, target, support=free), m_prev)
    m_next, draw = binarize(heatmap, m_prev, budget, rng, slope, max_rejections, relaxed)
    return m_next, heatmap, draw
