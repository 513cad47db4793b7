"""
Finite-difference verification of every differentiable operator and of a
full 16x16 acquisition episode, at 64-bit precision over several seeds.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

import autodiff as ad
from forward_model import LINE, POINT, AccelSpec, apply_mask, to_kspace, zero_fill
from networks import UNet
from pipeline import SequentialModel, loss
from reconstructor import ReconNet
from sampler import (LinePolicy, PointPolicy, PolicyInput, StaticPolicy, binarize, mask_acquired,
                     normalize_heatmap)

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
TINY_WIDTHS = (2, 2, 2, 2)
# coordinates sampled per parameter tensor for network-sized checks
NETWORK_COORDS = 6


@dataclass
class CheckResult:
    name: str
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _weights(x: ad.Node, rng_seed: int) -> np.ndarray:
    """Fixed random projection so a tensor-valued op becomes a scalar."""
    return np.random.default_rng(rng_seed + 1000).standard_normal(x.shape)


def _project(out: ad.Node, seed: int) -> ad.Node:
    return ad.sum(out * _weights(out, seed))


def check_linear(seed: int) -> float:
    rng = np.random.default_rng(seed)
    return ad.grad_check(lambda x, w, b: _project(ad.linear(x, w, b), seed),
                         [rng.standard_normal((3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)])


def check_conv2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x, k, b = rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    plain = ad.grad_check(lambda x, k, b: _project(ad.conv2d(x, k, b, padding=1), seed), [x, k, b])
    strided = ad.grad_check(lambda x, k: _project(ad.conv2d(x, k, stride=2, padding=1), seed), [x, k])
    return max(plain, strided)


def check_resampling(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 4, 4))
    up = ad.grad_check(lambda x: _project(ad.upsample2x(x), seed), [x])
    down = ad.grad_check(lambda x: _project(ad.avgpool2x(x), seed), [x])
    cat = ad.grad_check(lambda a, b: _project(ad.concat_channels(a, b), seed),
                        [x, rng.standard_normal((1, 3, 4, 4))])
    return max(up, down, cat)


def check_activations(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(12)
    # keep relu inputs away from the kink
    x_relu = np.where(np.abs(x) < 0.1, 0.5, x)
    return max(
        ad.grad_check(lambda x: _project(ad.relu(x), seed), [x_relu]),
        ad.grad_check(lambda x: _project(ad.softplus(x), seed), [x]),
        ad.grad_check(lambda x: _project(ad.sigmoid(x), seed), [x]),
        ad.grad_check(lambda x: _project(ad.log1p(ad.sqrt(x * x + 1.0)), seed), [x]),
    )


def check_instance_norm(seed: int) -> float:
    x = np.random.default_rng(seed).standard_normal((2, 3, 4, 4))
    return ad.grad_check(lambda x: _project(ad.instance_norm(x), seed), [x])


def check_fourier(seed: int) -> float:
    rng = np.random.default_rng(seed)
    grid = rng.standard_normal((1, 2, 8, 8))
    forward = ad.grad_check(lambda g: _project(ad.fft2(g), seed), [grid])
    inverse = ad.grad_check(lambda g: _project(ad.ifft2(g), seed), [grid])
    spectrum = ad.grad_check(lambda x: ad.sum(ad.magnitude(ad.fft2(ad.complexify(x)))),
                             [rng.standard_normal((8, 8))])
    return max(forward, inverse, spectrum)


def check_ssim(seed: int) -> float:
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.0, 1.0, (2, 12, 12))
    x = np.clip(gt + 0.1 * rng.standard_normal(gt.shape), 0.0, 1.0)
    return ad.grad_check(lambda x: ad.ssim(x, gt), [x])


def check_percentile(seed: int) -> float:
    x = np.random.default_rng(seed).standard_normal((3, 50))
    return ad.grad_check(lambda x: _project(ad.percentile(x, 99.0), seed), [x])


def check_heatmap(seed: int) -> float:
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((2, 20))
    prev = (rng.uniform(size=(2, 20)) < 0.3).astype(np.float64)
    support = 1.0 - prev
    target = 3.0 / support.sum(axis=-1, keepdims=True)
    low = ad.grad_check(lambda r: _project(mask_acquired(normalize_heatmap(r, target, support), prev), seed),
                        [raw])
    # a large target exercises the upward branch
    high = ad.grad_check(lambda r: _project(normalize_heatmap(r, 0.9), seed), [raw])
    return max(low, high)


def check_binarize(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.6, (2, 16))
    prev = np.zeros((2, 16))
    prev[:, :3] = 1.0
    p[:, :3] = 0.0

    def f(p, m):
        m_next, _ = binarize(p, m, 4, np.random.default_rng(seed), relaxed=True)
        return _project(m_next, seed)

    return ad.grad_check(f, [p, prev])


def check_line_policy(seed: int) -> float:
    rng = np.random.default_rng(seed)
    policy = LinePolicy(16, rng, hidden=8, dtype=np.float64)
    y = to_kspace(rng.uniform(0.0, 1.0, (2, 16, 16)))
    mask = np.zeros((2, 16))
    mask[:, 7:9] = 1.0
    y_hat = apply_mask(y, mask, LINE)
    inp = PolicyInput(y_hat, y, ad.Node(mask), LINE)
    return ad.grad_check(lambda: _project(policy(inp), seed), policy.params,
                         max_coords=NETWORK_COORDS, seed=seed)


def check_reconstructor(seed: int) -> float:
    rng = np.random.default_rng(seed)
    net = ReconNet(rng, widths=TINY_WIDTHS, dtype=np.float64)
    gt = rng.uniform(0.1, 1.0, (1, 16, 16))
    x_hat = rng.standard_normal((1, 2, 16, 16))

    def f():
        out = net(x_hat)
        return 1.0 - ad.ssim(ad.reshape(out, (1, 16, 16)), gt)

    return ad.grad_check(f, net.params, max_coords=NETWORK_COORDS, seed=seed)


def check_unet_input(seed: int) -> float:
    rng = np.random.default_rng(seed)
    unet = UNet("check", 2, 1, TINY_WIDTHS, rng, np.float64)
    return ad.grad_check(lambda x: _project(unet(x), seed), [rng.standard_normal((1, 2, 16, 16))],
                         max_coords=24, seed=seed)


def _episode_check(seed: int, policy_factory: Callable, mode: str) -> float:
    rng = np.random.default_rng(seed)
    policy = policy_factory(rng)
    recon = ReconNet(rng, widths=TINY_WIDTHS, dtype=np.float64)
    spec = AccelSpec(4.0 if mode == POINT else 2.0, mode, 16, 2)
    model = SequentialModel("check", policy, recon, spec)
    x = rng.uniform(0.1, 1.0, (1, 16, 16))

    def f():
        trace = model.run_episode(x, np.random.default_rng(seed + 99), relaxed=True)
        return loss(trace, x)

    return ad.grad_check(f, model.params, max_coords=NETWORK_COORDS, seed=seed)


def check_point_episode(seed: int) -> float:
    return _episode_check(seed, lambda rng: PointPolicy(16, rng, widths=TINY_WIDTHS, dtype=np.float64), POINT)


def check_line_episode(seed: int) -> float:
    return _episode_check(seed, lambda rng: LinePolicy(16, rng, hidden=8, dtype=np.float64), LINE)


def check_static_episode(seed: int) -> float:
    return _episode_check(seed, lambda rng: StaticPolicy(POINT, 16, rng, dtype=np.float64), POINT)


def check_zero_fill(seed: int) -> float:
    rng = np.random.default_rng(seed)
    mask = (rng.uniform(size=(1, 64)) < 0.5).astype(np.float64)
    return ad.grad_check(lambda y: _project(zero_fill(apply_mask(y, mask, POINT)), seed),
                         [rng.standard_normal((1, 2, 8, 8))])


CHECKS: Dict[str, Callable[[int], float]] = {
    "linear": check_linear,
    "conv2d": check_conv2d,
    "upsample/avgpool/concat": check_resampling,
    "relu/softplus/sigmoid/sqrt/log1p": check_activations,
    "instance_norm": check_instance_norm,
    "fft2/ifft2/magnitude": check_fourier,
    "apply_mask/zero_fill": check_zero_fill,
    "ssim": check_ssim,
    "percentile": check_percentile,
    "normalize_heatmap/mask_acquired": check_heatmap,
    "binarize (relaxed)": check_binarize,
    "line policy": check_line_policy,
    "unet input": check_unet_input,
    "reconstructor + ssim loss": check_reconstructor,
    "point episode 16x16": check_point_episode,
    "line episode 16x16": check_line_episode,
    "static-mask episode 16x16": check_static_episode,
}


def run_suite(seeds: Sequence[int] = DEFAULT_SEEDS, names: Sequence[str] = ()) -> List[CheckResult]:
    """Run the selected checks (all by default); each result holds the worst error over ``seeds``."""
    unknown = sorted(set(names) - set(CHECKS))
    if unknown:
        raise ValueError(f"unknown gradient checks: {unknown}")
    results = []
    for name, check in CHECKS.items():
        if names and name not in names:
            continue
        start = time.perf_counter()
        worst = max(check(seed) for seed in seeds)
        results.append(CheckResult(name, worst, time.perf_counter() - start))
        logger.info(f"gradcheck {name}: max rel err {worst:.3e}")
    return results
