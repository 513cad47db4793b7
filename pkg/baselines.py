"""
Baseline sampling policies and the model factory.

Fixed-rule masks (random, equispaced, spectrum) train only a reconstructor.
The static learned mask and the non-sequential variant reuse the sequential
code path with a free score vector or noise inputs in place of the policy
network. The co-design-off arm freezes a reconstructor pre-trained on
random masks and trains the sampler alone.
"""

import dataclasses
import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

import autodiff as ad
from errors import BudgetError, ConfigError
from forward_model import LINE, AccelSpec, Mask, low_freq_mask, to_kspace
from phantoms import Dataset
from pipeline import (FixedMaskModel, SequentialModel, TrainConfig, TrainResult, build_sequential_model,
                      train)
from reconstructor import ReconNet
from sampler import LinePolicy, NoiseInputPolicy, PointPolicy, StaticPolicy, mask_acquired, normalize_heatmap

logger = logging.getLogger(__name__)

SEQUENTIAL = "sequential"
NONSEQ = "nonseq"
LOUPE = "loupe"
RANDOM = "random"
EQUISPACED = "equispaced"
SPECTRUM = "spectrum"
METHODS = (SEQUENTIAL, NONSEQ, LOUPE, RANDOM, EQUISPACED, SPECTRUM)
FIXED_MASK_METHODS = (RANDOM, EQUISPACED, SPECTRUM)

NOISE_SEED_OFFSET = 7919


def random_mask(spec: AccelSpec, rng: np.random.Generator) -> Mask:
    """
    Low-frequency region plus B - B_lf indices drawn uniformly without
    replacement from the rest.
    """
    values = low_freq_mask(spec).values.copy()
    free = np.flatnonzero(values == 0)
    extra = spec.budget - spec.low_freq_budget
    if extra > free.size:
        raise BudgetError(f"budget {spec.budget} exceeds the {spec.total_indices} available indices")
    values[rng.choice(free, size=extra, replace=False)] = 1.0
    return Mask(values, spec.mode, spec.extent)


def equispaced_mask(spec: AccelSpec) -> Mask:
    """
    Centre lines plus B - B_lf columns spaced N // B apart around DC.

    Columns that land on an acquired line move one step further from the
    centre until a free one is found.

    Raises:
        ConfigError: In point mode
    """
    if spec.mode != LINE:
        raise ConfigError("equispaced masks are defined for line sampling only")
    n = spec.extent
    centre = n // 2
    taken = low_freq_mask(spec).values.astype(bool)
    extra = spec.budget - spec.low_freq_budget
    stride = max(n // spec.budget, 1)
    while stride > 1 and extra * stride > n:
        stride -= 1
    offsets = [(j - extra // 2) * stride for j in range(extra)]
    for offset in sorted(offsets, key=lambda o: (abs(o), o)):
        direction = 1 if offset >= 0 else -1
        column = (centre + offset) % n
        while taken[column]:
            column = (column + direction) % n
        taken[column] = True
    return Mask(taken.astype(np.float64), spec.mode, spec.extent)


def mean_power_spectrum(images: np.ndarray) -> np.ndarray:
    """Average |F(x)|^2 over a (count, H, W) stack, DC at the centre."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or len(images) == 0:
        raise ConfigError("spectrum statistics need a non-empty (count, H, W) image stack")
    y = to_kspace(images).value
    return np.mean(y[:, 0] ** 2 + y[:, 1] ** 2, axis=0)


def spectrum_mask(images: np.ndarray, spec: AccelSpec) -> Mask:
    """
    Low-frequency region, then the highest-power remaining indices of the
    training-set average spectrum (columns summed in line mode) up to B.
    """
    power = mean_power_spectrum(images)
    scores = power.sum(axis=0) if spec.mode == LINE else power.ravel()
    values = low_freq_mask(spec).values.copy()
    order = np.lexsort((np.arange(scores.size), -scores))
    remaining = order[values[order] == 0][: spec.budget - spec.low_freq_budget]
    values[remaining] = 1.0
    return Mask(values, spec.mode, spec.extent)


def _init_rng(cfg: TrainConfig) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 0])


def random_mask_fn(spec: AccelSpec):
    def draw(batch: int, rng: np.random.Generator) -> np.ndarray:
        return np.stack([random_mask(spec, rng).values for _ in range(batch)])
    return draw


def constant_mask_fn(mask: Mask):
    def draw(batch: int, rng: np.random.Generator) -> np.ndarray:
        return mask.batch(batch).values
    return draw


def static_heatmap(model: SequentialModel) -> np.ndarray:
    """Normalized, low-frequency-masked heatmap of a static learned mask model."""
    if not isinstance(model.policy, StaticPolicy):
        raise ConfigError(f"model '{model.method}' has no static heatmap")
    spec = model.spec
    lf = low_freq_mask(spec).values[None, :]
    free = 1.0 - lf
    target = spec.step_budgets()[0] / free.sum()
    raw = ad.reshape(model.policy.scores, (1, -1))
    return mask_acquired(normalize_heatmap(raw, target, support=free), lf).value[0]


def build_model(method: str, cfg: TrainConfig, dataset: Optional[Dataset] = None,
                fixed_mask: Optional[Mask] = None, dtype=np.float32):
    """
    Construct an untrained model for ``method``.

    The static learned mask and the non-sequential variant draw their whole
    budget in one step; the spectrum baseline needs either the training
    split or a precomputed ``fixed_mask``.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method '{method}' (expected one of {METHODS})")
    rng = _init_rng(cfg)
    spec = cfg.accel_spec()
    if method == SEQUENTIAL:
        return build_sequential_model(cfg, rng, dtype)
    if method in (LOUPE, NONSEQ):
        one_shot = spec.with_steps(1)
        if method == LOUPE:
            policy = StaticPolicy(cfg.mode, cfg.extent, rng, dtype)
        elif cfg.mode == LINE:
            policy = NoiseInputPolicy(LinePolicy(cfg.extent, rng, hidden=cfg.line_hidden, dtype=dtype),
                                      cfg.seed + NOISE_SEED_OFFSET)
        else:
            policy = NoiseInputPolicy(PointPolicy(cfg.extent, rng, widths=cfg.policy_widths, dtype=dtype),
                                      cfg.seed + NOISE_SEED_OFFSET)
        recon = ReconNet(rng, widths=cfg.recon_widths, dtype=dtype)
        return SequentialModel(method, policy, recon, one_shot, cfg.slope, cfg.max_rejections,
                               cfg.freeze_reconstructor)

    recon = ReconNet(rng, widths=cfg.recon_widths, dtype=dtype)
    if method == RANDOM:
        return FixedMaskModel(method, recon, spec, random_mask_fn(spec))
    if fixed_mask is None:
        if method == EQUISPACED:
            fixed_mask = equispaced_mask(spec)
        else:
            if dataset is None:
                raise ConfigError("the spectrum baseline needs a dataset")
            fixed_mask = spectrum_mask(dataset.split("train"), spec)
    return FixedMaskModel(method, recon, spec, constant_mask_fn(fixed_mask), fixed_mask=fixed_mask)


def pretrain_reconstructor(recon: ReconNet, cfg: TrainConfig, dataset: Dataset) -> TrainResult:
    """Train ``recon`` against uniformly random masks for ``cfg.pretrain_epochs`` epochs."""
    pre_cfg = dataclasses.replace(cfg, epochs=cfg.pretrain_epochs, freeze_reconstructor=False)
    spec = cfg.accel_spec()
    model = FixedMaskModel("pretrain", recon, spec, random_mask_fn(spec))
    logger.info(f"Pre-training the reconstructor on random masks for {cfg.pretrain_epochs} epochs")
    return train(pre_cfg, dataset, model)


def train_method(method: str, cfg: TrainConfig, dataset: Dataset,
                 log_path: Optional[Union[str, Path]] = None, config_hash: str = "") -> TrainResult:
    """
    Build and train one method.

    With ``cfg.freeze_reconstructor`` the reconstructor is first pre-trained
    on random masks, then frozen while the sampler trains (co-design off).
    """
    if cfg.freeze_reconstructor and method not in (SEQUENTIAL, NONSEQ, LOUPE):
        raise ConfigError(f"freezing the reconstructor leaves nothing to train for '{method}'")
    if cfg.freeze_reconstructor:
        unfrozen = dataclasses.replace(cfg, freeze_reconstructor=False)
        model = build_model(method, unfrozen, dataset)
        if cfg.pretrain_epochs > 0:
            pretrain_reconstructor(model.recon, cfg, dataset)
        model = SequentialModel(method, model.policy, model.recon, model.spec, cfg.slope,
                                cfg.max_rejections, freeze_reconstructor=True)
    else:
        model = build_model(method, cfg, dataset)
    return train(cfg, dataset, model, log_path=log_path, config_hash=config_hash)


def loupe_style_train(cfg: TrainConfig, dataset: Dataset, **kwargs) -> TrainResult:
    """Static learned mask trained jointly with its reconstructor."""
    return train_method(LOUPE, cfg, dataset, **kwargs)


def nonseq_variant_train(cfg: TrainConfig, dataset: Dataset, **kwargs) -> TrainResult:
    """Policy network fed fixed noise, one-shot mask, trained with its reconstructor."""
    return train_method(NONSEQ, cfg, dataset, **kwargs)
