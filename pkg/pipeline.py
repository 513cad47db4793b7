"""
Sequential acquisition loop, training objective and the train/evaluate drivers.

One episode pre-selects the low-frequency region, then for T steps
reconstructs, feeds (measured k-space, k-space of the reconstruction, mask)
to the policy and acquires the drawn indices. A final reconstruction is
scored against the ground truth; intermediate reconstructions carry no loss.
The same policy and reconstructor handles are used at every step.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import autodiff as ad
from errors import BudgetError, ConfigError, NonFiniteError, ShapeError, TrainingDiverged
from forward_model import (LINE, MODES, POINT, AccelSpec, Mask, acceleration, apply_mask,
                           low_freq_mask, to_kspace, zero_fill)
from metrics import image_metrics
from phantoms import Dataset
from reconstructor import DEFAULT_WIDTHS, ReconNet
from sampler import (DEFAULT_SLOPE, LINE_HIDDEN, MAX_REJECTIONS, POINT_WIDTHS, LinePolicy,
                     PointPolicy, PolicyInput, StepDraw, sample_step)

logger = logging.getLogger(__name__)

DEFAULT_LR = {POINT: 1e-3, LINE: 5e-5}


@dataclass
class TrainConfig:
    """Training and acquisition settings for one model."""

    mode: str = POINT
    accel: float = 4.0
    steps: int = 4
    epochs: int = 50
    lr: Optional[float] = None
    lr_halving_period: int = 10
    batch_size: int = 8
    seed: int = 0
    slope: float = DEFAULT_SLOPE
    extent: int = 64
    recon_widths: Tuple[int, ...] = DEFAULT_WIDTHS
    policy_widths: Tuple[int, ...] = POINT_WIDTHS
    line_hidden: int = LINE_HIDDEN
    max_rejections: int = MAX_REJECTIONS
    eval_seed: int = 1234
    freeze_reconstructor: bool = False
    pretrain_epochs: int = 10
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown sampling mode '{self.mode}' (expected one of {MODES})")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.mode]
        for name in ("accel", "steps", "epochs", "lr", "lr_halving_period", "batch_size",
                     "slope", "extent", "line_hidden", "max_rejections", "workers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.pretrain_epochs < 0:
            raise ConfigError(f"train.pretrain_epochs must be non-negative, got {self.pretrain_epochs}")
        self.recon_widths = tuple(self.recon_widths)
        self.policy_widths = tuple(self.policy_widths)

    def accel_spec(self) -> AccelSpec:
        return AccelSpec(self.accel, self.mode, self.extent, self.steps)

    def to_dict(self) -> Dict:
        values = asdict(self)
        values["recon_widths"] = list(self.recon_widths)
        values["policy_widths"] = list(self.policy_widths)
        return values


@dataclass
class StepRecord:
    """
    State at step t: the mask M_t, its measurement, the zero-filled image and
    the reconstruction. ``heatmap`` and ``draw`` describe how M_{t+1} was
    sampled and are empty on the final record.
    """

    mask: np.ndarray
    y_hat: ad.Node
    x_hat: ad.Node
    x_tilde: ad.Node
    heatmap: Optional[np.ndarray] = None
    draw: Optional[StepDraw] = None


@dataclass
class EpisodeTrace:
    """Records of steps 0..T of one batched acquisition episode."""

    steps: List[StepRecord]
    mode: str
    extent: int
    final_mask: ad.Node
    loss_value: Optional[float] = None

    @property
    def reconstruction(self) -> ad.Node:
        """Final reconstruction x_T as a (B, H, W) node."""
        x_tilde = self.steps[-1].x_tilde
        return ad.reshape(x_tilde, (x_tilde.shape[0],) + x_tilde.shape[-2:])

    def masks(self) -> List[Mask]:
        return [Mask(rec.mask, self.mode, self.extent) for rec in self.steps]

    def acquired_counts(self) -> np.ndarray:
        """(T + 1, B) number of acquired indices per step."""
        return np.stack([rec.mask.sum(axis=-1) for rec in self.steps]).round().astype(int)


def _as_batch(x: ad.Operand) -> ad.Node:
    x = ad.as_node(x)
    if x.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    return x


def measure(y: ad.Node, mask: ad.Node, mode: str, recon: Callable[[ad.Node], ad.Node]):
    """(y_hat, x_hat, x_tilde) for one mask."""
    y_hat = apply_mask(y, mask, mode)
    x_hat = zero_fill(y_hat)
    return y_hat, x_hat, recon(x_hat)


def run_episode(x: ad.Operand, policy, recon: Callable[[ad.Node], ad.Node], spec: AccelSpec,
                rng: np.random.Generator, slope: float = DEFAULT_SLOPE,
                max_rejections: int = MAX_REJECTIONS, relaxed: bool = False) -> EpisodeTrace:
    """
    Run T acquisition steps on a (H, W) or (B, H, W) batch of images.

    Raises:
        ShapeError: If the images do not match spec.extent
        BudgetError: If a step budget cannot be met
    """
    x = _as_batch(x)
    if x.shape[-1] != spec.extent or x.shape[-2] != spec.extent:
        raise ShapeError(f"spec for extent {spec.extent} used on images of shape {x.shape}")
    batch = x.shape[0]
    y = to_kspace(x)
    mask = ad.Node(low_freq_mask(spec).batch(batch).values.astype(x.dtype))
    budgets = spec.step_budgets()
    records: List[StepRecord] = []
    for t in range(spec.steps + 1):
        y_hat, x_hat, x_tilde = measure(y, mask, spec.mode, recon)
        record = StepRecord(mask=mask.value.copy(), y_hat=y_hat, x_hat=x_hat, x_tilde=x_tilde)
        records.append(record)
        if t == spec.steps:
            break
        # the policy sees the spectrum of the current reconstruction, recomputed every step
        y_tilde = to_kspace(ad.reshape(x_tilde, (batch, spec.extent, spec.extent)))
        inp = PolicyInput(y_hat=y_hat, y_tilde=y_tilde, mask=mask, mode=spec.mode)
        mask, heatmap, draw = sample_step(policy, inp, mask, budgets[t], rng, slope, max_rejections, relaxed)
        record.heatmap = heatmap.value.copy()
        record.draw = draw
        logger.debug(f"step {t + 1}/{spec.steps}: {budgets[t]} new indices, retries {draw.retries}")
    return EpisodeTrace(records, spec.mode, spec.extent, final_mask=mask)


def loss(trace: EpisodeTrace, x: ad.Operand) -> ad.Node:
    """1 - SSIM(x_T, x) on the final reconstruction, data range = per-image max of x."""
    gt = _as_batch(x)
    recon = trace.reconstruction
    value = 1.0 - ad.ssim(recon, ad.as_node(gt.value, recon.dtype))
    trace.loss_value = value.item()
    return value


class SequentialModel:
    """Policy and reconstructor run through the T-step loop with shared weights."""

    def __init__(self, method: str, policy, recon: ReconNet, spec: AccelSpec,
                 slope: float = DEFAULT_SLOPE, max_rejections: int = MAX_REJECTIONS,
                 freeze_reconstructor: bool = False):
        self.method = method
        self.policy = policy
        self.recon = recon
        self.spec = spec
        self.slope = slope
        self.max_rejections = max_rejections
        self.params = ad.Params.merge(policy.params, recon.params)
        self.freeze_reconstructor = freeze_reconstructor
        if freeze_reconstructor:
            for node in recon.params.nodes():
                node.requires_grad = False

    def trainable(self) -> ad.Params:
        return self.policy.params if self.freeze_reconstructor else self.params

    def run_episode(self, x: ad.Operand, rng: np.random.Generator, relaxed: bool = False) -> EpisodeTrace:
        return run_episode(x, self.policy, self.recon, self.spec, rng, self.slope,
                           self.max_rejections, relaxed)


class FixedMaskModel:
    """
    A reconstructor trained against masks from a fixed rule (random,
    equispaced, spectrum). ``mask_fn(batch, rng)`` returns (B, K) masks.
    """

    def __init__(self, method: str, recon: ReconNet, spec: AccelSpec,
                 mask_fn: Callable[[int, np.random.Generator], np.ndarray],
                 fixed_mask: Optional[Mask] = None):
        self.method = method
        self.recon = recon
        self.spec = spec
        self.mask_fn = mask_fn
        self.fixed_mask = fixed_mask
        self.params = recon.params

    def trainable(self) -> ad.Params:
        return self.params

    def run_episode(self, x: ad.Operand, rng: np.random.Generator, relaxed: bool = False) -> EpisodeTrace:
        x = _as_batch(x)
        y = to_kspace(x)
        mask = ad.Node(np.asarray(self.mask_fn(x.shape[0], rng), dtype=x.dtype))
        y_hat, x_hat, x_tilde = measure(y, mask, self.spec.mode, self.recon)
        record = StepRecord(mask=mask.value.copy(), y_hat=y_hat, x_hat=x_hat, x_tilde=x_tilde)
        return EpisodeTrace([record], self.spec.mode, self.spec.extent, final_mask=mask)


def build_sequential_model(cfg: TrainConfig, rng: np.random.Generator, dtype=np.float32,
                           recon: Optional[ReconNet] = None, method: str = "sequential") -> SequentialModel:
    spec = cfg.accel_spec()
    if cfg.mode == LINE:
        policy = LinePolicy(cfg.extent, rng, hidden=cfg.line_hidden, dtype=dtype)
    else:
        policy = PointPolicy(cfg.extent, rng, widths=cfg.policy_widths, dtype=dtype)
    recon = recon or ReconNet(rng, widths=cfg.recon_widths, dtype=dtype)
    return SequentialModel(method, policy, recon, spec, cfg.slope, cfg.max_rejections,
                           cfg.freeze_reconstructor)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """lr0 halved every ``lr_halving_period`` epochs."""
    return cfg.lr * 0.5 ** (epoch // cfg.lr_halving_period)


@dataclass
class ImageMetrics:
    index: int
    ssim: float
    psnr: float
    acceleration: float

    def to_row(self) -> List:
        return [self.index, self.ssim, self.psnr, self.acceleration]


METRIC_COLUMNS = ["index", "ssim", "psnr", "acceleration"]


@dataclass
class TrainResult:
    model: object
    log: List[Dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_ssim: float = -math.inf
    optimizer: Optional[ad.AdamState] = None


def audit_acceleration(mask: Mask, spec: AccelSpec) -> float:
    """
    Acceleration of a final mask, checked against the configured factor.

    Raises:
        BudgetError: If it falls outside accel * (1 +- 2 / B)
    """
    achieved = float(acceleration(mask))
    tolerance = 2.0 / spec.budget
    if not spec.accel * (1 - tolerance) <= achieved <= spec.accel * (1 + tolerance):
        raise BudgetError(f"final mask acceleration {achieved:.4f} is outside {spec.accel} +- {tolerance:.4f}")
    return achieved


def _evaluate_one(model, images: np.ndarray, position: int, index: int, eval_seed: int) -> ImageMetrics:
    rng = np.random.default_rng([eval_seed, index])
    gt = images[position].astype(np.float64)
    trace = model.run_episode(images[position:position + 1], rng)
    recon = trace.reconstruction.value[0].astype(np.float64)
    achieved = audit_acceleration(Mask(trace.steps[-1].mask[0], model.spec.mode, model.spec.extent), model.spec)
    ssim_value, psnr_value = image_metrics(recon, gt)
    return ImageMetrics(index=int(index), ssim=ssim_value, psnr=psnr_value, acceleration=achieved)


def evaluate(model, images: np.ndarray, eval_seed: int = 1234,
             indices: Optional[Sequence[int]] = None, workers: int = 1) -> List[ImageMetrics]:
    """
    Per-image SSIM / PSNR with a fixed RNG stream per image index.

    Args:
        model: SequentialModel or FixedMaskModel
        images: (count, H, W) ground truths
        eval_seed: Evaluation seed; image i draws from default_rng([eval_seed, indices[i]])
        indices: Dataset indices of the images (defaults to 0..count-1)
        workers: Thread count; results do not depend on it
    """
    images = np.asarray(images, dtype=np.float32)
    indices = list(range(len(images))) if indices is None else [int(i) for i in indices]
    if len(indices) != len(images):
        raise ValueError(f"{len(indices)} indices for {len(images)} images")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda p: _evaluate_one(model, images, p, indices[p], eval_seed),
                                 range(len(images))))
    return [_evaluate_one(model, images, p, indices[p], eval_seed) for p in range(len(images))]


def evaluate_zero_filled(images: np.ndarray, mask: Mask) -> List[ImageMetrics]:
    """Metrics of |zero_fill(M * F(x))| against x, with no network."""
    results = []
    for i, image in enumerate(np.asarray(images, dtype=np.float64)):
        x_hat = zero_fill(apply_mask(to_kspace(image), mask))
        magnitude = np.hypot(x_hat.value[0], x_hat.value[1])
        ssim_value, psnr_value = image_metrics(magnitude, image)
        results.append(ImageMetrics(i, ssim_value, psnr_value, float(acceleration(mask))))
    return results


def mean_ssim(metrics: Sequence[ImageMetrics]) -> float:
    return float(np.mean([m.ssim for m in metrics])) if metrics else math.nan


def train(cfg: TrainConfig, dataset: Dataset, model, log_path: Optional[Union[str, Path]] = None,
          config_hash: str = "") -> TrainResult:
    """
    Adam over shuffled minibatches with the learning rate halved every
    ``lr_halving_period`` epochs; the best-validation parameters are kept.

    Each epoch appends one JSON line (epoch, train_loss, val_ssim, lr,
    config_hash) to ``log_path`` when given.

    Raises:
        ConfigError: If the train or val split is empty
        TrainingDiverged: If any step produces NaN/Inf
    """
    train_idx = dataset.split_indices("train")
    val_idx = dataset.split_indices("val")
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ConfigError(f"training needs non-empty train and val splits ({len(train_idx)}/{len(val_idx)})")
    images = dataset.images
    params = model.params
    trainable = model.trainable()
    state = ad.AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    result = TrainResult(model=model, optimizer=state)
    best = params.snapshot()
    dtype = params.nodes()[0].dtype

    logger.info(f"Training {model.method} ({cfg.mode}, accel {cfg.accel}, T={cfg.steps}) "
                f"on {len(train_idx)} images for {cfg.epochs} epochs")
    for epoch in range(cfg.epochs):
        state.lr = learning_rate(cfg, epoch)
        order = train_idx[rng.permutation(len(train_idx))]
        losses = []
        for batch_no, start in enumerate(range(0, len(order), cfg.batch_size)):
            x = images[order[start:start + cfg.batch_size]].astype(dtype)
            params.zero_grad()
            try:
                with ad.Tape() as tape:
                    trace = model.run_episode(x, rng)
                    value = loss(trace, x)
                tape.backward(value)
            except NonFiniteError as e:
                logger.error(f"Non-finite value at epoch {epoch}, batch {batch_no}: {e}")
                raise TrainingDiverged(f"epoch {epoch}, batch {batch_no}: {e}") from e
            ad.adam_step(trainable, trainable.grads(), state)
            losses.append(value.item())

        val_ssim = mean_ssim(evaluate(model, images[val_idx], cfg.eval_seed, val_idx, cfg.workers))
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_ssim": val_ssim,
            "lr": state.lr,
            "config_hash": config_hash,
        }
        result.log.append(record)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        logger.info(f"epoch {epoch}: train loss {record['train_loss']:.5f}, val SSIM {val_ssim:.5f}, lr {state.lr:.3g}")
        if val_ssim > result.best_val_ssim:
            result.best_val_ssim = val_ssim
            result.best_epoch = epoch
            best = params.snapshot()

    if result.best_epoch != cfg.epochs - 1:
        logger.warning(f"Restoring best validation epoch {result.best_epoch} (SSIM {result.best_val_ssim:.5f})")
    params.restore(best)
    return result
