"""
k-space measurement physics for SeqSample.

Covers the unitary (DC-centred) Fourier transform of images, masked
subsampling, zero-filled reconstruction, acceleration accounting and the
pre-selected low-frequency region that every policy starts from.
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Union

import numpy as np

import autodiff as ad
from errors import BudgetError, ShapeError

LINE = "line"
POINT = "point"
MODES = (LINE, POINT)

# share of the total budget that is always acquired at the k-space centre
LOW_FREQ_FRACTION = 1 / 8


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class AccelSpec:
    """
    Budget bookkeeping for one acceleration setting.

    Budgets count points in point mode and whole columns (lines) in line
    mode. B = round(K / accel), B_lf = round(B / 8), and the remaining
    B - B_lf indices are split evenly over the steps with the remainder
    added to the last one.
    """

    accel: float
    mode: str
    extent: int
    steps: int

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown sampling mode '{self.mode}' (expected one of {MODES})")
        if not _is_pow2(self.extent):
            raise ShapeError(f"extent {self.extent} is not a power of two")
        if self.accel < 1:
            raise BudgetError(f"acceleration {self.accel} must be at least 1")
        if self.steps < 1:
            raise BudgetError(f"step count {self.steps} must be at least 1")
        if self.low_freq_budget < 1:
            raise BudgetError(f"low-frequency budget is empty for accel {self.accel} on {self.total_indices} indices")
        if min(self.step_budgets()) < 1:
            raise BudgetError(
                f"budget {self.budget} leaves fewer than one new index per step "
                f"after {self.low_freq_budget} pre-selected over {self.steps} steps"
            )

    @property
    def total_indices(self) -> int:
        return self.extent if self.mode == LINE else self.extent * self.extent

    @property
    def budget(self) -> int:
        return round_half_up(self.total_indices / self.accel)

    @property
    def low_freq_budget(self) -> int:
        return round_half_up(self.budget * LOW_FREQ_FRACTION)

    @property
    def per_step(self) -> int:
        return (self.budget - self.low_freq_budget) // self.steps

    def step_budgets(self) -> List[int]:
        budgets = [self.per_step] * self.steps
        budgets[-1] += (self.budget - self.low_freq_budget) - self.per_step * self.steps
        return budgets

    def with_steps(self, steps: int) -> "AccelSpec":
        return AccelSpec(self.accel, self.mode, self.extent, steps)


@dataclass
class Mask:
    """
    Binary sampling pattern over K indices, optionally batched as (B, K).

    Line masks hold one entry per column; their 2D realisation repeats each
    entry down its column.
    """

    values: np.ndarray
    mode: str
    extent: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = self.extent if self.mode == LINE else self.extent * self.extent
        if self.values.shape[-1] != expected:
            raise ShapeError(f"{self.mode} mask needs {expected} indices, got {self.values.shape}")
        if not np.all((self.values == 0) | (self.values == 1)):
            raise ValueError("mask entries must be 0 or 1")

    @property
    def total_indices(self) -> int:
        return self.values.shape[-1]

    def count(self) -> Union[int, np.ndarray]:
        counts = self.values.sum(axis=-1).astype(int)
        return int(counts) if counts.ndim == 0 else counts

    def realize(self) -> np.ndarray:
        """2D realisation of shape (..., extent, extent)."""
        lead = self.values.shape[:-1]
        if self.mode == POINT:
            return self.values.reshape(lead + (self.extent, self.extent))
        return np.broadcast_to(self.values[..., None, :], lead + (self.extent, self.extent)).copy()

    def indices(self) -> list:
        """Acquired indices: column numbers (line) or [row, col] pairs (point)."""
        if self.values.ndim != 1:
            raise ShapeError("indices() needs an unbatched mask")
        flat = np.flatnonzero(self.values)
        if self.mode == LINE:
            return [int(i) for i in flat]
        return [[int(i // self.extent), int(i % self.extent)] for i in flat]

    def batch(self, size: int) -> "Mask":
        return Mask(np.broadcast_to(self.values, (size, self.total_indices)).copy(), self.mode, self.extent)


def _require_square_pow2(height: int, width: int) -> None:
    if height != width or not _is_pow2(height):
        raise ShapeError(f"images must be power-of-two squares, got {height}x{width}")


def to_kspace(x: ad.Operand) -> ad.Node:
    """y = F(x) for a real (..., H, W) image, DC at the grid centre."""
    x = ad.as_node(x)
    _require_square_pow2(*x.shape[-2:])
    return ad.fft2(ad.complexify(x))


def to_image(y: ad.Operand) -> ad.Node:
    """Real channel of F^-1(y)."""
    x = ad.ifft2(ad.as_node(y))
    return x[..., 0, :, :]


def realize_mask(m: ad.Operand, mode: str, extent: int) -> ad.Node:
    """Reshape (..., K) mask values so they broadcast against (..., 2, H, W) grids."""
    m = ad.as_node(m)
    lead = m.shape[:-1]
    if mode == POINT:
        return ad.reshape(m, lead + (1, extent, extent))
    return ad.reshape(m, lead + (1, 1, extent))


def apply_mask(y: ad.Operand, m: Union[Mask, ad.Node], mode: Optional[str] = None) -> ad.Node:
    """
    y_hat = M * y on both channels.

    ``m`` is either a Mask or a (..., K) node carrying straight-through
    gradients; a node needs ``mode``.

    Raises:
        ShapeError: If the mask does not match the grid extents
    """
    y = ad.as_node(y)
    extent = y.shape[-1]
    if isinstance(m, Mask):
        if m.extent != extent:
            raise ShapeError(f"mask extent {m.extent} vs grid extent {extent}")
        mode, values = m.mode, ad.as_node(m.values, y.dtype)
    else:
        if mode is None:
            raise ValueError("apply_mask needs a mode for node-valued masks")
        values = m
    expected = extent if mode == LINE else extent * extent
    if values.shape[-1] != expected or y.shape[-2] != extent:
        raise ShapeError(f"{mode} mask of {values.shape} does not fit grid {y.shape}")
    return y * realize_mask(values, mode, extent)


def zero_fill(y_hat: ad.Operand) -> ad.Node:
    """x_hat = F^-1(y_hat) as a two-channel complex image."""
    return ad.ifft2(ad.as_node(y_hat))


def acceleration(m: Mask) -> Union[Fraction, List[Fraction]]:
    """
    alpha = K / sum(M) as an exact fraction (a list for batched masks).

    Raises:
        BudgetError: If a mask is empty
    """
    counts = np.atleast_1d(m.values.sum(axis=-1)).astype(int)
    if np.any(counts < 1):
        raise BudgetError("acceleration is undefined for an empty mask")
    ratios = [Fraction(m.total_indices, int(c)) for c in counts]
    return ratios[0] if m.values.ndim == 1 else ratios


def _centre_order(extent: int, mode: str, square: int = 0) -> np.ndarray:
    """
    Flat indices ordered outward from the DC bin at (extent // 2, extent // 2).

    Line mode orders columns by distance to DC, the lower of two equidistant
    columns first. Point mode puts the ``square`` x ``square`` block around DC
    first, then the remaining points by Chebyshev ring about DC, Euclidean
    radius, and 180-degree mirror pair, so each ring is completed in
    mirrored pairs.
    """
    c = extent // 2
    if mode == LINE:
        cols = np.arange(extent)
        return np.lexsort((cols, np.abs(cols - c)))
    rows, cols = np.divmod(np.arange(extent * extent), extent)
    dr, dc = rows - c, cols - c
    lo = c - square // 2
    outside = ~((rows >= lo) & (rows < lo + square) & (cols >= lo) & (cols < lo + square))
    ring = np.maximum(np.abs(dr), np.abs(dc))
    radius = np.hypot(dr, dc)
    flat = rows * extent + cols
    mirror = ((2 * c - rows) % extent) * extent + (2 * c - cols) % extent
    pair = np.minimum(flat, mirror)
    return np.lexsort((-flat, pair, radius, ring, outside))


def low_freq_mask(spec: AccelSpec) -> Mask:
    """
    The pre-selected centre region holding exactly B_lf indices.

    Line mode takes the B_lf columns nearest DC. Point mode takes the
    square of side floor(sqrt(B_lf)) around DC and completes the next ring
    outward in mirrored pairs until B_lf points are set.

    Raises:
        BudgetError: If B_lf exceeds K
    """
    if spec.low_freq_budget > spec.total_indices:
        raise BudgetError(f"low-frequency budget {spec.low_freq_budget} exceeds {spec.total_indices} indices")
    values = np.zeros(spec.total_indices)
    side = math.isqrt(spec.low_freq_budget) if spec.mode == POINT else 0
    values[_centre_order(spec.extent, spec.mode, side)[: spec.low_freq_budget]] = 1.0
    return Mask(values, spec.mode, spec.extent)
