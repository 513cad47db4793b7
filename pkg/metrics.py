"""
Evaluation metrics and paired comparison statistics.

SSIM and PSNR per image, the pairwise comparison report (outperformance
percentage and paired t-test), relative-improvement histograms, and the
axial statistics used by the adaptivity probe.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import stats

import autodiff as ad
from errors import ShapeError

logger = logging.getLogger(__name__)

# two-sided p-values use the normal tail above this many pairs, Student-t otherwise
NORMAL_APPROX_MIN_PAIRS = 31
TIE_SHARE = 0.5


def ssim_value(pred: np.ndarray, gt: np.ndarray) -> float:
    """Plain-value SSIM (7x7 box window, data range = ground-truth max, 1 for blank images)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    return ad.ssim(ad.Node(pred), gt).item()


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """
    Peak signal-to-noise ratio in dB with the ground-truth maximum as peak.

    Identical images give ``math.inf``. A blank ground truth uses
    ``autodiff.FALLBACK_DATA_RANGE`` as the peak.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"psnr: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(gt.max())
    if peak <= 0:
        peak = ad.FALLBACK_DATA_RANGE
    return 10.0 * math.log10(peak * peak / mse)


def image_metrics(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, float]:
    """(SSIM, PSNR) of one reconstruction against its ground truth."""
    return ssim_value(pred, gt), psnr(pred, gt)


@dataclass
class ComparisonReport:
    """Paired comparison of two methods over the same images and evaluation seeds."""

    name_a: str
    name_b: str
    count: int
    mean_a: float
    std_a: float
    mean_b: float
    std_b: float
    percent_a_better: float
    t_statistic: float
    p_value: float
    ssim_a: List[float] = field(default_factory=list)
    ssim_b: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)

    def summary(self) -> str:
        return (
            f"{self.name_a} {self.mean_a:.4f}±{self.std_a:.4f} vs "
            f"{self.name_b} {self.mean_b:.4f}±{self.std_b:.4f}: "
            f"{self.name_a} better on {self.percent_a_better:.2f}% of {self.count} images, "
            f"t={self.t_statistic:.4f}, p={self.p_value:.3g}"
        )


def _std(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if values.size > 1 else 0.0


def paired_t_test(differences: Sequence[float]) -> Tuple[float, float]:
    """
    t = mean(d) / (std(d) / sqrt(n)) with a two-sided p-value.

    Zero-variance differences give (0, 1) for a zero mean and (+-inf, 0)
    otherwise.
    """
    d = np.asarray(differences, dtype=np.float64)
    n = d.size
    mean = float(d.mean())
    sd = _std(d)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    if n >= NORMAL_APPROX_MIN_PAIRS:
        p = 2.0 * stats.norm.sf(abs(t))
    else:
        p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return t, float(min(p, 1.0))


def compare(metrics_a: Sequence[float], metrics_b: Sequence[float],
            name_a: str = "A", name_b: str = "B") -> ComparisonReport:
    """
    Build a ComparisonReport from paired per-image SSIM lists.

    Ties count half to each side, so pct(A, B) + pct(B, A) = 100.

    Raises:
        ShapeError: If the lists differ in length or are empty
    """
    a = np.asarray(metrics_a, dtype=np.float64)
    b = np.asarray(metrics_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"compare needs equal-length paired lists, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise ShapeError("compare needs at least one pair")
    wins = np.sum(a > b) + TIE_SHARE * np.sum(a == b)
    t, p = paired_t_test(a - b)
    return ComparisonReport(
        name_a=name_a,
        name_b=name_b,
        count=int(a.size),
        mean_a=float(a.mean()),
        std_a=_std(a),
        mean_b=float(b.mean()),
        std_b=_std(b),
        percent_a_better=float(100.0 * wins / a.size),
        t_statistic=t,
        p_value=p,
        ssim_a=a.tolist(),
        ssim_b=b.tolist(),
    )


def relative_improvement_histogram(metrics_a: Sequence[float], metrics_b: Sequence[float],
                                   bins: int = 20) -> List[Tuple[float, float, int]]:
    """Histogram of (A - B) / B as (lower edge, upper edge, count) rows."""
    a = np.asarray(metrics_a, dtype=np.float64)
    b = np.asarray(metrics_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"histogram needs paired lists, got {a.shape} and {b.shape}")
    if np.any(b == 0):
        raise ValueError("relative improvement is undefined for a zero baseline value")
    counts, edges = np.histogram((a - b) / np.abs(b), bins=bins)
    return [(float(lo), float(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]


def principal_axis(weights: np.ndarray) -> float:
    """
    Axial angle in [0, pi) of the second-moment principal axis of a 2D
    weight map about its DC position (extent // 2 on both axes).

    Angles are measured from the column axis towards increasing rows.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise ShapeError(f"principal_axis needs a 2D map, got {weights.shape}")
    rows, cols = np.indices(weights.shape)
    dy = rows - weights.shape[0] // 2
    dx = cols - weights.shape[1] // 2
    cxx = float(np.sum(weights * dx * dx))
    cyy = float(np.sum(weights * dy * dy))
    cxy = float(np.sum(weights * dx * dy))
    return float(np.mod(0.5 * math.atan2(2.0 * cxy, cxx - cyy), math.pi))


def axial_difference(a: float, b: float) -> float:
    """Smallest absolute difference between two axial angles, in [0, pi/2]."""
    diff = abs(a - b) % math.pi
    return min(diff, math.pi - diff)


def circular_correlation(angles_a: Sequence[float], angles_b: Sequence[float]) -> float:
    """
    Circular correlation of two axial angle samples (angles doubled first).

    Returns 0 when either sample has no angular spread.
    """
    a = 2.0 * np.asarray(angles_a, dtype=np.float64)
    b = 2.0 * np.asarray(angles_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"circular_correlation needs paired samples, got {a.shape} and {b.shape}")
    sa = np.sin(a - stats.circmean(a))
    sb = np.sin(b - stats.circmean(b))
    denom = math.sqrt(float(np.sum(sa * sa) * np.sum(sb * sb)))
    if denom < 1e-12:
        return 0.0
    return float(np.sum(sa * sb) / denom)


def axial_spread(angles: Sequence[float]) -> float:
    """Circular standard deviation of axial angles, in radians of the original axis."""
    doubled = 2.0 * np.asarray(angles, dtype=np.float64)
    return 0.5 * float(stats.circstd(doubled))
