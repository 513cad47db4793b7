"""
Reconstruction network: an eight-block UNet that maps the two-channel
zero-filled image to a single-channel real estimate.
"""

import numpy as np

import autodiff as ad
from errors import ShapeError
from networks import UNet

DEFAULT_WIDTHS = (16, 32, 64, 128)
MIN_EXTENT = 2 ** UNet.DEPTH
SCALE_PERCENTILE = 99.0
SCALE_FLOOR = 1e-8


class ReconNet:
    """UNet reconstructor; inputs are scaled by the 99th-percentile magnitude and outputs scaled back."""

    def __init__(self, rng: np.random.Generator, widths=DEFAULT_WIDTHS, dtype=np.float32):
        self.unet = UNet("recon", 2, 1, widths, rng, dtype)
        self.params = self.unet.params

    def __call__(self, x_hat: ad.Node) -> ad.Node:
        return reconstruct(x_hat, self)


def input_scale(grid: ad.Node) -> ad.Node:
    """Per-image 99th percentile of |grid| for a (B, 2, H, W) grid, shaped (B, 1, 1, 1)."""
    mag = ad.reshape(ad.magnitude(grid), (grid.shape[0], -1))
    scale = ad.percentile(mag, SCALE_PERCENTILE)
    # all-zero inputs (empty masks) keep a positive scale
    scale = scale + (scale.value < SCALE_FLOOR) * SCALE_FLOOR
    return ad.reshape(scale, (-1, 1, 1, 1))


def reconstruct(x_hat: ad.Operand, net: ReconNet) -> ad.Node:
    """
    x_tilde = A_w(x_hat) for a (B, 2, H, W) zero-filled image.

    Returns:
        (B, 1, H, W) real image node; no data-consistency projection is applied

    Raises:
        ShapeError: If the grid is not 2-channel or too small for four poolings
    """
    x_hat = ad.as_node(x_hat)
    if x_hat.ndim != 4 or x_hat.shape[1] != 2:
        raise ShapeError(f"reconstruct expects (B, 2, H, W), got {x_hat.shape}")
    height, width = x_hat.shape[-2:]
    if height < MIN_EXTENT or width < MIN_EXTENT or height % MIN_EXTENT or width % MIN_EXTENT:
        raise ShapeError(f"reconstruct needs extents divisible by {MIN_EXTENT}, got {height}x{width}")
    scale = input_scale(x_hat)
    return net.unet(x_hat / scale) * scale
