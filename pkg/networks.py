"""
Network building blocks shared by the sampler and the reconstructor.
"""

from typing import Sequence

import numpy as np

import autodiff as ad


class MLP:
    """Fully connected stack with ReLU between layers (none after the last)."""

    def __init__(self, prefix: str, sizes: Sequence[int], rng: np.random.Generator, dtype=np.float32):
        """
        Args:
            prefix: Parameter name prefix, e.g. "sampler.mlp"
            sizes: Layer widths including input and output, e.g. [192, 256, 256, 256, 256, 64]
            rng: Seeded generator for the initial weights
            dtype: Parameter precision
        """
        self.params = ad.Params()
        self.layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            weight = self.params.init_uniform(f"{prefix}.layer{i}.weight", (fan_in, fan_out), fan_in, rng, dtype)
            bias = self.params.init_uniform(f"{prefix}.layer{i}.bias", (fan_out,), fan_in, rng, dtype)
            self.layers.append((weight, bias))

    def __call__(self, x: ad.Node) -> ad.Node:
        for i, (weight, bias) in enumerate(self.layers):
            x = ad.linear(x, weight, bias)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


class ConvBlock:
    """Two 3x3 convolutions, each followed by instance normalization and ReLU."""

    def __init__(self, prefix: str, in_ch: int, out_ch: int, params: ad.Params,
                 rng: np.random.Generator, dtype=np.float32):
        self.conv1 = params.init_uniform(f"{prefix}.conv1.weight", (out_ch, in_ch, 3, 3), in_ch * 9, rng, dtype)
        self.conv2 = params.init_uniform(f"{prefix}.conv2.weight", (out_ch, out_ch, 3, 3), out_ch * 9, rng, dtype)

    def __call__(self, x: ad.Node) -> ad.Node:
        x = ad.relu(ad.instance_norm(ad.conv2d(x, self.conv1, padding=1)))
        return ad.relu(ad.instance_norm(ad.conv2d(x, self.conv2, padding=1)))


class UNet:
    """
    Eight-block UNet: four down blocks (each followed by 2x average pooling)
    and four up blocks (nearest upsampling, skip concatenation, conv block),
    closed by a 1x1 convolution with bias.

    Inputs must have power-of-two spatial extents of at least 16.
    """

    DEPTH = 4

    def __init__(self, prefix: str, in_ch: int, out_ch: int, widths: Sequence[int],
                 rng: np.random.Generator, dtype=np.float32):
        if len(widths) != self.DEPTH:
            raise ValueError(f"UNet needs {self.DEPTH} widths, got {list(widths)}")
        self.params = ad.Params()
        self.down = []
        channels = in_ch
        for i, width in enumerate(widths):
            self.down.append(ConvBlock(f"{prefix}.down{i + 1}", channels, width, self.params, rng, dtype))
            channels = width
        self.up = []
        # up blocks mirror the down path: input = upsampled features + skip of the same level
        for i in reversed(range(self.DEPTH)):
            out_width = widths[i - 1] if i > 0 else widths[0]
            self.up.append(ConvBlock(f"{prefix}.up{i + 1}", channels + widths[i], out_width, self.params, rng, dtype))
            channels = out_width
        self.head = self.params.init_uniform(f"{prefix}.head.weight", (out_ch, channels, 1, 1), channels, rng, dtype)
        self.head_bias = self.params.init_uniform(f"{prefix}.head.bias", (out_ch,), channels, rng, dtype)

    def __call__(self, x: ad.Node) -> ad.Node:
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = ad.avgpool2x(x)
        for block, skip in zip(self.up, reversed(skips)):
            x = block(ad.concat_channels(ad.upsample2x(x), skip))
        return ad.conv2d(x, self.head, self.head_bias)
