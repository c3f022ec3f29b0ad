"""Reusable network blocks: half-instance norm, CBAM attention, encoding and
decoding blocks, and the multiscale potential-region extractor.

All blocks are pure functions of (parameters, inputs): no hidden state, so
concurrent forward passes may share one parameter snapshot read-only.
"""

from __future__ import annotations

import math
from typing import Iterator, Tuple

import numpy as np

from . import tensor as tc
from .errors import ShapeError
from .tensor import Tensor

LEAKY_SLOPE = 0.2
HIN_EPS = 1e-5
CBAM_REDUCTION = 4


class Module:
    """Parameter container; children are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield f"{prefix}{key}", val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def _conv_weight(rng: np.random.Generator, shape, fan_in, dtype,
                 gain: float | None = None) -> Tensor:
    if gain is None:
        gain = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2))
    std = gain / math.sqrt(fan_in)
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=0, *, rng, dtype=np.float32):
        self.weight = _conv_weight(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.bias = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor, leaky: float | None = None) -> Tensor:
        return tc.conv2d(x, self.weight, self.bias, self.stride, self.padding,
                         leaky=leaky)


class ConvTranspose2d(Module):
    """Stride-2 upsampling head; weight layout [cin, cout, k, k]."""

    def __init__(self, cin, cout, k, stride=2, padding=0, *, rng, dtype=np.float32):
        self.weight = _conv_weight(rng, (cin, cout, k, k), cin * k * k, dtype)
        self.bias = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor, leaky: float | None = None) -> Tensor:
        return tc.conv_transpose2d(x, self.weight, self.bias, self.stride,
                                   self.padding, leaky=leaky)


class HalfInstanceNorm(Module):
    """Instance-normalize the first half of the channels, pass the rest."""

    def __init__(self, channels, *, dtype=np.float32):
        if channels % 2 != 0:
            raise ShapeError(f"half instance norm needs even channels, got {channels}")
        half = channels // 2
        self.scale = Tensor(np.ones(half), requires_grad=True, dtype=dtype)
        self.shift = Tensor(np.zeros(half), requires_grad=True, dtype=dtype)
        self.channels = channels

    def __call__(self, x: Tensor, leaky: float | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected [N,{self.channels},H,W], got {x.shape}")
        return tc.half_instance_norm(x, self.scale, self.shift, HIN_EPS, leaky=leaky)


class Cbam(Module):
    """Channel-then-spatial attention; exposes the spatial map."""

    def __init__(self, channels, reduction=CBAM_REDUCTION, *, rng, dtype=np.float32):
        if channels < reduction:
            raise ValueError(f"cbam needs channels >= {reduction}, got {channels}")
        hidden = channels // reduction
        g = math.sqrt(2.0)
        self.fc1_w = _conv_weight(rng, (channels, hidden), channels, dtype, gain=g)
        self.fc1_b = Tensor(np.zeros(hidden), requires_grad=True, dtype=dtype)
        self.fc2_w = _conv_weight(rng, (hidden, channels), hidden, dtype, gain=g)
        self.fc2_b = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.spatial = Conv2d(2, 1, 7, 1, 3, rng=rng, dtype=dtype)
        self.channels = channels

    def _mlp(self, v: Tensor) -> Tensor:
        h = tc.relu(tc.matmul(v, self.fc1_w) + self.fc1_b)
        return tc.matmul(h, self.fc2_w) + self.fc2_b

    def __call__(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"cbam built for {self.channels} channels, got {c}")
        avg = tc.reshape(tc.global_avg_pool(x), (n, c))
        mx = tc.reshape(tc.global_max_pool(x), (n, c))
        chan = tc.sigmoid(self._mlp(avg) + self._mlp(mx))
        xc = x * tc.reshape(chan, (n, c, 1, 1))
        savg = tc.tmean(xc, axis=1, keepdims=True)
        smax = tc.amax(xc, axis=1, keepdims=True)
        spat = tc.sigmoid(self.spatial(tc.concat([savg, smax], axis=1)))
        return xc * spat, spat


class EncodingBlock(Module):
    """Stride-2 head, half-instance norm, then a CBAM-integrated ResBlock.

    The textural feature is resized to the block's resolution and joined by
    channel concatenation ahead of the ResBlock. The CBAM-refined feature is
    both the block output and its region attention.
    """

    def __init__(self, cin, cout, ft_channels, *, rng, dtype=np.float32):
        self.head = Conv2d(cin, cout, 3, 2, 1, rng=rng, dtype=dtype)
        self.norm = HalfInstanceNorm(cout, dtype=dtype)
        self.conv1 = Conv2d(cout + ft_channels, cout, 3, 1, 1, rng=rng, dtype=dtype)
        self.norm1 = HalfInstanceNorm(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng=rng, dtype=dtype)
        self.cbam = Cbam(cout, rng=rng, dtype=dtype)

    def _res_and_attend(self, h: Tensor, f_t: Tensor) -> Tuple[Tensor, Tensor]:
        if f_t.shape[2] < h.shape[2] or f_t.shape[3] < h.shape[3]:
            raise ShapeError(f"textural feature {f_t.shape} smaller than block "
                             f"feature {h.shape}")
        ft = tc.bilinear_resize(f_t, h.shape[2], h.shape[3])
        r = self.conv2(self.norm1(self.conv1(tc.concat([h, ft], axis=1)),
                                  leaky=LEAKY_SLOPE))
        refined, spat = self.cbam(h + r)
        return refined, spat

    def __call__(self, f_prev: Tensor, f_t: Tensor) -> Tuple[Tensor, Tensor]:
        h = self.norm(self.head(f_prev), leaky=LEAKY_SLOPE)
        return self._res_and_attend(h, f_t)


class DecodingBlock(EncodingBlock):
    """Encoding block with the head replaced by a stride-2 transposed conv."""

    def __init__(self, cin, cout, ft_channels, *, rng, dtype=np.float32):
        self.head = ConvTranspose2d(cin, cout, 2, 2, 0, rng=rng, dtype=dtype)
        self.norm = HalfInstanceNorm(cout, dtype=dtype)
        self.conv1 = Conv2d(cout + ft_channels, cout, 3, 1, 1, rng=rng, dtype=dtype)
        self.norm1 = HalfInstanceNorm(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng=rng, dtype=dtype)
        self.cbam = Cbam(cout, rng=rng, dtype=dtype)


class _ResStage(Module):
    def __init__(self, cin, cout, *, rng, dtype):
        self.down = Conv2d(cin, cout, 3, 2, 1, rng=rng, dtype=dtype)
        self.conv1 = Conv2d(cout, cout, 3, 1, 1, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.down(x, leaky=LEAKY_SLOPE)
        return tc.leaky_relu(h + self.conv2(self.conv1(h, leaky=LEAKY_SLOPE)),
                             LEAKY_SLOPE)


class RegionExtractor(Module):
    """Multiscale region-candidate pyramid at downscale factors 2/4/8/16."""

    WIDTHS = (16, 32, 64, 128)

    def __init__(self, *, rng, dtype=np.float32):
        w = self.WIDTHS
        self.stem = Conv2d(3, w[0], 3, 2, 1, rng=rng, dtype=dtype)
        self.stage1 = _ResStage(w[0], w[1], rng=rng, dtype=dtype)
        self.stage2 = _ResStage(w[1], w[2], rng=rng, dtype=dtype)
        self.stage3 = _ResStage(w[2], w[3], rng=rng, dtype=dtype)

    def __call__(self, image: Tensor):
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected [N,3,H,W] image, got {image.shape}")
        if image.shape[2] % 16 or image.shape[3] % 16:
            raise ShapeError(f"spatial size {image.shape[2]}x{image.shape[3]} "
                             "must be divisible by 16")
        f2 = self.stem(image, leaky=LEAKY_SLOPE)
        f4 = self.stage1(f2)
        f8 = self.stage2(f4)
        f16 = self.stage3(f8)
        return [f2, f4, f8, f16]
