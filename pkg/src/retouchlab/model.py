"""The two-branch region-aware retouching network.

Automatic branch: textural stem -> three encoding blocks + multiscale
region extractor -> feature fusion -> three decoding blocks -> mask-gated
residual added back onto the input image.

Interactive branch: rasterized click maps are encoded to a priority
condition vector, matched against the encoder's region attention through a
cosine correspondence matrix, propagated into a region-specified feature,
and decoded jointly with the region-aware feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as tc
from .blocks import (LEAKY_SLOPE, Cbam, Conv2d, EncodingBlock, DecodingBlock,
                     Module, RegionExtractor)
from .errors import InvalidInputError, ShapeError
from .guidance import ClickSet, rasterize
from .tensor import Tensor

ENCODER_WIDTHS = (16, 32, 64)
DECODER_WIDTHS = (32, 16, 8)  # full-resolution tail kept narrow for CPU speed
FT_CHANNELS = 8
REGION_CHANNELS = 64  # latent width at 1/8 resolution
GUIDE_WIDTHS = (16, 32, 64)


@dataclass
class LatentBundle:
    """Intermediate features of one forward pass."""

    f_t: Tensor = None
    f_en: List[Tensor] = field(default_factory=list)
    attention: Tensor = None          # third encoding block, CBAM-refined
    scales: List[Tensor] = field(default_factory=list)  # f2, f4, f8, f16
    f_r: Tensor = None
    z: Optional[Tensor] = None        # [N, hw, C]
    corr: Optional[Tensor] = None     # per-sample stack [N, hw, hw]
    f_s: Optional[Tensor] = None
    f_y: Optional[Tensor] = None
    mask: Optional[Tensor] = None


@dataclass
class ModelOutput:
    image: Tensor
    mask: Tensor
    bundle: LatentBundle


def correspondence_matrix(f_r: Tensor, attention: Tensor) -> Tensor:
    """Pairwise cosine similarity between flattened feature columns.

    Both inputs are [C,H,W] (single sample). Returns [HW, HW] where entry
    (i, j) compares position i of the region-aware feature with position j
    of the attention feature. Zero-norm columns compare as 0.
    """
    if f_r.shape != attention.shape:
        raise ShapeError(f"feature/attention shapes differ: {f_r.shape} vs "
                         f"{attention.shape}")
    if f_r.ndim != 3:
        raise ShapeError(f"expected [C,H,W] per-sample features, got {f_r.shape}")
    c = f_r.shape[0]
    hw = f_r.shape[1] * f_r.shape[2]
    fr = tc.reshape(f_r, (c, hw))
    at = tc.reshape(attention, (c, hw))
    fr_n = tc.div(fr, tc.clamp(tc.l2_norm(fr, axis=0, keepdims=True), lo=1e-8))
    at_n = tc.div(at, tc.clamp(tc.l2_norm(at, axis=0, keepdims=True), lo=1e-8))
    return tc.matmul(tc.permute(fr_n, (1, 0)), at_n)


def propagate(corr: Tensor, z: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax-weighted retrieval of condition rows: [HW,HW] x [HW,C] -> [HW,C]."""
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1]:
        raise ShapeError(f"correspondence matrix must be square, got {corr.shape}")
    if z.ndim != 2 or z.shape[0] != corr.shape[1]:
        raise ShapeError(f"condition vector {z.shape} incompatible with {corr.shape}")
    weights = tc.softmax(corr, axis=1, temperature=temperature)
    return tc.matmul(weights, z)


class _GuidanceEncoder(Module):
    def __init__(self, *, rng, dtype):
        w = GUIDE_WIDTHS
        self.conv1 = Conv2d(2, w[0], 3, 2, 1, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(w[0], w[1], 3, 2, 1, rng=rng, dtype=dtype)
        self.conv3 = Conv2d(w[1], w[2], 3, 2, 1, rng=rng, dtype=dtype)

    def __call__(self, guide: Tensor) -> Tensor:
        h = self.conv1(guide, leaky=LEAKY_SLOPE)
        h = self.conv2(h, leaky=LEAKY_SLOPE)
        h = self.conv3(h)
        n, c, hh, ww = h.shape
        return tc.reshape(tc.permute(h, (0, 2, 3, 1)), (n, hh * ww, c))


class _Fusion(Module):
    def __init__(self, *, rng, dtype):
        quarter = REGION_CHANNELS // 4
        w = RegionExtractor.WIDTHS
        self.proj2 = Conv2d(w[0], quarter, 1, 1, 0, rng=rng, dtype=dtype)
        self.proj4 = Conv2d(w[1], quarter, 1, 1, 0, rng=rng, dtype=dtype)
        self.proj8 = Conv2d(w[2], quarter, 1, 1, 0, rng=rng, dtype=dtype)
        self.proj16 = Conv2d(w[3], quarter, 1, 1, 0, rng=rng, dtype=dtype)
        self.proj_sem = Conv2d(ENCODER_WIDTHS[2], REGION_CHANNELS, 1, 1, 0,
                               rng=rng, dtype=dtype)
        self.out = Conv2d(REGION_CHANNELS * 2, REGION_CHANNELS, 3, 1, 1,
                          rng=rng, dtype=dtype)

    def __call__(self, scales: List[Tensor], semantic: Tensor) -> Tensor:
        if any(s.shape[0] != semantic.shape[0] for s in scales):
            raise ShapeError("fusion inputs come from different batches")
        th, tw = semantic.shape[2], semantic.shape[3]
        parts = [tc.bilinear_resize(p(s), th, tw)
                 for p, s in zip((self.proj2, self.proj4, self.proj8, self.proj16),
                                 scales)]
        parts.append(self.proj_sem(semantic))
        return self.out(tc.concat(parts, axis=1))


class _Decoder(Module):
    def __init__(self, *, rng, dtype):
        w = DECODER_WIDTHS
        self.block1 = DecodingBlock(REGION_CHANNELS, w[0], FT_CHANNELS, rng=rng, dtype=dtype)
        self.block2 = DecodingBlock(w[0], w[1], FT_CHANNELS, rng=rng, dtype=dtype)
        self.block3 = DecodingBlock(w[1], w[2], FT_CHANNELS, rng=rng, dtype=dtype)
        self.residual = Conv2d(w[2], 3, 3, 1, 1, rng=rng, dtype=dtype)

    def run_blocks(self, h: Tensor, f_t: Tensor) -> Tensor:
        h, _ = self.block1(h, f_t)
        h, _ = self.block2(h, f_t)
        f_y, _ = self.block3(h, f_t)
        return f_y


class RetouchNet(Module):
    """Both branches over one shared parameter set."""

    def __init__(self, seed: int = 0, dtype=np.float32, temperature: float = 1.0):
        rng = np.random.default_rng(seed)
        w = ENCODER_WIDTHS
        self.stem = Conv2d(3, FT_CHANNELS, 3, 1, 1, rng=rng, dtype=dtype)
        self.block1 = EncodingBlock(FT_CHANNELS, w[0], FT_CHANNELS, rng=rng, dtype=dtype)
        self.block2 = EncodingBlock(w[0], w[1], FT_CHANNELS, rng=rng, dtype=dtype)
        self.block3 = EncodingBlock(w[1], w[2], FT_CHANNELS, rng=rng, dtype=dtype)
        self.extractor = RegionExtractor(rng=rng, dtype=dtype)
        self.fusion = _Fusion(rng=rng, dtype=dtype)
        self.decoder = _Decoder(rng=rng, dtype=dtype)
        self.maskhead = Conv2d(DECODER_WIDTHS[2], 1, 3, 1, 1, rng=rng, dtype=dtype)
        self.it_encoder = _GuidanceEncoder(rng=rng, dtype=dtype)
        self.it_reduce = Conv2d(REGION_CHANNELS * 2, REGION_CHANNELS, 1, 1, 0,
                                rng=rng, dtype=dtype)
        self.dtype = dtype
        self.temperature = temperature

    # -- parameter namespace -------------------------------------------------
    _PREFIXES = (
        ("stem", "encoder.stem"),
        ("block1", "encoder.block1"),
        ("block2", "encoder.block2"),
        ("block3", "encoder.block3"),
        ("extractor", "extractor"),
        ("fusion", "fusion"),
        ("decoder", "decoder"),
        ("maskhead", "maskhead"),
        ("it_encoder", "it.encoder"),
        ("it_reduce", "it.reduce"),
    )

    def named_parameters(self, prefix: str = ""):
        for attr, ns in self._PREFIXES:
            child = getattr(self, attr)
            if isinstance(child, Tensor):
                yield f"{prefix}{ns}", child
            else:
                yield from child.named_parameters(f"{prefix}{ns}.")

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(f"checkpoint mismatch: missing {missing[:4]}, "
                             f"unexpected {unexpected[:4]}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=t.dtype)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter '{name}': checkpoint shape {arr.shape} "
                                 f"!= model shape {t.shape}")
            t.data = arr.copy()
            t.grad = None

    # -- forward pieces -------------------------------------------------------
    def _validate_image(self, image: Tensor) -> None:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected [N,3,H,W] image, got {image.shape}")
        if image.shape[2] % 16 or image.shape[3] % 16:
            raise ShapeError(f"spatial size {image.shape[2]}x{image.shape[3]} "
                             "must be divisible by 16")
        lo, hi = float(image.data.min()), float(image.data.max())
        if lo < -1e-6 or hi > 1.0 + 1e-6:
            raise InvalidInputError(f"image values outside [0,1]: [{lo}, {hi}]")

    def encode(self, image: Tensor) -> LatentBundle:
        self._validate_image(image)
        b = LatentBundle()
        b.f_t = self.stem(image, leaky=LEAKY_SLOPE)
        f1, _ = self.block1(b.f_t, b.f_t)
        f2, _ = self.block2(f1, b.f_t)
        f3, _ = self.block3(f2, b.f_t)
        b.f_en = [f1, f2, f3]
        b.attention = f3  # third block's CBAM-refined feature
        b.scales = self.extractor(image)
        b.f_r = self.fusion(b.scales, f3)
        return b

    def encode_guidance(self, positive: Tensor, negative: Tensor) -> Tensor:
        for g in (positive, negative):
            vals = np.unique(g.data)
            if not np.isin(vals, (0.0, 1.0)).all():
                raise InvalidInputError("guidance maps must be binary")
        return self.it_encoder(tc.concat([positive, negative], axis=1))

    def select_region(self, bundle: LatentBundle, z: Tensor) -> Tensor:
        """Per-sample region selection: condition rows routed by correspondence."""
        n, c, h, w = bundle.f_r.shape
        outs = []
        corrs = []
        for i in range(n):
            f_r_i = tc.reshape(tc.narrow(bundle.f_r, 0, i, 1), (c, h, w))
            at_i = tc.reshape(tc.narrow(bundle.attention, 0, i, 1), (c, h, w))
            z_i = tc.reshape(tc.narrow(z, 0, i, 1), (h * w, c))
            corr = correspondence_matrix(f_r_i, at_i)
            fs_flat = propagate(corr, z_i, self.temperature)
            fs = tc.permute(tc.reshape(fs_flat, (h, w, c)), (2, 0, 1))
            outs.append(tc.reshape(fs, (1, c, h, w)))
            corrs.append(corr)
        bundle.corr = corrs[0] if n == 1 else None
        return tc.concat(outs, axis=0) if n > 1 else outs[0]

    def decode(self, f_r: Tensor, f_t: Tensor, image: Tensor,
               f_s: Optional[Tensor] = None,
               bundle: Optional[LatentBundle] = None) -> ModelOutput:
        if f_t is None:
            raise ValueError("decode requires the textural feature f_t")
        if f_s is not None:
            if f_s.shape != f_r.shape:
                raise ShapeError(f"region-specified feature {f_s.shape} must match "
                                 f"f_r {f_r.shape}")
            h = self.it_reduce(tc.concat([f_r, f_s], axis=1))
        else:
            h = f_r
        # the last block's CBAM-refined feature doubles as its region attention
        f_y = self.decoder.run_blocks(h, f_t)
        mask = tc.sigmoid(self.maskhead(f_y))
        residual = self.decoder.residual(f_y * mask)
        out = tc.clamp(image + residual, 0.0, 1.0)
        b = bundle if bundle is not None else LatentBundle(f_t=f_t, f_r=f_r)
        b.f_s = f_s
        b.f_y = f_y
        b.mask = mask
        return ModelOutput(image=out, mask=mask, bundle=b)

    # -- branches --------------------------------------------------------------
    def forward_automatic(self, image: Tensor) -> ModelOutput:
        b = self.encode(image)
        return self.decode(b.f_r, b.f_t, image, bundle=b)

    def forward_interactive(self, image: Tensor, clicks: ClickSet) -> ModelOutput:
        b = self.encode(image)
        n, _, h, w = image.shape
        gp, gn = rasterize(clicks, h, w)
        ones = np.ones((n, 1, 1, 1), dtype=self.dtype)
        g_p = Tensor(ones * gp.astype(self.dtype))
        g_n = Tensor(ones * gn.astype(self.dtype))
        b.z = self.encode_guidance(g_p, g_n)
        f_s = self.select_region(b, b.z)
        return self.decode(b.f_r, b.f_t, image, f_s=f_s, bundle=b)

    def forward_interactive_maps(self, image: Tensor, g_p: Tensor,
                                 g_n: Tensor) -> ModelOutput:
        """Interactive pass with pre-rasterized per-sample guidance maps."""
        b = self.encode(image)
        b.z = self.encode_guidance(g_p, g_n)
        f_s = self.select_region(b, b.z)
        return self.decode(b.f_r, b.f_t, image, f_s=f_s, bundle=b)
