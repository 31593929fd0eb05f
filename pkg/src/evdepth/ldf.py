"""Local depth filtering: decoder-side deformable refinement gated by an
event-derived motion mask, plus the motion-aware loss.

The block predicts offsets and sigmoid modulation jointly from the depth and
event features, filters the depth feature deformably, and blends filtered
against original depth through a single-channel mask computed from events
alone. The mask's mean-threshold binarization is a stop-gradient constant:
the loss trains the depth path, the mask path trains through the blend.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .deform import deform_conv2d
from .layers import ConvParams, conv_init, kernel_init, scalar_param


@dataclass
class LdfStageParams:
    td: ConvParams              # depth transform, C -> C
    te: ConvParams              # event transform, C -> C
    head: ConvParams            # offsets + modulation logits, C -> 3K, zero-init
    kernel: Variable            # deformable filtering kernel, C -> C
    mask_conv: ConvParams       # event -> single-channel mask logits, zero-init
    h_conv: ConvParams          # single-channel projection inside the loss
    beta: Variable              # event contribution into the offset branch

    def named(self, prefix: str) -> Iterator[tuple[str, Variable]]:
        for sub in ("td", "te", "head", "mask_conv", "h_conv"):
            yield from getattr(self, sub).named(f"{prefix}.{sub}")
        yield f"{prefix}.kernel", self.kernel
        yield f"{prefix}.beta", self.beta


def init_ldf_stage(rng: np.random.Generator, channels: int, taps: int = 9,
                   dtype=np.float32) -> LdfStageParams:
    c = channels
    return LdfStageParams(
        td=conv_init(rng, c, c, dtype=dtype),
        te=conv_init(rng, c, c, dtype=dtype),
        head=conv_init(rng, 3 * taps, c, zero=True, dtype=dtype),
        kernel=kernel_init(rng, c, c, dtype=dtype),
        mask_conv=conv_init(rng, 1, c, zero=True, dtype=dtype),
        h_conv=conv_init(rng, 1, c, dtype=dtype),
        beta=scalar_param(0.0, dtype=dtype),
    )


def gated_update(depth, filtered, mask) -> Variable:
    """Blend m*filtered + (1-m)*depth with a [1,H,W] mask broadcast over C."""
    keep = ad.sub(1.0, mask)
    return ad.add(ad.mul(mask, filtered), ad.mul(keep, depth))


def ldf_forward(feat_depth, feat_event, params: LdfStageParams, taps: int = 9,
                use_event: bool = True) -> tuple[Variable, Variable]:
    """Refine a [C,H,W] depth feature; returns (refined, motion mask).

    With ``use_event=False`` the offsets/modulation come from the depth
    feature alone and no mask gating is applied (plain learned-modulation
    deformable filtering); the returned mask is None in that case.
    """
    if feat_depth.data.ndim != 3:
        raise ValueError(f"ldf_forward needs [C,H,W] depth features, got {feat_depth.shape}")
    q = params.td.apply(feat_depth)
    if use_event:
        if feat_event.shape != feat_depth.shape:
            raise ValueError(f"event feature shape {feat_event.shape} != {feat_depth.shape}")
        q = ad.add(q, ad.mul(params.beta, params.te.apply(feat_event)))
    head = params.head.apply(q)
    offsets = ad.slice_channels(head, 0, 2 * taps)
    modulation = ad.sigmoid(ad.slice_channels(head, 2 * taps, 3 * taps))
    filtered = deform_conv2d(feat_depth, params.kernel, offsets, modulation)
    if not use_event:
        return filtered, None
    mask = ad.sigmoid(params.mask_conv.apply(feat_event))
    return gated_update(feat_depth, filtered, mask), mask


def binarize_mask(mask: np.ndarray) -> np.ndarray:
    """1 where the mask strictly exceeds its spatial mean, else 0.

    Non-differentiable; callers treat the result as a constant.
    """
    m = np.asarray(mask)
    return (m > m.mean()).astype(m.dtype)


def downsample_valid_mean(gt: np.ndarray, factor: int) -> tuple[np.ndarray, np.ndarray]:
    """Block-mean a [1,H,W] ground-truth map over its valid (>0) pixels.

    Returns (downsampled map, validity mask); a block is valid when at least
    one source pixel is valid, and its value is the mean of those pixels.
    """
    _, h, w = gt.shape
    f = int(factor)
    if h % f or w % f:
        raise ValueError(f"ground truth {h}x{w} not divisible by factor {f}")
    blocks = gt.reshape(1, h // f, f, w // f, f)
    valid = (blocks > 0)
    counts = valid.sum(axis=(2, 4))
    sums = np.where(valid, blocks, 0.0).sum(axis=(2, 4))
    with np.errstate(invalid="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return mean.astype(gt.dtype), (counts > 0).astype(gt.dtype)


def motion_loss(refined_stages: list[tuple[Variable, Variable, LdfStageParams, int]],
                gt: np.ndarray) -> Variable:
    """Mean squared mismatch between projected refined depth and downsampled
    ground truth, restricted to binarized-mask pixels.

    Each entry is (refined feature, motion mask, stage params, downsample
    factor to the stage's scale). Pixels count only where the binary mask is
    1 AND the downsampled ground truth block saw a valid source pixel; a
    stage with no such pixels contributes exactly zero.
    """
    dtype = gt.dtype
    total = ad.Variable(np.asarray(0.0, dtype=dtype))
    for refined, mask, params, factor in refined_stages:
        b = binarize_mask(mask.data)
        gt_down, gt_valid = downsample_valid_mean(gt, factor)
        support = (b * gt_valid).astype(refined.data.dtype)
        n = float(support.sum())
        if n == 0:
            continue
        proj = params.h_conv.apply(ad.relu(refined))
        residual = ad.mul(ad.sub(proj, gt_down.astype(refined.data.dtype)), support)
        total = ad.add(total, ad.scalar_mul(ad.l2(residual), 1.0 / n))
    return total
