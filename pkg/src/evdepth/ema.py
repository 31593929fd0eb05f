"""Event-modulated alignment: encoder-side pixel redistribution and the
structure consistency loss.

At each encoder stage the block transforms the image, depth and event
features, mixes the split event halves into the image/depth branches through
zero-initialized scalars, predicts per-branch sampling offsets, redistributes
the raw image/depth features with offset-only deformable convolutions, and
fuses the result. With the scalars and offset heads at their zero init the
whole block collapses to two standard convolutions plus the fusion conv.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .deform import deform_conv2d, ema_redistribute
from .layers import ConvParams, conv_init, kernel_init, scalar_param


@dataclass
class EmaStageParams:
    """Per-stage learnables; K = 9 taps for the 3x3 deformable kernels."""

    t1: ConvParams              # image transform, C -> C
    t2: ConvParams              # event transform, C -> 2C
    t3: ConvParams              # depth transform, C -> C
    t4: ConvParams              # image offset head, C -> 3K, zero-init
    t5: ConvParams              # depth offset head, C -> 3K, zero-init
    t6: ConvParams              # fusion conv, C -> C
    w_img: Variable             # redistribution kernel for the image branch
    w_dep: Variable             # redistribution kernel for the depth branch
    g_conv: ConvParams          # shared single-channel projection for the loss
    alpha: Variable             # event contribution into the image branch
    beta: Variable              # event contribution into the depth branch

    def named(self, prefix: str) -> Iterator[tuple[str, Variable]]:
        for sub in ("t1", "t2", "t3", "t4", "t5", "t6", "g_conv"):
            yield from getattr(self, sub).named(f"{prefix}.{sub}")
        yield f"{prefix}.w_img", self.w_img
        yield f"{prefix}.w_dep", self.w_dep
        yield f"{prefix}.alpha", self.alpha
        yield f"{prefix}.beta", self.beta


def init_ema_stage(rng: np.random.Generator, channels: int, taps: int = 9,
                   dtype=np.float32) -> EmaStageParams:
    c = channels
    return EmaStageParams(
        t1=conv_init(rng, c, c, dtype=dtype),
        t2=conv_init(rng, 2 * c, c, dtype=dtype),
        t3=conv_init(rng, c, c, dtype=dtype),
        t4=conv_init(rng, 3 * taps, c, zero=True, dtype=dtype),
        t5=conv_init(rng, 3 * taps, c, zero=True, dtype=dtype),
        t6=conv_init(rng, c, c, dtype=dtype),
        w_img=kernel_init(rng, c, c, dtype=dtype),
        w_dep=kernel_init(rng, c, c, dtype=dtype),
        g_conv=conv_init(rng, 1, c, dtype=dtype),
        alpha=scalar_param(0.0, dtype=dtype),
        beta=scalar_param(0.0, dtype=dtype),
    )


@dataclass
class EmaOutput:
    fused: Variable             # F_j, same [C,H,W] as the inputs
    aligned_image: Variable     # redistributed image feature
    aligned_depth: Variable     # redistributed depth feature
    offsets_image: Variable     # predicted [2K,H,W] offsets, image branch
    offsets_depth: Variable     # predicted [2K,H,W] offsets, depth branch


def ema_forward(feat_image, feat_depth, feat_event, params: EmaStageParams,
                taps: int = 9, use_event: bool = True,
                use_predicted_modulation: bool = False) -> EmaOutput:
    """Run one alignment stage over same-shape [C,H,W] features.

    ``use_event=False`` drops the event conditioning (self-predicted offsets
    only). ``use_predicted_modulation`` switches the redistribution to the
    sigmoid of the heads' extra K channels instead of identity modulation.
    """
    if feat_image.shape != feat_depth.shape:
        raise ValueError(f"image/depth feature shapes differ: {feat_image.shape} vs {feat_depth.shape}")
    q_img = params.t1.apply(feat_image)
    q_dep = params.t3.apply(feat_depth)
    if use_event:
        if feat_event.shape != feat_image.shape:
            raise ValueError(f"event feature shape {feat_event.shape} != {feat_image.shape}")
        ev = params.t2.apply(feat_event)
        ev_img, ev_dep = ad.split_channels(ev)
        q_img = ad.add(q_img, ad.mul(params.alpha, ev_img))
        q_dep = ad.add(q_dep, ad.mul(params.beta, ev_dep))

    head_img = params.t4.apply(q_img)
    head_dep = params.t5.apply(q_dep)
    off_img = ad.slice_channels(head_img, 0, 2 * taps)
    off_dep = ad.slice_channels(head_dep, 0, 2 * taps)

    if use_predicted_modulation:
        mod_img = ad.sigmoid(ad.slice_channels(head_img, 2 * taps, 3 * taps))
        mod_dep = ad.sigmoid(ad.slice_channels(head_dep, 2 * taps, 3 * taps))
        aligned_img = deform_conv2d(feat_image, params.w_img, off_img, mod_img)
        aligned_dep = deform_conv2d(feat_depth, params.w_dep, off_dep, mod_dep)
    else:
        aligned_img = ema_redistribute(feat_image, params.w_img, off_img)
        aligned_dep = ema_redistribute(feat_depth, params.w_dep, off_dep)

    fused = params.t6.apply(ad.add(aligned_img, aligned_dep))
    return EmaOutput(fused, aligned_img, aligned_dep, off_img, off_dep)


def structure_projection(feat, g_conv: ConvParams) -> Variable:
    """Single-channel projection -> min-max normalization -> forward gradients."""
    return ad.spatial_gradient(ad.minmax_normalize(g_conv.apply(feat)))


def structure_loss(stage_pairs: list[tuple[Variable, Variable, EmaStageParams]]) -> Variable:
    """Sum over stages of the mean squared gradient-map mismatch.

    Each entry is (aligned_image, aligned_depth, stage params); the two
    branches share the stage's single-channel projection. The per-stage
    normalizer is the element count of the gradient map (2*H*W).
    """
    total = None
    for aligned_img, aligned_dep, params in stage_pairs:
        g_img = structure_projection(aligned_img, params.g_conv)
        g_dep = structure_projection(aligned_dep, params.g_conv)
        n = g_img.data.size
        term = ad.scalar_mul(ad.l2(ad.sub(g_img, g_dep)), 1.0 / n)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("structure_loss needs at least one stage")
    return total
