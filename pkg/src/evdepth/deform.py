"""Modulated deformable convolution with bilinear fractional sampling.

Two regimes are supported: identity modulation (offset-only pixel
redistribution, used on the encoder side) and learned sigmoid modulation
(used on the decoder side). Offsets are a ``[2K,H,W]`` field of
``(dy_k, dx_k)`` pairs, taps enumerated row-major; modulation is ``[K,H,W]``.
Out-of-bounds samples contribute zero, matching zero-padded convolution, so
zero offsets with unit modulation reproduce ``conv2d(..., pad=k//2)`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .autodiff import Variable, _make, as_variable


@dataclass(frozen=True)
class DeformKernelConfig:
    """Tap geometry of a deformable kernel (stride 1, dilation 1)."""

    kh: int = 3
    kw: int = 3

    def __post_init__(self):
        if self.kh % 2 == 0 or self.kw % 2 == 0:
            raise ValueError(f"deformable kernel extents must be odd, got {self.kh}x{self.kw}")

    @property
    def taps(self) -> int:
        return self.kh * self.kw

    def base_offsets(self) -> np.ndarray:
        """Regular-grid tap offsets [(dy,dx), ...] in row-major order, shape [K,2]."""
        half_h, half_w = self.kh // 2, self.kw // 2
        grid = [(ki - half_h, kj - half_w) for ki in range(self.kh) for kj in range(self.kw)]
        return np.asarray(grid, dtype=np.float64)


def _corner_geometry(py: np.ndarray, px: np.ndarray, h: int, w: int):
    """Floor corners, interpolation weights and in-bounds masks for 4 neighbors.

    Returns (flat_idx[4,...], weight[4,...], mask[4,...]) with indices clipped
    into range; the mask zeroes contributions from outside [0,h-1]x[0,w-1].
    """
    y0 = np.floor(py)
    x0 = np.floor(px)
    fy = py - y0
    fx = px - x0
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)
    y1i = y0i + 1
    x1i = x0i + 1

    corners = ((y0i, x0i, (1.0 - fy) * (1.0 - fx)),
               (y0i, x1i, (1.0 - fy) * fx),
               (y1i, x0i, fy * (1.0 - fx)),
               (y1i, x1i, fy * fx))
    idx, wgt, msk = [], [], []
    for yc, xc, wc in corners:
        inside = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        flat = np.clip(yc, 0, h - 1) * w + np.clip(xc, 0, w - 1)
        idx.append(flat)
        wgt.append(wc)
        msk.append(inside.astype(wc.dtype))
    return np.stack(idx), np.stack(wgt), np.stack(msk)


def _corner_matrix(corner_idx: np.ndarray, corner_data: np.ndarray,
                   n: int, p: int) -> sparse.csr_matrix:
    """CSR [N, P] with one 4-entry row per sample: the bilinear gather as a
    sparse operator, so gather = M @ x.T and scatter = grad @ M."""
    indptr = np.arange(0, 4 * n + 4, 4, dtype=np.int32)
    return sparse.csr_matrix((corner_data.ravel(), corner_idx.ravel(), indptr),
                             shape=(n, p))


def bilinear_sample(x, py: float, px: float) -> Variable:
    """Sample a [C,H,W] tensor at one fractional location (py, px).

    Locations outside the image contribute zero (zero-padding semantics).
    ``py``/``px`` may be floats or scalar Variables; the result is
    differentiable with respect to both the image and the location.
    """
    x = as_variable(x)
    if x.data.ndim != 3:
        raise ValueError(f"bilinear_sample needs [C,H,W], got {x.shape}")
    pyv = as_variable(py)
    pxv = as_variable(px)
    if pyv.data.size != 1 or pxv.data.size != 1:
        raise ValueError("sample location must be scalar")
    c, h, w = x.shape
    pos_y = np.asarray(pyv.data.item(), dtype=x.dtype).reshape(1)
    pos_x = np.asarray(pxv.data.item(), dtype=x.dtype).reshape(1)
    idx, wgt, msk = _corner_geometry(pos_y, pos_x, h, w)
    vals = x.data.reshape(c, -1)[:, idx[:, 0]]          # [C,4]
    eff = (wgt * msk)[:, 0]                             # [4]
    out = vals @ eff

    fy = pos_y - np.floor(pos_y)
    fx = pos_x - np.floor(pos_x)
    dw_dy = np.asarray([-(1.0 - fx[0]), -fx[0], (1.0 - fx[0]), fx[0]], dtype=x.dtype)
    dw_dx = np.asarray([-(1.0 - fy[0]), (1.0 - fy[0]), -fy[0], fy[0]], dtype=x.dtype)

    def bwd(g):
        gx = np.zeros_like(x.data).reshape(c, -1)
        np.add.at(gx, (slice(None), idx[:, 0]), g[:, None] * eff[None, :])
        gpy = (g * (vals @ (dw_dy * msk[:, 0]))).sum()
        gpx = (g * (vals @ (dw_dx * msk[:, 0]))).sum()
        return (gx.reshape(x.shape),
                np.asarray(gpy).reshape(pyv.shape),
                np.asarray(gpx).reshape(pxv.shape))

    return _make(out, (x, pyv, pxv), bwd)


def deform_conv2d(x, w, offsets, modulation) -> Variable:
    """Eq.-style modulated deformable convolution over [C,H,W].

    out[o,p] = sum_k w[o,:,k] . x(p + p_k + dp_k) * m_k(p), with bilinear
    sampling at fractional positions and zero contribution outside the image.
    Gradients flow to x, w, offsets and (when it is a Variable) modulation.
    """
    x, w = as_variable(x), as_variable(w)
    off = as_variable(offsets)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError(f"deform_conv2d needs x[C,H,W], w[Co,C,kh,kw]; got {x.shape}, {w.shape}")
    c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"kernel expects {ci} input channels, x has {c}")
    cfg = DeformKernelConfig(kh, kw)
    k = cfg.taps
    if off.shape != (2 * k, h, wd):
        raise ValueError(f"offsets shape {off.shape} != ({2 * k}, {h}, {wd})")
    if isinstance(modulation, Variable) or isinstance(modulation, np.ndarray):
        mod = as_variable(modulation)
        if mod.shape != (k, h, wd):
            raise ValueError(f"modulation shape {mod.shape} != ({k}, {h}, {wd})")
    else:
        raise ValueError("modulation must be a [K,H,W] array or Variable")

    p = h * wd
    n = k * p
    base = cfg.base_offsets().astype(x.dtype)
    grid_y, grid_x = np.meshgrid(np.arange(h, dtype=x.dtype),
                                 np.arange(wd, dtype=x.dtype), indexing="ij")
    off_k = off.data.reshape(k, 2, p)
    py = (grid_y.reshape(1, p) + base[:, 0:1] + off_k[:, 0, :]).reshape(n)
    px = (grid_x.reshape(1, p) + base[:, 1:2] + off_k[:, 1, :]).reshape(n)

    y0 = np.floor(py)
    x0 = np.floor(px)
    fy = (py - y0).astype(x.dtype)
    fx = (px - x0).astype(x.dtype)
    y0i = y0.astype(np.int32)
    x0i = x0.astype(np.int32)

    # per-corner clipped flat indices, bilinear weights, in-bounds masks;
    # packed [N,4] so .ravel() feeds the CSR without a transpose copy
    idx = np.empty((n, 4), dtype=np.int32)
    eff = np.empty((n, 4), dtype=x.dtype)
    msk = np.empty((n, 4), dtype=x.dtype)
    corner_off = ((0, 0), (0, 1), (1, 0), (1, 1))
    wgt_terms = ((1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx,
                 fy * (1.0 - fx), fy * fx)
    for q, (dy, dx) in enumerate(corner_off):
        yc = y0i + dy
        xc = x0i + dx
        inside = ((yc >= 0) & (yc < h) & (xc >= 0) & (xc < wd)).astype(x.dtype)
        idx[:, q] = np.clip(yc, 0, h - 1) * wd + np.clip(xc, 0, wd - 1)
        msk[:, q] = inside
        eff[:, q] = wgt_terms[q] * inside

    gather = _corner_matrix(idx, eff, n, p)
    xt = np.ascontiguousarray(x.data.reshape(c, p).T)   # [P, C] row-major gathers
    samples = np.ascontiguousarray((gather @ xt).T)     # [C, N]

    modf = mod.data.reshape(1, k, p)
    identity_mod = not mod.requires_grad and np.all(mod.data == 1.0)
    if identity_mod:
        cols = samples.reshape(c * k, p)
    else:
        cols = (samples.reshape(c, k, p) * modf).reshape(c * k, p)
    w2 = w.data.reshape(co, c * k)
    out = (w2 @ cols).reshape(co, h, wd)

    def bwd(g):
        g2 = g.reshape(co, p)
        gw = (g2 @ cols.T).reshape(w.shape)
        gsm = (w2.T @ g2).reshape(c, k, p)          # grad wrt samples*mod
        if identity_mod:
            gs = gsm.reshape(c, n)
            gmod = None
        else:
            gs = (gsm * modf).reshape(c, n)         # grad wrt raw samples
            gmod = ((gsm * samples.reshape(c, k, p)).sum(axis=0).reshape(k, h, wd)
                    if mod.requires_grad else None)

        # image gradient: adjoint of the gather, one sparse product
        gx = None
        if x.requires_grad:
            gx = np.asarray(gs @ gather).astype(x.dtype, copy=False).reshape(x.shape)

        # offset gradient: d(weight)/dpos folded into two more sparse gathers
        goff = None
        if off.requires_grad:
            ddy = np.empty((n, 4), dtype=x.dtype)
            ddx = np.empty((n, 4), dtype=x.dtype)
            ddy[:, 0] = -(1.0 - fx)
            ddy[:, 1] = -fx
            ddy[:, 2] = (1.0 - fx)
            ddy[:, 3] = fx
            ddx[:, 0] = -(1.0 - fy)
            ddx[:, 1] = (1.0 - fy)
            ddx[:, 2] = -fy
            ddx[:, 3] = fy
            ddy *= msk
            ddx *= msk
            gst = np.ascontiguousarray(gs.T)            # [N, C]
            u_y = _corner_matrix(idx, ddy, n, p) @ xt   # [N, C]
            u_x = _corner_matrix(idx, ddx, n, p) @ xt
            gpy = np.einsum("nc,nc->n", gst, u_y)
            gpx = np.einsum("nc,nc->n", gst, u_x)
            goff = np.stack([gpy.reshape(k, p), gpx.reshape(k, p)],
                            axis=1).reshape(2 * k, h, wd).astype(off.data.dtype, copy=False)

        return gx, gw, goff, gmod

    return _make(out, (x, w, off, mod), bwd)


def ema_redistribute(x, w, offsets) -> Variable:
    """Offset-only deformable convolution: modulation pinned to ones."""
    x = as_variable(x)
    co, ci, kh, kw = as_variable(w).shape
    k = kh * kw
    ones = np.ones((k,) + x.shape[1:], dtype=x.dtype)
    return deform_conv2d(x, w, offsets, ones)
