"""The finite-difference gradient suite: every primitive, the composed
alignment and filtering blocks, and a small full network, all in float64.

Central differences sit on both sides of any non-smooth point they straddle,
so each case is built to keep a safety margin around the kinks: ReLU and L1
inputs bounded away from zero, sampling positions bounded away from integer
grid lines, min/max extremes unique with a gap, and motion masks bounded away
from their mean. The margins are asserted, not assumed; a failed margin means
the case needs a different seed, not a looser tolerance.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import autodiff as ad
from . import datagen
from .autodiff import Variable
from .deform import bilinear_sample, deform_conv2d, ema_redistribute
from .ema import EmaStageParams, ema_forward, init_ema_stage, structure_loss
from .gradcheck import GradCheckResult, check_gradients
from .ldf import binarize_mask, init_ldf_stage, ldf_forward, motion_loss
from .network import DepthCompletionModel, NetworkConfig

RELU_MARGIN = 2e-3
L1_MARGIN = 2e-2
FRAC_MARGIN = 5e-2
EXTREME_GAP = 2e-3
MASK_GAP = 2e-4


class MarginError(AssertionError):
    pass


@contextlib.contextmanager
def _kink_recorder():
    """Temporarily wrap the kinked primitives to record distance-to-kink."""
    records = {"relu": np.inf, "l1": np.inf, "minmax_gap": np.inf}
    orig_relu, orig_l1, orig_minmax = ad.relu, ad.l1, ad.minmax_normalize

    def relu(x):
        v = ad.as_variable(x).data
        if v.size:
            records["relu"] = min(records["relu"], float(np.abs(v).min()))
        return orig_relu(x)

    def l1(x):
        v = ad.as_variable(x).data
        nz = np.abs(v[v != 0])
        if nz.size:
            records["l1"] = min(records["l1"], float(nz.min()))
        return orig_l1(x)

    def minmax_normalize(x, eps=1e-6):
        v = np.sort(ad.as_variable(x).data.ravel())
        if v.size >= 2:
            gap = float(min(v[1] - v[0], v[-1] - v[-2]))
            records["minmax_gap"] = min(records["minmax_gap"], gap)
        return orig_minmax(x, eps)

    ad.relu, ad.l1, ad.minmax_normalize = relu, l1, minmax_normalize
    try:
        yield records
    finally:
        ad.relu, ad.l1, ad.minmax_normalize = orig_relu, orig_l1, orig_minmax


def _frac_distance(offsets: np.ndarray) -> float:
    """Distance of sampling offsets to the nearest integer grid line."""
    frac = offsets - np.round(offsets)
    return float(np.abs(frac).min()) if offsets.size else np.inf


def _mask_gap(mask: np.ndarray) -> float:
    return float(np.abs(mask - mask.mean()).min())


def _projection(rng: np.random.Generator, shape) -> Variable:
    """Fixed random weights that turn a map into a scalar probe."""
    return Variable(rng.normal(size=shape))


# ---------------------------------------------------------------------------
# primitive cases
# ---------------------------------------------------------------------------

def _case_conv2d():
    rng = np.random.default_rng(11)
    x = Variable(rng.normal(size=(3, 6, 5)), True)
    w = Variable(rng.normal(size=(4, 3, 3, 3)), True)
    b = Variable(rng.normal(size=(4,)), True)
    r1 = _projection(rng, (4, 6, 5))
    r2 = _projection(rng, (4, 3, 3))

    def loss():
        y1 = ad.conv2d(x, w, b, stride=1, pad=1)
        y2 = ad.conv2d(x, w, b, stride=2, pad=1)
        return ad.add(ad.vsum(ad.mul(y1, r1)), ad.vsum(ad.mul(y2, r2)))

    return loss, {"x": x, "w": w, "b": b}


def _case_deconv2d():
    rng = np.random.default_rng(12)
    x = Variable(rng.normal(size=(3, 4, 5)), True)
    w = Variable(rng.normal(size=(3, 2, 2, 2)), True)
    b = Variable(rng.normal(size=(2,)), True)
    r = _projection(rng, (2, 8, 10))

    def loss():
        return ad.vsum(ad.mul(ad.deconv2d(x, w, b), r))

    return loss, {"x": x, "w": w, "b": b}


def _case_elementwise():
    rng = np.random.default_rng(13)
    a = Variable(rng.normal(size=(3, 4, 4)), True)
    b = Variable(rng.normal(size=(3, 4, 4)), True)
    m = Variable(rng.normal(size=(1, 4, 4)), True)
    # keep relu/l1 arguments away from the origin
    signs = rng.choice([-1.0, 1.0], size=(3, 4, 4))
    c = Variable(signs * rng.uniform(0.2, 1.5, size=(3, 4, 4)), True)
    r = _projection(rng, (3, 4, 4))

    def loss():
        mix = ad.add(ad.mul(a, m), ad.sub(ad.scalar_mul(b, 0.7), a))
        smooth = ad.add(ad.mean(ad.sigmoid(mix)), ad.scalar_mul(ad.l2(mix), 0.01))
        kinked = ad.add(ad.scalar_mul(ad.l1(c), 0.05), ad.vsum(ad.mul(ad.relu(c), r)))
        return ad.add(smooth, kinked)

    return loss, {"a": a, "b": b, "m": m, "c": c}


def _case_channel_ops():
    rng = np.random.default_rng(14)
    x = Variable(rng.normal(size=(6, 3, 4)), True)
    r1 = _projection(rng, (3, 3, 4))
    r2 = _projection(rng, (3, 3, 4))
    r3 = _projection(rng, (2, 3, 4))

    def loss():
        first, second = ad.split_channels(x)
        back = ad.concat_channels(ad.mul(first, r1), second)
        probe = ad.vsum(ad.mul(ad.slice_channels(back, 2, 4), r3))
        return ad.add(probe, ad.vsum(ad.mul(second, r2)))

    return loss, {"x": x}


def _case_minmax():
    rng = np.random.default_rng(15)
    vals = rng.normal(size=(1, 5, 5))
    x = Variable(vals, True)
    srt = np.sort(vals.ravel())
    if min(srt[1] - srt[0], srt[-1] - srt[-2]) < EXTREME_GAP:
        raise MarginError("minmax case needs unique extremes")
    r = _projection(rng, (1, 5, 5))

    def loss():
        return ad.vsum(ad.mul(ad.minmax_normalize(x), r))

    return loss, {"x": x}


def _case_spatial_gradient():
    rng = np.random.default_rng(16)
    x = Variable(rng.normal(size=(1, 5, 6)), True)
    r = _projection(rng, (2, 5, 6))

    def loss():
        return ad.vsum(ad.mul(ad.spatial_gradient(x), r))

    return loss, {"x": x}


def _case_avgpool():
    rng = np.random.default_rng(17)
    x = Variable(rng.normal(size=(2, 6, 6)), True)
    r = _projection(rng, (2, 3, 3))

    def loss():
        return ad.vsum(ad.mul(ad.avgpool_down(x, 2), r))

    return loss, {"x": x}


def _case_bilinear_sample():
    rng = np.random.default_rng(18)
    x = Variable(rng.normal(size=(3, 5, 5)), True)
    py = Variable(np.asarray(1.37), True)
    px = Variable(np.asarray(2.61), True)
    r = _projection(rng, (3,))

    def loss():
        return ad.vsum(ad.mul(bilinear_sample(x, py, px), r))

    return loss, {"x": x, "py": py, "px": px}


def _case_deform():
    rng = np.random.default_rng(19)
    x = Variable(rng.normal(size=(2, 5, 5)), True)
    w = Variable(rng.normal(size=(3, 2, 3, 3)), True)
    base = rng.integers(-2, 3, size=(18, 5, 5)).astype(np.float64)
    frac = rng.uniform(0.25, 0.45, size=(18, 5, 5))
    off = Variable(base + frac, True)
    mod = Variable(rng.uniform(0.2, 0.8, size=(9, 5, 5)), True)
    r = _projection(rng, (3, 5, 5))
    if _frac_distance(off.data) < FRAC_MARGIN:
        raise MarginError("deform case offsets too close to the grid")

    def loss():
        return ad.vsum(ad.mul(deform_conv2d(x, w, off, mod), r))

    return loss, {"x": x, "w": w, "off": off, "mod": mod}


def _case_redistribute():
    rng = np.random.default_rng(20)
    x = Variable(rng.normal(size=(2, 5, 5)), True)
    w = Variable(rng.normal(size=(2, 2, 3, 3)), True)
    off = Variable(rng.integers(-1, 2, size=(18, 5, 5)) + rng.uniform(0.3, 0.45, size=(18, 5, 5)), True)
    r = _projection(rng, (2, 5, 5))
    if _frac_distance(off.data) < FRAC_MARGIN:
        raise MarginError("redistribute case offsets too close to the grid")

    def loss():
        return ad.vsum(ad.mul(ema_redistribute(x, w, off), r))

    return loss, {"x": x, "w": w, "off": off}


# ---------------------------------------------------------------------------
# composed blocks
# ---------------------------------------------------------------------------

def _f64_ema_stage(rng: np.random.Generator, c: int) -> EmaStageParams:
    stage = init_ema_stage(rng, c, dtype=np.float64)
    for _, var in stage.named(""):
        if var.data.ndim:
            var.data = rng.normal(0.0, 0.25, size=var.data.shape)
    # sampling heads: small weights plus a half-pixel bias keep every
    # predicted offset well inside its bilinear cell
    for head in (stage.t4, stage.t5):
        head.w.data = rng.normal(0.0, 0.004, size=head.w.data.shape)
        head.b.data = np.full(head.b.data.shape, 0.5)
    stage.alpha.data = np.asarray(0.2)
    stage.beta.data = np.asarray(-0.15)
    return stage


def ema_block_case(seed: int = 23):
    rng = np.random.default_rng(seed)
    c, h, w = 2, 6, 6
    stage = _f64_ema_stage(rng, c)
    feat_i = Variable(rng.normal(size=(c, h, w)), True)
    feat_s = Variable(rng.normal(size=(c, h, w)), True)
    feat_e = Variable(rng.normal(size=(c, h, w)), True)
    r = _projection(rng, (c, h, w))

    def loss():
        out = ema_forward(feat_i, feat_s, feat_e, stage)
        probe = ad.vsum(ad.mul(out.fused, r))
        return ad.add(probe, structure_loss(
            [(out.aligned_image, out.aligned_depth, stage)]))

    variables = dict(stage.named("ema"))
    variables.update({"feat_i": feat_i, "feat_s": feat_s, "feat_e": feat_e})

    with _kink_recorder() as rec:
        out = ema_forward(feat_i, feat_s, feat_e, stage)
        structure_loss([(out.aligned_image, out.aligned_depth, stage)])
    margins = {
        "offsets": min(_frac_distance(out.offsets_image.data),
                       _frac_distance(out.offsets_depth.data)),
        "minmax_gap": rec["minmax_gap"],
    }
    if margins["offsets"] < FRAC_MARGIN:
        raise MarginError(f"alignment offsets too close to the grid: {margins}")
    if margins["minmax_gap"] < EXTREME_GAP:
        raise MarginError(f"normalization extremes too close: {margins}")
    return loss, variables


def ldf_block_case(seed: int = 31):
    rng = np.random.default_rng(seed)
    c, h, w = 2, 6, 6
    stage = init_ldf_stage(rng, c, dtype=np.float64)
    for _, var in stage.named(""):
        if var.data.ndim:
            var.data = rng.normal(0.0, 0.3, size=var.data.shape)
    stage.head.w.data = rng.normal(0.0, 0.004, size=stage.head.w.data.shape)
    stage.head.b.data = np.concatenate([np.full(18, 0.5), np.zeros(9)])
    stage.beta.data = np.asarray(0.3)
    feat_d = Variable(rng.normal(size=(c, h, w)), True)
    feat_e = Variable(rng.normal(size=(c, h, w)), True)
    gt = rng.uniform(2.0, 3.0, size=(1, 2 * h, 2 * w))
    r = _projection(rng, (c, h, w))

    def loss():
        refined, mask = ldf_forward(feat_d, feat_e, stage)
        probe = ad.vsum(ad.mul(refined, r))
        return ad.add(probe, motion_loss([(refined, mask, stage, 2)], gt))

    variables = dict(stage.named("ldf"))
    variables.update({"feat_d": feat_d, "feat_e": feat_e})

    with _kink_recorder() as rec:
        refined, mask = ldf_forward(feat_d, feat_e, stage)
        motion_loss([(refined, mask, stage, 2)], gt)
        q = ad.add(stage.td.apply(feat_d), ad.mul(stage.beta, stage.te.apply(feat_e)))
        offsets = stage.head.apply(q).data[:18]
    margins = {
        "offsets": _frac_distance(offsets),
        "mask_gap": _mask_gap(mask.data),
        "relu": rec["relu"],
    }
    if margins["offsets"] < FRAC_MARGIN:
        raise MarginError(f"filter offsets too close to the grid: {margins}")
    if margins["mask_gap"] < MASK_GAP:
        raise MarginError(f"mask values too close to their mean: {margins}")
    if margins["relu"] < RELU_MARGIN:
        raise MarginError(f"relu inputs too close to zero: {margins}")
    if not binarize_mask(mask.data).any():
        raise MarginError("motion mask binarizes to empty support")
    return loss, variables


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------

def _positive_network(seed: int) -> DepthCompletionModel:
    """A float64 model whose parameters keep every preactivation positive:
    with positive inputs, every ReLU then sits on its active branch with a
    real margin, and the sampling heads emit offsets in a half-pixel band."""
    cfg = NetworkConfig(base_channels=2, event_bins=2, dtype="float64")
    model = DepthCompletionModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, var in model.params.named():
        data = var.data
        if name.endswith(".w") and data.ndim == 4 and ".t4" not in name \
                and ".t5" not in name and ".head" not in name:
            if "deconv" in name:
                fan = data.shape[0] * 4
            else:
                fan = data.shape[1] * data.shape[2] * data.shape[3]
            var.data = rng.uniform(0.5, 1.5, size=data.shape) / fan
        elif name.endswith(".b") and ".t4" not in name and ".t5" not in name \
                and ".head" not in name:
            var.data = rng.uniform(0.02, 0.08, size=data.shape)
        elif name.endswith("alpha") or name.endswith("beta"):
            var.data = np.asarray(rng.uniform(0.1, 0.3))
        elif name.endswith("kernel") or name.endswith("w_img") or name.endswith("w_dep"):
            fan = data.shape[1] * 9
            var.data = rng.uniform(0.5, 1.5, size=data.shape) / fan
    # sampling heads: tiny positive weights, half-pixel offset bias
    stages = list(model.params.ema) + list(model.params.ldf)
    for stage in stages:
        heads = [stage.t4, stage.t5] if hasattr(stage, "t4") else [stage.head]
        for head in heads:
            fan = head.w.data.shape[1] * 9
            head.w.data = rng.uniform(0.05, 0.2, size=head.w.data.shape) / fan
            bias = np.zeros(head.b.data.shape)
            bias[:18] = 0.35
            head.b.data = bias
    # mask convs need spread for a clean mean threshold
    for stage in model.params.ldf:
        fan = stage.mask_conv.w.data.shape[1] * 9
        stage.mask_conv.w.data = rng.uniform(0.5, 2.0, size=stage.mask_conv.w.data.shape) / fan
        stage.mask_conv.b.data = np.asarray([0.1])
    # the loss projections feed no relu, so mixed signs are safe and spread
    # the min/max extremes apart
    for stage in model.params.ema:
        fan = stage.g_conv.w.data.shape[1] * 9
        stage.g_conv.w.data = rng.normal(0.0, 2.0 / np.sqrt(fan),
                                         size=stage.g_conv.w.data.shape)
    return model


def network_case(seed: int = 25):
    model = _positive_network(seed)
    rng = np.random.default_rng(seed + 2)
    h = w = 16
    image = rng.uniform(0.2, 1.0, size=(3, h, w))
    sparse = rng.uniform(0.5, 1.5, size=(1, h, w))
    sparse[:, ::2, :] = 0.0
    grid = rng.uniform(0.1, 1.0, size=(2, h, w))
    gt = rng.uniform(2.0, 3.0, size=(1, h, w))

    def loss():
        result = model.forward(image, sparse, grid)
        total, _ = model.compute_loss(result, gt)
        return total

    with _kink_recorder() as rec:
        result = model.forward(image, sparse, grid)
        model.compute_loss(result, gt)
    offsets = [out.offsets_image.data for out in result.aligned]
    offsets += [out.offsets_depth.data for out in result.aligned]
    for step, d in enumerate(result.decoder_inputs):
        stage = model.params.ldf[2 - step]
        ev = result.event_pyramid[2 - step]
        q = ad.add(stage.td.apply(d), ad.mul(stage.beta, stage.te.apply(ev)))
        offsets.append(stage.head.apply(q).data[:18])
    margins = {
        "relu": rec["relu"],
        "l1": rec["l1"],
        "minmax_gap": rec["minmax_gap"],
        "offsets": min(_frac_distance(o) for o in offsets),
        "mask_gap": min(_mask_gap(m.data) for m in result.masks),
    }
    checks = (("relu", RELU_MARGIN), ("l1", L1_MARGIN), ("minmax_gap", EXTREME_GAP),
              ("offsets", FRAC_MARGIN), ("mask_gap", MASK_GAP))
    for key, bound in checks:
        if margins[key] < bound:
            raise MarginError(f"network case margin {key}={margins[key]:.2e} < {bound}")
    if not all(binarize_mask(m.data).any() for m in result.masks):
        raise MarginError("a motion mask binarizes to empty support")
    variables = dict(model.params.named())
    return loss, variables


# ---------------------------------------------------------------------------
# the suite
# ---------------------------------------------------------------------------

PRIMITIVE_CASES = {
    "conv2d": _case_conv2d,
    "deconv2d": _case_deconv2d,
    "elementwise": _case_elementwise,
    "channel_ops": _case_channel_ops,
    "minmax_normalize": _case_minmax,
    "spatial_gradient": _case_spatial_gradient,
    "avgpool_down": _case_avgpool,
    "bilinear_sample": _case_bilinear_sample,
    "deform_conv2d": _case_deform,
    "ema_redistribute": _case_redistribute,
}


def run_gradient_suite(verbose: bool = False) -> dict[str, GradCheckResult]:
    """Primitives, both blocks, and the 16x16 network, all at h=1e-4/f64."""
    results: dict[str, GradCheckResult] = {}
    for name, case in PRIMITIVE_CASES.items():
        loss, variables = case()
        results[name] = check_gradients(loss, variables)
        if verbose:
            _print_row(name, results[name])

    loss, variables = ema_block_case()
    results["ema_block"] = check_gradients(loss, variables)
    if verbose:
        _print_row("ema_block", results["ema_block"])

    loss, variables = ldf_block_case()
    results["ldf_block"] = check_gradients(loss, variables)
    if verbose:
        _print_row("ldf_block", results["ldf_block"])

    loss, variables = network_case()
    results["network_16x16"] = check_gradients(
        loss, variables, max_coords_per_var=4, rng=np.random.default_rng(99))
    if verbose:
        _print_row("network_16x16", results["network_16x16"])
    return results


def _print_row(name: str, res: GradCheckResult) -> None:
    status = "PASS" if res.passed else "FAIL"
    print(f"{status}  {name:<18} coords={res.checked:<6} max_err={res.max_rel:.3e}")
    for failure in res.failures[:5]:
        print(f"      {failure}")
