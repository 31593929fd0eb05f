"""Full depth-completion model: three structurally identical encoders, an
alignment block per encoder stage, a deconvolution decoder with local depth
filtering, the prediction tail, and the composite training loss.

Stage widths are ``base_channels * 2**(j-1)`` at scales {1/1, 1/2, 1/4, 1/8};
the decoder emits at {1/4, 1/2, 1/1} and the tail projects to one channel.
Ablation switches select the fusion style in the encoder (add / dconv / ema)
and the refinement style in the decoder (plain / dconv / ldf).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .ema import EmaOutput, EmaStageParams, ema_forward, init_ema_stage, structure_loss
from .fileio import load_checkpoint, save_checkpoint
from .layers import ConvParams, conv_init, deconv_init
from .ldf import LdfStageParams, init_ldf_stage, ldf_forward, motion_loss

ENCODER_MODES = ("add", "dconv", "ema")
DECODER_MODES = ("plain", "dconv", "ldf")

NUM_STAGES = 4
NUM_DECODER_STAGES = 3


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 16
    event_bins: int = 4
    kernel_taps: int = 9                 # 3x3 deformable kernels
    use_rgb: bool = True
    use_event: bool = True
    encoder_mode: str = "ema"
    decoder_mode: str = "ldf"
    ema_use_predicted_modulation: bool = False
    lambda_structure: float = 1.0
    mu_motion: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if self.encoder_mode not in ENCODER_MODES:
            raise ValueError(f"encoder_mode must be one of {ENCODER_MODES}, got {self.encoder_mode!r}")
        if self.decoder_mode not in DECODER_MODES:
            raise ValueError(f"decoder_mode must be one of {DECODER_MODES}, got {self.decoder_mode!r}")
        if self.encoder_mode != "add" and not self.use_rgb:
            raise ValueError(f"encoder_mode={self.encoder_mode!r} needs the RGB branch")
        if self.encoder_mode == "ema" and not self.use_event:
            raise ValueError("encoder_mode='ema' needs the event branch")
        if self.decoder_mode == "ldf" and not self.use_event:
            raise ValueError("decoder_mode='ldf' needs the event branch")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * 2 ** (stage - 1)


# Ablation presets: modality switches and block placement per study row.
ABLATION_PRESETS: dict[str, dict] = {
    "i": dict(use_rgb=False, use_event=False, encoder_mode="add", decoder_mode="plain"),
    "ii": dict(use_rgb=True, use_event=False, encoder_mode="add", decoder_mode="plain"),
    "iii": dict(use_rgb=False, use_event=True, encoder_mode="add", decoder_mode="plain"),
    "iv": dict(use_rgb=True, use_event=True, encoder_mode="add", decoder_mode="plain"),
    "v": dict(use_rgb=True, use_event=True, encoder_mode="dconv", decoder_mode="plain"),
    "vi": dict(use_rgb=True, use_event=True, encoder_mode="ema", decoder_mode="plain"),
    "vii": dict(use_rgb=True, use_event=True, encoder_mode="add", decoder_mode="dconv"),
    "viii": dict(use_rgb=True, use_event=True, encoder_mode="add", decoder_mode="ldf"),
    "ix": dict(use_rgb=True, use_event=True, encoder_mode="ema", decoder_mode="ldf"),
}


def ablation_config(preset: str, **overrides) -> NetworkConfig:
    if preset not in ABLATION_PRESETS:
        raise ValueError(f"unknown ablation preset {preset!r}; choose from {list(ABLATION_PRESETS)}")
    kwargs = dict(ABLATION_PRESETS[preset])
    kwargs.update(overrides)
    return NetworkConfig(**kwargs)


@dataclass
class EncoderStageParams:
    conv1: ConvParams
    conv2: ConvParams

    def named(self, prefix: str) -> Iterator[tuple[str, Variable]]:
        yield from self.conv1.named(f"{prefix}.conv1")
        yield from self.conv2.named(f"{prefix}.conv2")


@dataclass
class NetworkParams:
    encoders: dict[str, list[EncoderStageParams]]
    ema: list[EmaStageParams] | None
    deconvs: list[ConvParams]
    ldf: list[LdfStageParams] | None
    plain_decoder: list[ConvParams] | None
    tail: ConvParams

    def named(self) -> Iterator[tuple[str, Variable]]:
        for branch in ("rgb", "depth", "event"):
            stages = self.encoders.get(branch)
            if stages is None:
                continue
            for j, stage in enumerate(stages, start=1):
                yield from stage.named(f"enc.{branch}.stage{j}")
        if self.ema is not None:
            for j, stage in enumerate(self.ema, start=1):
                yield from stage.named(f"ema.{j}")
        for i, dc in enumerate(self.deconvs, start=1):
            yield from dc.named(f"dec.deconv{i}")
        if self.ldf is not None:
            for i, stage in enumerate(self.ldf, start=1):
                yield from stage.named(f"ldf.{i}")
        if self.plain_decoder is not None:
            for i, cp in enumerate(self.plain_decoder, start=1):
                yield from cp.named(f"dec.plain{i}")
        yield from self.tail.named("tail")

    def variables(self) -> list[Variable]:
        return [v for _, v in self.named()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: var.data for name, var in self.named()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, var in own.items():
            arr = state[name]
            if arr.shape != var.data.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model {var.data.shape}")
            var.data = arr.astype(var.data.dtype, copy=True)


def _init_encoder(rng: np.random.Generator, c_in: int, cfg: NetworkConfig) -> list[EncoderStageParams]:
    stages = []
    prev = c_in
    for j in range(1, NUM_STAGES + 1):
        c = cfg.stage_channels(j)
        stages.append(EncoderStageParams(
            conv1=conv_init(rng, c, prev, dtype=cfg.np_dtype),
            conv2=conv_init(rng, c, c, dtype=cfg.np_dtype),
        ))
        prev = c
    return stages


def init_network(cfg: NetworkConfig, seed: int = 0) -> NetworkParams:
    rng = np.random.default_rng(seed)
    dtype = cfg.np_dtype
    encoders: dict[str, list[EncoderStageParams]] = {
        "depth": _init_encoder(rng, 1, cfg)
    }
    if cfg.use_rgb:
        encoders["rgb"] = _init_encoder(rng, 3, cfg)
    if cfg.use_event:
        encoders["event"] = _init_encoder(rng, cfg.event_bins, cfg)

    ema = None
    if cfg.encoder_mode in ("dconv", "ema"):
        ema = [init_ema_stage(rng, cfg.stage_channels(j), cfg.kernel_taps, dtype=dtype)
               for j in range(1, NUM_STAGES + 1)]

    # decoder runs deepest-first: deconv i maps stage 5-i down to stage 4-i
    deconvs = [deconv_init(rng, cfg.stage_channels(5 - i), cfg.stage_channels(4 - i), dtype=dtype)
               for i in range(1, NUM_DECODER_STAGES + 1)]

    ldf = None
    plain_decoder = None
    if cfg.decoder_mode in ("dconv", "ldf"):
        # stage index i in {1,2,3} lives at scale 1/2**(i-1)
        ldf = [init_ldf_stage(rng, cfg.stage_channels(i), cfg.kernel_taps, dtype=dtype)
               for i in range(1, NUM_DECODER_STAGES + 1)]
    else:
        plain_decoder = [conv_init(rng, cfg.stage_channels(i), cfg.stage_channels(i), dtype=dtype)
                         for i in range(1, NUM_DECODER_STAGES + 1)]

    tail = conv_init(rng, 1, cfg.base_channels, dtype=dtype)
    return NetworkParams(encoders, ema, deconvs, ldf, plain_decoder, tail)


@dataclass
class ForwardResult:
    prediction: Variable                      # [1,H,W] dense depth
    fused: list[Variable]                     # F_j per encoder stage
    aligned: list[EmaOutput] | None           # alignment outputs per stage
    refined: list[Variable]                   # decoder features after refinement
    decoder_inputs: list[Variable]            # decoder features before refinement
    masks: list[Variable] | None              # motion masks (decoder order 3,2,1)
    event_pyramid: list[Variable] | None


@dataclass
class LossReport:
    reconstruction: float
    structure: float
    motion: float
    total: float
    n_valid: int

    def recompose(self, lam: float, mu: float) -> float:
        return self.reconstruction + lam * self.structure + mu * self.motion


class DepthCompletionModel:
    """Bundles a configuration with its parameters and runs the pipeline."""

    def __init__(self, cfg: NetworkConfig, params: NetworkParams | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_network(cfg, seed)

    # -- encoder ----------------------------------------------------------

    def _encode_branch(self, x: Variable, stages: list[EncoderStageParams]) -> list[Variable]:
        feats = []
        cur = x
        for j, stage in enumerate(stages, start=1):
            stride = 1 if j == 1 else 2
            cur = ad.relu(stage.conv1.apply(cur, stride=stride, pad=1))
            cur = ad.relu(stage.conv2.apply(cur, stride=1, pad=1))
            feats.append(cur)
        return feats

    def encode(self, image, sparse, event_grid) -> tuple[dict[str, list[Variable]], list[Variable], list[EmaOutput] | None]:
        """Run the three encoders and fuse per stage.

        Returns (per-branch pyramids, fused features, alignment outputs).
        """
        cfg = self.cfg
        sparse = ad.as_variable(sparse)
        if sparse.data.ndim != 3 or sparse.shape[0] != 1:
            raise ValueError(f"sparse depth must be [1,H,W], got {sparse.shape}")
        h, w = sparse.shape[1:]
        if h % 8 or w % 8:
            raise ValueError(f"resolution {h}x{w} must be divisible by 8")

        pyramids: dict[str, list[Variable]] = {
            "depth": self._encode_branch(sparse, self.params.encoders["depth"])
        }
        if cfg.use_rgb:
            image = ad.as_variable(image)
            if image.shape != (3, h, w):
                raise ValueError(f"image must be [3,{h},{w}], got {image.shape}")
            pyramids["rgb"] = self._encode_branch(image, self.params.encoders["rgb"])
        if cfg.use_event:
            event_grid = ad.as_variable(event_grid)
            if event_grid.shape != (cfg.event_bins, h, w):
                raise ValueError(f"event grid must be [{cfg.event_bins},{h},{w}], got {event_grid.shape}")
            pyramids["event"] = self._encode_branch(event_grid, self.params.encoders["event"])

        fused: list[Variable] = []
        aligned: list[EmaOutput] | None = [] if cfg.encoder_mode in ("dconv", "ema") else None
        for j in range(NUM_STAGES):
            if cfg.encoder_mode == "add":
                f = pyramids["depth"][j]
                if cfg.use_rgb:
                    f = ad.add(f, pyramids["rgb"][j])
                if cfg.use_event:
                    f = ad.add(f, pyramids["event"][j])
            else:
                event_feat = pyramids["event"][j] if cfg.use_event else None
                out = ema_forward(pyramids["rgb"][j], pyramids["depth"][j], event_feat,
                                  self.params.ema[j], taps=cfg.kernel_taps,
                                  use_event=(cfg.encoder_mode == "ema"),
                                  use_predicted_modulation=cfg.ema_use_predicted_modulation)
                aligned.append(out)
                f = out.fused
                if cfg.encoder_mode == "dconv" and cfg.use_event:
                    f = ad.add(f, pyramids["event"][j])
            fused.append(f)
        return pyramids, fused, aligned

    # -- decoder ----------------------------------------------------------

    def decode(self, fused: list[Variable],
               event_pyramid: list[Variable] | None) -> tuple[Variable, list[Variable], list[Variable] | None]:
        """Deconvolve from the deepest fused feature back to full resolution.

        Returns (prediction, refined features deepest-first, pre-refinement
        decoder features, masks or None).
        """
        cfg = self.cfg
        refined: list[Variable] = []
        decoder_inputs: list[Variable] = []
        masks: list[Variable] | None = [] if cfg.decoder_mode == "ldf" else None
        cur = fused[-1]
        for step in range(NUM_DECODER_STAGES):
            stage = NUM_DECODER_STAGES - step        # 3, 2, 1
            d = ad.add(ad.deconv2d(cur, self.params.deconvs[step].w,
                                   self.params.deconvs[step].b),
                       fused[stage - 1])
            decoder_inputs.append(d)
            if cfg.decoder_mode == "plain":
                cur = self.params.plain_decoder[stage - 1].apply(d)
            elif cfg.decoder_mode == "dconv":
                cur, _ = ldf_forward(d, None, self.params.ldf[stage - 1],
                                     taps=cfg.kernel_taps, use_event=False)
            else:
                ev = event_pyramid[stage - 1]
                cur, mask = ldf_forward(d, ev, self.params.ldf[stage - 1],
                                        taps=cfg.kernel_taps, use_event=True)
                masks.append(mask)
            refined.append(cur)
        prediction = self.params.tail.apply(cur)
        return prediction, refined, decoder_inputs, masks

    def forward(self, image, sparse, event_grid) -> ForwardResult:
        pyramids, fused, aligned = self.encode(image, sparse, event_grid)
        event_pyr = pyramids.get("event")
        prediction, refined, decoder_inputs, masks = self.decode(fused, event_pyr)
        return ForwardResult(prediction, fused, aligned, refined, decoder_inputs,
                             masks, event_pyr)

    # -- losses -----------------------------------------------------------

    def compute_loss(self, result: ForwardResult, gt: np.ndarray) -> tuple[Variable, LossReport]:
        """Total training loss and its per-term report for one sample."""
        cfg = self.cfg
        rec, n_valid = reconstruction_loss(result.prediction, gt)
        total = rec

        l_str = None
        if cfg.encoder_mode == "ema" and result.aligned:
            pairs = [(out.aligned_image, out.aligned_depth, self.params.ema[j])
                     for j, out in enumerate(result.aligned)]
            l_str = structure_loss(pairs)
            total = ad.add(total, ad.scalar_mul(l_str, cfg.lambda_structure))

        l_mot = None
        if cfg.decoder_mode == "ldf" and result.masks:
            stages = []
            for step, (refined, mask) in enumerate(zip(result.refined, result.masks)):
                stage = NUM_DECODER_STAGES - step
                factor = 2 ** (stage - 1)
                stages.append((refined, mask, self.params.ldf[stage - 1], factor))
            l_mot = motion_loss(stages, gt)
            total = ad.add(total, ad.scalar_mul(l_mot, cfg.mu_motion))

        report = total_loss(rec.data.item(),
                            l_str.data.item() if l_str is not None else 0.0,
                            l_mot.data.item() if l_mot is not None else 0.0,
                            cfg.lambda_structure, cfg.mu_motion, n_valid=n_valid)
        return total, report

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.params.state_dict())

    def load(self, path) -> None:
        self.params.load_state_dict(load_checkpoint(path))


def reconstruction_loss(prediction: Variable, gt: np.ndarray) -> tuple[Variable, int]:
    """(1/n) * (sum of squared + sum of absolute errors) over valid pixels."""
    gt = np.asarray(gt)
    if prediction.shape != gt.shape:
        raise ValueError(f"prediction {prediction.shape} vs ground truth {gt.shape}")
    valid = (gt > 0)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("reconstruction loss needs at least one valid pixel")
    mask = valid.astype(prediction.data.dtype)
    residual = ad.mul(ad.sub(prediction, gt.astype(prediction.data.dtype)), mask)
    loss = ad.scalar_mul(ad.add(ad.l2(residual), ad.l1(residual)), 1.0 / n)
    return loss, n


def total_loss(rec: float, structure: float, motion: float,
               lam: float = 1.0, mu: float = 0.1, n_valid: int = 0) -> LossReport:
    """Combine already-computed loss terms into a report."""
    return LossReport(rec, structure, motion, rec + lam * structure + mu * motion,
                      n_valid=n_valid)
