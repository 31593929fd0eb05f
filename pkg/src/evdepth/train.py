"""Training loop and model evaluation.

Each step draws a mini-batch in a seeded order, accumulates per-sample
gradients in index order (loss scaled by 1/batch so the update matches the
batch-mean loss), then applies one AdamW step at the scheduled learning
rate. Runs are bit-reproducible for a fixed seed; the loss log keeps full
float precision so identical runs produce identical CSV bytes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datagen import Sample
from .events import voxelize
from .metrics import MetricsReport, compute_metrics
from .network import DepthCompletionModel, LossReport, NetworkConfig, total_loss
from .optim import AdamWState, ScheduleConfig, adamw_step, lr_at

LOSS_CSV_HEADER = "step,lr,l_rec,l_str,l_mot,l_total"


@dataclass
class TrainConfig:
    iters: int = 300
    batch: int = 2
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0          # 0 disables periodic checkpoints
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        if self.iters < 1 or self.batch < 1:
            raise ValueError("iters and batch must be >= 1")


def prepare_inputs(sample: Sample, cfg: NetworkConfig):
    """Sample -> (image, sparse, event grid, gt) in the model dtype."""
    dtype = cfg.np_dtype
    grid = voxelize(sample.events, cfg.event_bins).astype(dtype)
    return (sample.image.astype(dtype), sample.sparse.astype(dtype),
            grid, sample.gt.astype(dtype))


def train_step(model: DepthCompletionModel, batch: list, lr: float,
               cfg: TrainConfig, state: AdamWState,
               params: list[ad.Variable]) -> LossReport:
    """One optimizer step over a prepared batch; returns the mean loss report."""
    for p in params:
        p.zero_grad()
    scale = 1.0 / len(batch)
    rec = strv = mot = 0.0
    n_valid = 0
    for image, sparse, grid, gt in batch:
        result = model.forward(image, sparse, grid)
        loss, report = model.compute_loss(result, gt)
        ad.scalar_mul(loss, scale).backward()
        rec += report.reconstruction * scale
        strv += report.structure * scale
        mot += report.motion * scale
        n_valid += report.n_valid
    adamw_step(params, lr, state, beta1=cfg.beta1, beta2=cfg.beta2,
               eps=cfg.eps, weight_decay=cfg.weight_decay)
    return total_loss(rec, strv, mot, model.cfg.lambda_structure,
                      model.cfg.mu_motion, n_valid=n_valid)


def train(model: DepthCompletionModel, samples: list[Sample], cfg: TrainConfig,
          out_dir=None, log_every: int = 0) -> list[tuple[int, float, LossReport]]:
    """Train in place over the sample list; returns (step, lr, report) rows.

    When ``out_dir`` is given, writes ``loss.csv`` plus periodic and final
    checkpoints there.
    """
    if not samples:
        raise ValueError("training needs at least one sample")
    rng = np.random.default_rng(cfg.seed)
    batches = [prepare_inputs(s, model.cfg) for s in samples]
    params = model.params.variables()
    state = AdamWState()
    history: list[tuple[int, float, LossReport]] = []

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    order: list[int] = []
    for step in range(cfg.iters):
        while len(order) < cfg.batch:
            order.extend(rng.permutation(len(batches)).tolist())
        picked = [batches[i] for i in order[:cfg.batch]]
        order = order[cfg.batch:]

        lr = lr_at(step, cfg.iters, cfg.schedule)
        report = train_step(model, picked, lr, cfg, state, params)
        history.append((step, lr, report))
        if log_every and (step % log_every == 0 or step == cfg.iters - 1):
            print(f"step {step:6d}  lr {lr:.6f}  rec {report.reconstruction:.5f}  "
                  f"str {report.structure:.5f}  mot {report.motion:.5f}  "
                  f"total {report.total:.5f}")
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            model.save(out / f"ckpt_{step + 1:06d}.edck")

    if out is not None:
        write_loss_csv(out / "loss.csv", history)
        model.save(out / "final.edck")
    return history


def write_loss_csv(path, history) -> None:
    rows = [LOSS_CSV_HEADER]
    for step, lr, rep in history:
        rows.append(f"{step},{lr!r},{rep.reconstruction!r},{rep.structure!r},"
                    f"{rep.motion!r},{rep.total!r}")
    Path(path).write_text("\n".join(rows) + "\n")


def predict(model: DepthCompletionModel, sample: Sample) -> np.ndarray:
    image, sparse, grid, _ = prepare_inputs(sample, model.cfg)
    with ad.no_grad():
        result = model.forward(image, sparse, grid)
    return result.prediction.data


def evaluate(model: DepthCompletionModel, samples: list[Sample],
             per_image: bool = False, threads: int = 1) -> MetricsReport:
    """Forward the dataset and pool metrics over valid pixels.

    Predictions always enter the metric in sample-index order, so thread
    count does not change the result.
    """
    if not samples:
        raise ValueError("evaluation needs at least one sample")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            predictions = list(pool.map(lambda s: predict(model, s), samples))
    else:
        predictions = [predict(model, s) for s in samples]
    gts = [s.gt for s in samples]
    return compute_metrics(predictions, gts, per_image=per_image)
