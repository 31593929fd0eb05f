"""Synthetic dynamic-scene samples: textured background under ego motion, a
moving square object at a nearer depth, contrast-threshold events from the
sharp intensity sequence, radial motion blur on the color image, and sparse
depth subsampled from the dense ground truth.

Everything is a pure function of (spec, seed): regeneration is byte-exact.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import EventStream, window_select
from .fileio import load_events, load_tensor, save_events, save_tensor

LOG_EPS = 1e-3          # guard inside log intensity
COUNT_EPS = 1e-9        # absorbs float roundoff at exact threshold multiples


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    background_depth: float = 4.0          # meters
    object_size: int = 16                  # pixels
    object_depth: float = 1.5              # meters
    object_start: tuple[float, float] = (24.0, 8.0)     # (row, col) at t=0
    object_velocity: tuple[float, float] = (0.0, 160.0)  # (vy, vx) px/s
    zoom_rate: float = 0.5                 # ego zoom about the center, 1/s
    translation: tuple[float, float] = (0.0, 40.0)       # ego drift, px/s
    exposure: float = 0.030                # seconds spanned by the burst
    frames: int = 9
    contrast_threshold: float = 0.15
    blur_steps: int = 8
    blur_strength: float = 0.08
    noise_scale: float = 8.0               # texture feature size in pixels
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.object_depth < self.background_depth):
            raise ValueError("need 0 < object_depth < background_depth")
        if self.exposure <= 0 or self.contrast_threshold <= 0:
            raise ValueError("exposure and contrast_threshold must be positive")
        if self.frames < 2:
            raise ValueError("need at least two frames")

    @property
    def t_center(self) -> float:
        return self.exposure / 2.0

    def timestamps(self) -> np.ndarray:
        return np.linspace(0.0, self.exposure, self.frames)


@dataclass
class Sample:
    image: np.ndarray          # [3,H,W] float32 in [0,1]
    sparse: np.ndarray         # [1,H,W] float32 meters, 0 = missing
    events: EventStream
    gt: np.ndarray             # [1,H,W] float32 meters, > 0 everywhere
    meta: dict


def _hash01(iy: np.ndarray, ix: np.ndarray, seed: int) -> np.ndarray:
    """SplitMix-style integer hash of lattice coordinates into [0,1)."""
    with np.errstate(over="ignore"):
        h = (iy.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
             + ix.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
             + np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * np.uint64(0x94D049BB133111EB))
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xD6E8FEB86659FD93)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0xC2B2AE3D27D4EB4F)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(ys: np.ndarray, xs: np.ndarray, seed: int, scale: float) -> np.ndarray:
    """Smooth seeded noise in [0,1] over an unbounded coordinate domain."""
    fy = np.asarray(ys, dtype=np.float64) / scale
    fx = np.asarray(xs, dtype=np.float64) / scale
    y0 = np.floor(fy)
    x0 = np.floor(fx)
    ty = fy - y0
    tx = fx - x0
    # smoothstep keeps lattice seams invisible
    ty = ty * ty * (3.0 - 2.0 * ty)
    tx = tx * tx * (3.0 - 2.0 * tx)
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)
    v00 = _hash01(y0i, x0i, seed)
    v01 = _hash01(y0i, x0i + 1, seed)
    v10 = _hash01(y0i + 1, x0i, seed)
    v11 = _hash01(y0i + 1, x0i + 1, seed)
    top = v00 + (v01 - v00) * tx
    bot = v10 + (v11 - v10) * tx
    return top + (bot - top) * ty


def _texture(ys: np.ndarray, xs: np.ndarray, seed: int, scale: float) -> np.ndarray:
    """Two-octave value noise, rescaled into [0.1, 0.9] for event headroom."""
    coarse = value_noise(ys, xs, seed, scale)
    fine = value_noise(ys, xs, seed + 101, scale / 3.0)
    mix = 0.7 * coarse + 0.3 * fine
    return 0.1 + 0.8 * mix


def render_sequence(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render the sharp burst: ([F,3,H,W] color, [F,1,H,W] depth, timestamps).

    The background plane warps under ego zoom/drift; the square object sweeps
    across it carrying its own texture and the nearer depth.
    """
    h, w = spec.height, spec.width
    times = spec.timestamps()
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")

    frames = np.empty((spec.frames, 3, h, w), dtype=np.float32)
    depths = np.empty((spec.frames, 1, h, w), dtype=np.float32)
    visible_any = False
    for f, t in enumerate(times):
        rel = t - spec.t_center
        scale = 1.0 + spec.zoom_rate * rel
        if scale <= 0.1:
            raise ValueError("ego zoom collapses the frame; lower zoom_rate or exposure")
        src_y = cy + (gy - cy) / scale - spec.translation[0] * rel
        src_x = cx + (gx - cx) / scale - spec.translation[1] * rel

        oy = spec.object_start[0] + spec.object_velocity[0] * t
        ox = spec.object_start[1] + spec.object_velocity[1] * t
        top, left = int(round(oy)), int(round(ox))
        inside = np.zeros((h, w), dtype=bool)
        r0, r1 = max(top, 0), min(top + spec.object_size, h)
        c0, c1 = max(left, 0), min(left + spec.object_size, w)
        if r0 < r1 and c0 < c1:
            inside[r0:r1, c0:c1] = True
            visible_any = True

        for ch in range(3):
            bg = _texture(src_y, src_x, spec.seed * 3 + ch, spec.noise_scale)
            obj = _texture(gy - oy, gx - ox, spec.seed * 3 + ch + 977,
                           spec.noise_scale / 2.0)
            frames[f, ch] = np.where(inside, obj, bg).astype(np.float32)
        depths[f, 0] = np.where(inside, spec.object_depth,
                                spec.background_depth).astype(np.float32)
    if not visible_any:
        raise ValueError("object never enters the frame; adjust start/velocity")
    return frames, depths, times


def simulate_events(frames: np.ndarray, timestamps: np.ndarray,
                    contrast_threshold: float) -> EventStream:
    """Ideal contrast-threshold events from an intensity sequence [F,H,W].

    Per pixel and inter-frame interval, floor(|dL| / C) events fire with
    polarity sign(dL); their timestamps sit at the threshold-crossing points
    of the linearly interpolated log intensity.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise ValueError(f"need [F,H,W] with F >= 2, got {frames.shape}")
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if np.any(np.diff(timestamps) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    nf, h, w = frames.shape
    log_l = np.log(frames + LOG_EPS)

    ts, xs, ys, ps = [], [], [], []
    flat_y, flat_x = np.divmod(np.arange(h * w), w)
    for f in range(nf - 1):
        dl = (log_l[f + 1] - log_l[f]).ravel()
        counts = np.floor(np.abs(dl) / contrast_threshold + COUNT_EPS).astype(np.int64)
        total = int(counts.sum())
        if total == 0:
            continue
        pix = np.repeat(np.arange(h * w), counts)
        # ordinal of each event within its pixel: 1..count
        ordinal = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts) + 1
        frac = ordinal * contrast_threshold / np.abs(dl[pix])
        t = timestamps[f] + frac * (timestamps[f + 1] - timestamps[f])
        ts.append(t)
        xs.append(flat_x[pix])
        ys.append(flat_y[pix])
        ps.append(np.sign(dl[pix]).astype(np.int8))

    if not ts:
        return EventStream.empty(h, w, float(timestamps[0]), float(timestamps[-1]))
    t = np.concatenate(ts)
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    p = np.concatenate(ps)
    order = np.argsort(t, kind="stable")
    t = np.minimum(t[order], timestamps[-1])
    return EventStream(t, x[order], y[order], p[order], h, w,
                       float(timestamps[0]), float(timestamps[-1]))


def _bilinear_clamped(img: np.ndarray, src_y: np.ndarray, src_x: np.ndarray) -> np.ndarray:
    """Edge-clamped bilinear resampling of [C,H,W] at per-pixel positions."""
    c, h, w = img.shape
    sy = np.clip(src_y, 0.0, h - 1.0)
    sx = np.clip(src_x, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = sy - y0
    fx = sx - x0
    v00 = img[:, y0, x0]
    v01 = img[:, y0, x1]
    v10 = img[:, y1, x0]
    v11 = img[:, y1, x1]
    top = v00 + (v01 - v00) * fx
    bot = v10 + (v11 - v10) * fx
    return top + (bot - top) * fy


def radial_blur(sharp: np.ndarray, steps: int, max_scale: float) -> np.ndarray:
    """Average of progressive center-scalings: 1 + max_scale * k/steps."""
    sharp = np.asarray(sharp)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if max_scale < 0:
        raise ValueError("max_scale must be >= 0")
    _, h, w = sharp.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    acc = np.zeros_like(sharp, dtype=np.float64)
    for k in range(steps):
        scale = 1.0 + max_scale * k / steps
        acc += _bilinear_clamped(sharp, cy + (gy - cy) / scale, cx + (gx - cx) / scale)
    return (acc / steps).astype(sharp.dtype)


def sample_sparse(gt: np.ndarray, mode: str = "lines", density: float = 0.05,
                  line_step: int = 8, seed: int = 0) -> np.ndarray:
    """Keep ground-truth depth on selected pixels, zero elsewhere.

    mode='lines' keeps every line_step-th row; mode='random' keeps a seeded
    Bernoulli(density) subset of pixels.
    """
    gt = np.asarray(gt)
    _, h, w = gt.shape
    if mode == "lines":
        if line_step < 1:
            raise ValueError("line_step must be >= 1")
        keep = np.zeros((h, w), dtype=bool)
        keep[::line_step, :] = True
    elif mode == "random":
        if not (0 < density <= 1):
            raise ValueError("density must be in (0, 1]")
        rng = np.random.default_rng(seed)
        keep = rng.random((h, w)) < density
    else:
        raise ValueError(f"unknown sparse mode {mode!r}")
    if not keep.any():
        raise ValueError("sparse selection is empty")
    return np.where(keep[None], gt, 0.0).astype(gt.dtype)


def make_sample(spec: SceneSpec, sparse_mode: str = "lines", density: float = 0.05,
                line_step: int = 8) -> Sample:
    """Full pipeline for one training example."""
    frames, depths, times = render_sequence(spec)
    all_events = simulate_events(frames.mean(axis=1), times, spec.contrast_threshold)
    events = window_select(all_events, spec.t_center, half_width=0.015)
    center = spec.frames // 2
    image = radial_blur(frames[center], spec.blur_steps, spec.blur_strength)
    gt = depths[center]
    sparse = sample_sparse(gt, mode=sparse_mode, density=density,
                           line_step=line_step, seed=spec.seed)
    meta = {"spec": dataclasses.asdict(spec), "sparse_mode": sparse_mode,
            "density": density, "line_step": line_step}
    return Sample(image, sparse, events, gt, meta)


def _randomized_spec(template: SceneSpec, seed: int, index: int) -> SceneSpec:
    """Per-sample variation: texture, object start, velocity direction."""
    rng = np.random.default_rng(seed ^ index)
    h, w = template.height, template.width
    size = template.object_size
    margin = 2
    start = (float(rng.uniform(margin, h - size - margin)),
             float(rng.uniform(margin, w - size - margin)))
    speed = float(np.hypot(*template.object_velocity))
    angle = float(rng.uniform(0.0, 2.0 * np.pi))
    velocity = (speed * np.sin(angle), speed * np.cos(angle))
    return dataclasses.replace(template, object_start=start,
                               object_velocity=velocity,
                               seed=int(rng.integers(0, 2**31 - 1)))


def generate_dataset(template: SceneSpec, count: int, seed: int, out_dir,
                     sparse_mode: str = "lines", density: float = 0.05,
                     line_step: int = 8) -> list[Path]:
    """Write ``count`` samples under out_dir plus a tab-separated manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    dirs = []
    for i in range(count):
        spec = _randomized_spec(template, seed, i)
        sample = make_sample(spec, sparse_mode, density, line_step)
        name = f"sample_{i:05d}"
        sdir = out / name
        sdir.mkdir(exist_ok=True)
        save_tensor(sdir / "image.etsr", sample.image)
        save_tensor(sdir / "sparse.etsr", sample.sparse)
        save_tensor(sdir / "gt.etsr", sample.gt)
        save_events(sdir / "events.evt", sample.events)
        meta_lines = [f"index={i}", f"master_seed={seed}"]
        meta_lines += [f"spec.{k}={v}" for k, v in sample.meta["spec"].items()]
        meta_lines += [f"sparse_mode={sparse_mode}", f"density={density}",
                       f"line_step={line_step}"]
        (sdir / "meta.txt").write_text("\n".join(meta_lines) + "\n")
        rows.append(f"{i}\t{name}")
        dirs.append(sdir)
    (out / "manifest.txt").write_text("\n".join(rows) + ("\n" if rows else ""))
    return dirs


def load_sample(sample_dir) -> Sample:
    sdir = Path(sample_dir)
    meta = {}
    meta_path = sdir / "meta.txt"
    if meta_path.exists():
        for line in meta_path.read_text().splitlines():
            if "=" in line:
                key, val = line.split("=", 1)
                meta[key] = val
    return Sample(
        image=load_tensor(sdir / "image.etsr"),
        sparse=load_tensor(sdir / "sparse.etsr"),
        events=load_events(sdir / "events.evt"),
        gt=load_tensor(sdir / "gt.etsr"),
        meta=meta,
    )


def load_dataset(root) -> list[Sample]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt under {root}")
    samples = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        _, rel = line.split("\t")
        samples.append(load_sample(root / rel))
    return samples
