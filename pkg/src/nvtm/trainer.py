"""End-to-end optimization loop.

Per iteration: sample a random subset of (x, y, t) coordinates, run the
full model, combine the reconstruction loss with the (early-phase)
auxiliary flow loss, backprop, and take a decoupled-weight-decay
adaptive step under cosine-annealed learning rate.  Grid planes update
lazily: only entries touched by the iteration's scatter get moment
updates, which keeps the step cost proportional to the batch rather
than the grid size.  Normalization boxes refit on a schedule during the
auxiliary phase and freeze afterwards.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .alignment import fit_norm_box
from .diffcore import mse_backward, mse_forward
from .errors import ConfigError, NumericError
from .model import ModelConfig, NvtmModel

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 100_000
    batch_fraction: float = 0.001
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-3
    w_aux: float = 0.5
    aux_fraction: float = 0.1
    box_refresh_interval: int = 1000
    box_freeze_fraction: float = 1.0
    box_sample: int = 4096
    seed: int = 0
    precision: str = "f32"
    deterministic: bool = True
    log_interval: int = 100

    def __post_init__(self):
        if not 0.0 < self.batch_fraction <= 1.0:
            raise ConfigError(
                f"batch_fraction must be in (0, 1], got {self.batch_fraction}")
        if self.lr_min > self.lr_max:
            raise ConfigError(f"lr_min {self.lr_min} > lr_max {self.lr_max}")
        if not 0.0 <= self.aux_fraction <= 1.0:
            raise ConfigError(
                f"aux_fraction must be in [0, 1], got {self.aux_fraction}")
        if not 0.0 <= self.box_freeze_fraction <= 1.0:
            raise ConfigError(f"box_freeze_fraction must be in [0, 1], "
                              f"got {self.box_freeze_fraction}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


@dataclass
class Batch:
    f: np.ndarray   # integer frame indices, ascending
    i: np.ndarray   # row
    j: np.ndarray   # column
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    targets: np.ndarray | None

    @property
    def size(self):
        return self.f.shape[0]


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # (iter, lr, l_recon, l_aux, sec)
    final_psnr: float | None = None

    def log(self, iteration, lr, l_recon, l_aux, seconds):
        self.rows.append((iteration, lr, l_recon, l_aux, seconds))

    def save_csv(self, path):
        lines = ["iter,lr,l_recon,l_aux,seconds"]
        for r in self.rows:
            lines.append("%d,%.8g,%.8g,%.8g,%.3f" % r)
        if self.final_psnr is not None:
            lines.append(f"# final_psnr {self.final_psnr:.4f}")
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")


def sample_batch(rng, frames, height, width, fraction, video=None,
                 dtype=np.float32) -> Batch:
    """Uniform sample without replacement of floor(fraction*T*H*W) coords.

    Returned sorted by flat index so same-frame samples are contiguous.
    """
    total = frames * height * width
    size = int(fraction * total)
    if size < 1:
        raise ConfigError(
            f"batch_fraction {fraction} yields an empty batch for "
            f"{frames}x{height}x{width}")
    flat = rng.choice(total, size=size, replace=False)
    flat.sort()
    f = flat // (height * width)
    rem = flat % (height * width)
    i = rem // width
    j = rem % width
    x = (j / max(width - 1, 1)).astype(dtype)
    y = (i / max(height - 1, 1)).astype(dtype)
    t = (f / max(frames - 1, 1)).astype(dtype)
    targets = None
    if video is not None:
        targets = video[f, i, j].astype(dtype)
    return Batch(f, i, j, x, y, t, targets)


def lr_schedule(iteration, cfg: TrainConfig):
    """Cosine annealing from lr_max at 0 to lr_min at cfg.iterations."""
    if cfg.iterations == 0:
        return cfg.lr_min
    frac = min(max(iteration / cfg.iterations, 0.0), 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (
        1.0 + math.cos(math.pi * frac))


def adamw_step(params, lr, weight_decay, t_step, context=""):
    """One decoupled-weight-decay adaptive update.

    Tensors whose gradients arrived only through scatters update
    lazily at the touched entries (moments decay only when touched,
    matching sparse-Adam semantics); everything else updates densely.
    """
    bc1 = 1.0 - ADAM_BETA1 ** t_step
    bc2 = 1.0 - ADAM_BETA2 ** t_step
    for p in params:
        if p.grad is None or p.touched is None:
            continue
        if p.m is None:
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)
        if isinstance(p.touched, list):
            idx = p.touched[0] if len(p.touched) == 1 \
                else np.unique(np.concatenate(p.touched))
            g = p.rows(p.grad)[idx]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {p.name} {context}")
            m = p.rows(p.m)
            v = p.rows(p.v)
            m[idx] = ADAM_BETA1 * m[idx] + (1 - ADAM_BETA1) * g
            v[idx] = ADAM_BETA2 * v[idx] + (1 - ADAM_BETA2) * g * g
            step = lr * (m[idx] / bc1) / (np.sqrt(v[idx] / bc2) + ADAM_EPS)
            p.rows(p.data)[idx] -= step.astype(p.data.dtype)
        else:
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {p.name} {context}")
            p.m *= ADAM_BETA1
            p.m += (1 - ADAM_BETA1) * g
            p.v *= ADAM_BETA2
            p.v += (1 - ADAM_BETA2) * g * g
            step = lr * (p.m / bc1) / (np.sqrt(p.v / bc2) + ADAM_EPS)
            p.data -= step.astype(p.data.dtype)
            if p.decay and weight_decay > 0.0:
                p.data -= (lr * weight_decay) * p.data


def gather_guidance(model: NvtmModel, batch: Batch, guidance):
    """Guidance flow per sample and neighbor offset, shape (B, |P|, 2)."""
    part = model.partition
    n_p = len(model.cfg.neighbors)
    out = np.empty((batch.size, n_p, 2), dtype=batch.x.dtype)
    uf, starts = np.unique(batch.f, return_index=True)
    bounds = list(starts) + [batch.size]
    for u, fidx in enumerate(uf.tolist()):
        lo, hi = bounds[u], bounds[u + 1]
        k = int(part.gop_of(fidx))
        for pi, p in enumerate(model.cfg.neighbors):
            kf = int(part.keyframe_of(min(k + p, part.count - 1)))
            fl = guidance.get((fidx, kf))
            if fl is None:
                raise ConfigError(
                    f"missing guidance flow for frame {fidx} -> keyframe {kf}")
            out[lo:hi, pi] = fl.data[batch.i[lo:hi], batch.j[lo:hi]]
    return out


def total_loss(model: NvtmModel, batch: Batch, guidance, w_aux,
               aux_active, backprop=True):
    """L_total = L_recon + w_aux * L_aux; optionally backprops.

    L_aux is the per-component mean squared difference between decoded
    flows and guidance flows over the batch and every neighbor offset.
    """
    rgb, cache = model.forward_batch(batch.x, batch.y, batch.t, f_int=batch.f)
    l_recon, mse_cache = mse_forward(rgb, batch.targets)
    l_aux = 0.0
    flow_up = None
    if aux_active:
        guid = gather_guidance(model, batch, guidance)
        flows = cache["flows"]
        n_p = len(flows)
        denom = batch.size * 2 * n_p
        diffs = [flows[pi] - guid[:, pi] for pi in range(n_p)]
        l_aux = float(sum(np.sum(d * d) for d in diffs) / denom)
        if backprop:
            flow_up = [w_aux * 2.0 * d / denom for d in diffs]
    total = l_recon + w_aux * l_aux
    if backprop:
        (grgb,) = mse_backward(mse_cache)
        model.backward_batch(cache, grgb, flow_up)
    return total, l_recon, l_aux


def refresh_boxes(model: NvtmModel, rng, sample_size):
    """Refit every grid's box from a subsample of warped coordinates."""
    cfg = model.cfg
    batch = sample_batch(rng, cfg.frames, cfg.height, cfg.width,
                         min(1.0, sample_size / (cfg.frames * cfg.height
                                                 * cfg.width)),
                         dtype=model.dtype)
    f_pos, f_src = model.frame_position(batch.t, batch.f)
    pts = {k: [] for k in range(model.partition.count)}
    xy = np.stack([batch.x, batch.y], axis=1)
    for p in cfg.neighbors:
        flow, kp, _ = model._flow_for_offset(p, batch.x, batch.y, f_pos, f_src)
        aligned = xy + flow
        for k in range(model.partition.count):
            sel = kp == k
            if np.any(sel):
                pts[k].append(aligned[sel])
    for k, chunks in pts.items():
        if not chunks:
            continue
        points = np.concatenate(chunks).astype(np.float64)
        if points.shape[0] < 2 or (np.ptp(points[:, 0]) <= 0
                                   and np.ptp(points[:, 1]) <= 0):
            continue
        model.boxes[k] = fit_norm_box(points, cfg.r_th, cfg.box_bins)


def train(video, guidance, model_cfg: ModelConfig, train_cfg: TrainConfig,
          masks=None, compute_final_psnr=True):
    """Optimize a fresh model against a (T,H,W,3) video in [0,1].

    ``guidance`` maps (frame, keyframe) to FlowField and is required
    while the auxiliary phase is active.  ``masks`` (T,H,W boolean)
    excludes pixels from every batch.  Returns (model, report).
    """
    from .evaluate import decode, masked_loss_filter, psnr

    video = np.asarray(video)
    t, h, w = video.shape[:3]
    if (t, h, w) != (model_cfg.frames, model_cfg.height, model_cfg.width):
        raise ConfigError(
            f"video dims {t}x{h}x{w} do not match model config "
            f"{model_cfg.frames}x{model_cfg.height}x{model_cfg.width}")
    aux_iters = int(round(train_cfg.aux_fraction * train_cfg.iterations))
    if aux_iters > 0 and not guidance:
        raise ConfigError("auxiliary phase requested but no guidance flows")
    box_freeze_at = min(aux_iters, int(round(train_cfg.box_freeze_fraction
                                             * train_cfg.iterations)))

    model = NvtmModel.build(model_cfg, seed=train_cfg.seed,
                            dtype=train_cfg.dtype)
    rng = np.random.default_rng(train_cfg.seed + 1)
    box_rng = np.random.default_rng(train_cfg.seed + 2)
    report = TrainReport()
    started = time.perf_counter()
    vid = video.astype(train_cfg.dtype)

    for it in range(train_cfg.iterations):
        aux_active = it < aux_iters
        if it == 0 or (it < box_freeze_at
                       and it % train_cfg.box_refresh_interval == 0):
            refresh_boxes(model, box_rng, train_cfg.box_sample)
        batch = sample_batch(rng, t, h, w, train_cfg.batch_fraction,
                             video=vid, dtype=train_cfg.dtype)
        if masks is not None:
            batch = masked_loss_filter(batch, masks)
            if batch.size == 0:
                continue
        lr = lr_schedule(it, train_cfg)
        model.params.zero_grad()
        try:
            total, l_recon, l_aux = total_loss(
                model, batch, guidance, train_cfg.w_aux, aux_active)
            adamw_step(model.params, lr, train_cfg.weight_decay, it + 1,
                       context=f"at iteration {it}")
        except NumericError as exc:
            raise NumericError(f"{exc} (iteration {it})") from None
        if it % train_cfg.log_interval == 0 or it == train_cfg.iterations - 1:
            report.log(it, lr, l_recon, l_aux,
                       time.perf_counter() - started)

    model.finalized = True
    if compute_final_psnr and train_cfg.iterations > 0:
        recon = decode(model, (t, h, w))
        report.final_psnr = psnr(recon, video)
    return model, report
