"""Decode lattices and metrics for the trained model.

Decoding evaluates the full pipeline over an endpoint-inclusive
coordinate lattice of arbitrary size; doubling the spatial axes to
(2H-1, 2W-1) keeps every original pixel center on the lattice, and
doubling time to 2T-1 interleaves held-out frames between trained
ones.  All matmul batches are padded to one fixed row count so a given
coordinate produces bit-identical output no matter which lattice it
appears in.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .model import NvtmModel

PSNR_CAP_DB = 99.0
_CHUNK = 4096


def psnr(a, b) -> float:
    """Per-frame 10*log10(1/MSE) averaged over frames, 99 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    vals = []
    for f in range(a.shape[0]):
        mse = float(np.mean((a[f] - b[f]) ** 2))
        if mse <= 0.0:
            vals.append(PSNR_CAP_DB)
        else:
            vals.append(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))
    return float(np.mean(vals))


def _axis_coords(n, dtype):
    if n == 1:
        return np.zeros(1, dtype=dtype)
    return (np.arange(n) / (n - 1)).astype(dtype)


def _decode_frame(model, fx, fy, tval, dt):
    n = fx.shape[0]
    frame = np.empty((n, 3), dtype=np.float32)
    ft = np.full(_CHUNK, tval, dtype=dt)
    for s in range(0, n, _CHUNK):
        e = min(s + _CHUNK, n)
        cx, cy = fx[s:e], fy[s:e]
        if e - s < _CHUNK:  # pad to the fixed row count, discard later
            pad = _CHUNK - (e - s)
            cx = np.concatenate([cx, np.repeat(cx[:1], pad)])
            cy = np.concatenate([cy, np.repeat(cy[:1], pad)])
        rgb, _ = model.forward_batch(cx, cy, ft)
        frame[s:e] = rgb[: e - s]
    return frame


def decode(model: NvtmModel, shape=None, threads=1) -> np.ndarray:
    """Evaluate the model over a (T,H,W) lattice; output clamped to [0,1].

    Every matmul batch has the same fixed row count, so a coordinate
    decodes to bit-identical values on any lattice that contains it.
    Frames are independent; ``threads`` > 1 decodes them in a pool.
    """
    if not model.finalized:
        raise ConfigError("model is not finalized; train or load it first")
    if shape is None:
        shape = (model.cfg.frames, model.cfg.height, model.cfg.width)
    t_out, h_out, w_out = shape
    dt = model.dtype
    xs = _axis_coords(w_out, dt)
    ys = _axis_coords(h_out, dt)
    ts = _axis_coords(t_out, dt)
    gx, gy = np.meshgrid(xs, ys)  # (H, W)
    fx = gx.reshape(-1)
    fy = gy.reshape(-1)
    out = np.empty((t_out, h_out, w_out, 3), dtype=np.float32)
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            frames = pool.map(
                lambda f: _decode_frame(model, fx, fy, ts[f], dt),
                range(t_out))
            for f, frame in enumerate(frames):
                out[f] = frame.reshape(h_out, w_out, 3)
    else:
        for f in range(t_out):
            out[f] = _decode_frame(model, fx, fy, ts[f], dt).reshape(
                h_out, w_out, 3)
    np.clip(out, 0.0, 1.0, out=out)
    return out


def sr_shape(model: NvtmModel):
    """Doubled spatial lattice preserving original pixel centers."""
    return (model.cfg.frames, 2 * model.cfg.height - 1,
            2 * model.cfg.width - 1)


def fi_shape(model: NvtmModel):
    """Doubled temporal lattice interleaving held-out frames."""
    return (2 * model.cfg.frames - 1, model.cfg.height, model.cfg.width)


# ---------------------------------------------------------------------------
# inpainting masks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskSpec:
    count: int = 10
    side: int | None = None  # defaults to round(0.1 * min(H, W))
    seed: int = 0


def gen_masks(spec: MaskSpec, frames, height, width):
    """Per-frame union of `count` random side x side boxes, (T,H,W) bool."""
    side = spec.side
    if side is None:
        side = int(round(0.1 * min(height, width)))
    if side >= min(height, width):
        raise ConfigError(
            f"mask side {side} does not fit inside {height}x{width}")
    rng = np.random.default_rng(spec.seed)
    masks = np.zeros((frames, height, width), dtype=bool)
    for f in range(frames):
        for _ in range(spec.count):
            top = int(rng.integers(0, height - side + 1))
            left = int(rng.integers(0, width - side + 1))
            masks[f, top:top + side, left:left + side] = True
    return masks


def masked_loss_filter(batch, masks):
    """Drop batch entries that land inside masked pixels."""
    keep = ~masks[batch.f, batch.i, batch.j]
    fields = {"f": batch.f[keep], "i": batch.i[keep], "j": batch.j[keep],
              "x": batch.x[keep], "y": batch.y[keep], "t": batch.t[keep],
              "targets": None if batch.targets is None else batch.targets[keep]}
    return dataclasses.replace(batch, **fields)


def region_psnr(a, b, region) -> float:
    """PSNR pooled over the pixels selected by a (T,H,W) boolean region."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not np.any(region):
        raise DimensionError("empty region")
    mse = float(np.mean((a[region] - b[region]) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def copy_prev_frame(video):
    """Copy-previous-frame predictor; frame 0 copies frame 1."""
    video = np.asarray(video)
    pred = np.empty_like(video)
    pred[1:] = video[:-1]
    pred[0] = video[1] if video.shape[0] > 1 else video[0]
    return pred


# ---------------------------------------------------------------------------
# latent similarity
# ---------------------------------------------------------------------------

def _latents_for(model, coords):
    dt = model.dtype
    arr = np.asarray(coords, dtype=np.float64)
    x = arr[:, 0].astype(dt)
    y = arr[:, 1].astype(dt)
    f = arr[:, 2].astype(np.int64)
    z, _ = model.latent_forward(x, y, np.zeros_like(x), f_int=f)
    return z.astype(np.float64)


def _cosine(a, b):
    num = np.sum(a * b, axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return num / np.maximum(den, 1e-12)


def latent_similarity_report(model: NvtmModel, correspondences, random_pairs):
    """Cosine-similarity statistics of z over pixel pairs.

    ``correspondences`` and ``random_pairs`` are sequences of
    ((x, y, f), (x', y', f')) tuples.  Returns summary statistics and
    the margin between the two groups' means.
    """
    if len(correspondences) < 2 or len(random_pairs) < 2:
        raise DimensionError("need at least 2 pairs per group")

    def stats(pairs):
        za = _latents_for(model, [p[0] for p in pairs])
        zb = _latents_for(model, [p[1] for p in pairs])
        cos = _cosine(za, zb)
        return {"mean": float(cos.mean()),
                "p10": float(np.percentile(cos, 10)),
                "p50": float(np.percentile(cos, 50)),
                "p90": float(np.percentile(cos, 90))}

    corr = stats(correspondences)
    rand = stats(random_pairs)
    return {"corresponding": corr, "random": rand,
            "margin": corr["mean"] - rand["mean"]}


def baseline_alignment(model: NvtmModel, mode, scale_px=0.0, seed=0):
    """Model copy whose flow decoding is replaced for ablation runs."""
    if mode not in ("zero", "random"):
        raise ConfigError(f"baseline mode must be zero or random, got {mode}")
    return model.copy(alignment_mode=mode, align_scale_px=float(scale_px),
                      align_seed=int(seed))
