"""GOP partitioning, hyper-generated flow nets, and box normalization.

A video splits into fixed-size GOPs whose first frame is the keyframe.
For every GOP a single affine hyper layer maps a sinusoidal time
embedding to the full weight vector of a small sine-activated flow net;
the net's output, scaled by log1p of the frame distance to the
keyframe, displaces (x, y) onto the keyframe plane.  The log1p form is
finite everywhere, zero exactly at the keyframe (so alignment there is
the identity for any parameters), and grows monotonically with the
frame gap.

Warped coordinates can leave [0,1]^2, so each latent grid carries an
axis-aligned box fitted to the dense part of the warped point cloud;
coordinates renormalize through the box with clipping outside.  Boxes
are stop-gradient constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor
from .errors import ConfigError, DimensionError

BOX_EPS = 1e-6  # widening for an axis the point cloud does not span


@dataclass(frozen=True)
class GopPartition:
    size: int
    total: int

    def __post_init__(self):
        if self.size < 1 or self.total < 1:
            raise ConfigError(
                f"bad partition: size {self.size}, total {self.total}")

    @property
    def count(self):
        return -(-self.total // self.size)

    def gop_of(self, f):
        return np.asarray(f) // self.size

    def keyframe_of(self, k):
        return np.asarray(k) * self.size

    def frames_of(self, k):
        lo = k * self.size
        return range(lo, min(lo + self.size, self.total))


def permitted_gops(partition: GopPartition, neighbors, f):
    """GOP indices frame f may query: own GOP plus clamped neighbors."""
    k = int(partition.gop_of(f))
    return {min(k + p, partition.count - 1) for p in neighbors}


def guidance_pairs(partition: GopPartition, neighbors):
    """All (frame, target keyframe) pairs the auxiliary loss samples."""
    pairs = set()
    for f in range(partition.total):
        for k in permitted_gops(partition, neighbors, f):
            pairs.add((f, int(partition.keyframe_of(k))))
    return sorted(pairs)


def time_embedding(f_pos, total_frames, dim=16):
    """Sine-cosine features of t = f/(T-1) at geometric frequencies.

    Frequencies run geometrically from pi up to pi*(T-1), i.e. the
    highest one advances half a cycle per frame.  Anything faster would
    be unconstrained between the trained frames and alias when decoding
    fractional times (frame interpolation).
    """
    if dim % 2 != 0 or dim < 2:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    f_pos = np.atleast_1d(np.asarray(f_pos, dtype=np.float64))
    n = max(total_frames - 1, 1)
    t = f_pos / n
    half = dim // 2
    if half == 1:
        freqs = np.array([np.pi * n])
    else:
        freqs = np.pi * n ** (np.arange(half) / (half - 1))
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


# ---------------------------------------------------------------------------
# hyper-generated flow net
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowNetShape:
    width: int = 8
    layers: int = 5  # affine layers; all but the last are sine-activated
    omega: float = 30.0

    def layer_dims(self):
        dims = [(2, self.width)]
        dims += [(self.width, self.width)] * (self.layers - 2)
        dims.append((self.width, 2))
        return dims

    @property
    def param_count(self):
        return sum(i * o + o for i, o in self.layer_dims())

    def slices(self):
        """(weight_slice, bias_slice, in, out) per layer into the flat vector."""
        out = []
        pos = 0
        for i, o in self.layer_dims():
            ws = slice(pos, pos + i * o)
            pos += i * o
            bs = slice(pos, pos + o)
            pos += o
            out.append((ws, bs, i, o))
        return out


def siren_flow_init(shape: FlowNetShape, rng, final_gain=0.01):
    """Standard sinusoidal-net init flattened into one parameter vector.

    The output layer is scaled down so generated flows start near zero.
    """
    theta = np.empty(shape.param_count, dtype=np.float64)
    dims = shape.layer_dims()
    for li, (ws, bs, i, o) in enumerate(shape.slices()):
        if li == 0:
            bound = 1.0 / i
        else:
            bound = math.sqrt(6.0 / i) / shape.omega
        if li == len(dims) - 1:
            bound *= final_gain
        theta[ws] = rng.uniform(-bound, bound, i * o)
        theta[bs] = rng.uniform(-bound, bound, o)
    return theta


def init_hyper(shape: FlowNetShape, gop_count, embed_dim, rng, dtype,
               store, weight_scale=1e-4, final_gain=0.01):
    """Per-GOP hyper layer: embedding -> flow-net parameter vector.

    The hyper bias carries a fresh flow-net init per GOP and the hyper
    weight starts tiny, so generated nets begin at a sane sinusoidal
    init and acquire time dependence during training.
    """
    p = shape.param_count
    w = rng.uniform(-weight_scale, weight_scale,
                    size=(gop_count, p, embed_dim)).astype(dtype)
    b = np.stack([siren_flow_init(shape, rng, final_gain=final_gain)
                  for _ in range(gop_count)])
    hyper_w = store.add("flow.hyper_w", w, decay=True)
    hyper_b = store.add("flow.hyper_b", b.astype(dtype))
    return hyper_w, hyper_b


def flow_scale(f_pos, keyframe):
    """log1p of the frame-count distance to the keyframe."""
    return np.log1p(np.abs(np.asarray(f_pos, dtype=np.float64) - keyframe))


def generate_flow_params(hyper_w: Tensor, hyper_b: Tensor, kidx, embed):
    """Generated flow-net parameter stacks for G groups.

    kidx (G,) selects the GOP's hyper layer, embed (G,E) conditions it.
    """
    e = embed.astype(hyper_w.dtype, copy=False)
    theta = np.einsum("gpe,ge->gp", hyper_w.data[kidx], e) + hyper_b.data[kidx]
    return theta, (hyper_w, hyper_b, kidx, e)


def generate_flow_params_backward(cache, dtheta):
    hyper_w, hyper_b, kidx, e = cache
    hyper_w.ensure_grad()
    hyper_b.ensure_grad()
    np.add.at(hyper_w.grad, kidx, np.einsum("gp,ge->gpe", dtheta, e))
    np.add.at(hyper_b.grad, kidx, dtheta)
    hyper_w.touched = False
    hyper_b.touched = False


def flow_net_forward(theta, shape: FlowNetShape, xy, gidx, scales):
    """Evaluate per-sample generated flow nets.

    theta (G,P) holds one generated parameter vector per group, gidx
    (B,) assigns samples to groups, scales (G,) is the log1p factor.
    Input coordinates map to [-1, 1] before the first layer.  Returns
    the scaled flow (B, 2) and the backward cache.
    """
    q = xy * 2.0 - 1.0
    h = q[:, None, :]
    slices = shape.slices()
    acts = []
    for li, (ws, bs, i, o) in enumerate(slices):
        w = theta[:, ws].reshape(-1, i, o)[gidx]
        b = theta[:, bs][gidx][:, None, :]
        a = h @ w + b
        if li < len(slices) - 1:
            acts.append((h, a, w))
            h = np.sin(shape.omega * a)
        else:
            acts.append((h, None, w))
            h = a
    raw = h[:, 0, :]
    s = scales[gidx][:, None].astype(raw.dtype)
    return raw * s, (shape, theta.shape, gidx, scales, acts, raw, s)


def flow_net_backward(cache, dflow):
    """Backprop through generated nets.

    Returns (dtheta (G,P) to feed the hyper layer, dxy (B,2)).
    """
    shape, theta_shape, gidx, scales, acts, raw, s = cache
    g_count = theta_shape[0]
    B = dflow.shape[0]
    dtheta_rows = np.empty((B, theta_shape[1]), dtype=dflow.dtype)
    dh = (dflow * s)[:, None, :]
    slices = shape.slices()
    for li in range(len(slices) - 1, -1, -1):
        ws, bs, i, o = slices[li]
        h, a, w = acts[li]
        if a is not None:
            dh = dh * (shape.omega * np.cos(shape.omega * a))
        dtheta_rows[:, ws] = (h.transpose(0, 2, 1) @ dh).reshape(B, i * o)
        dtheta_rows[:, bs] = dh[:, 0, :]
        dh = dh @ w.transpose(0, 2, 1)
    dxy = dh[:, 0, :] * 2.0
    if g_count == 1:
        dtheta = dtheta_rows.sum(axis=0, keepdims=True)
    else:
        ind = np.zeros((g_count, B), dtype=dflow.dtype)
        ind[gidx, np.arange(B)] = 1.0
        dtheta = ind @ dtheta_rows
    return dtheta, dxy


# ---------------------------------------------------------------------------
# adaptive normalization
# ---------------------------------------------------------------------------

def _axis_interval(x, r_th, bins):
    lo = float(x.min())
    hi = float(x.max())
    if hi - lo <= 0.0:
        return None
    counts, _ = np.histogram(x, bins=bins, range=(lo, hi))
    thresh = r_th * (x.size / bins)
    ok = counts >= thresh
    best = None  # (length, mass, -start) maximized
    start = None
    for i in range(bins + 1):
        if i < bins and ok[i]:
            if start is None:
                start = i
        elif start is not None:
            length = i - start
            mass = int(counts[start:i].sum())
            key = (length, mass, -start)
            if best is None or key > best[0]:
                best = (key, start, i)
            start = None
    _, s, e = best
    width = (hi - lo) / bins
    return lo + s * width, lo + e * width


def fit_norm_box(points, r_th, bins=256):
    """Axis-aligned box around the densest contiguous histogram run.

    Per axis independently: bucket the values, keep the longest run of
    buckets holding at least r_th times the uniform share, break ties
    by run mass then by leftmost start.  An axis the points do not span
    widens by BOX_EPS; if the cloud is a single point there is nothing
    to fit.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 2:
        raise DimensionError(f"need (N,2) points with N >= 2, got {points.shape}")
    if not 0.0 < r_th <= 1.0:
        raise ConfigError(f"r_th must be in (0, 1], got {r_th}")
    ix = _axis_interval(points[:, 0], r_th, bins)
    iy = _axis_interval(points[:, 1], r_th, bins)
    if ix is None and iy is None:
        raise DimensionError("all points identical; box is degenerate")
    if ix is None:
        c = float(points[0, 0])
        ix = (c - BOX_EPS, c + BOX_EPS)
    if iy is None:
        c = float(points[0, 1])
        iy = (c - BOX_EPS, c + BOX_EPS)
    return np.array([ix[0], iy[0], ix[1], iy[1]], dtype=np.float64)


def normalize_forward(xy, boxes, bidx):
    """Affine map into the per-grid box, clipped to [0, 1].

    boxes (m,4) rows are (x_min, y_min, x_max, y_max); bidx selects the
    row per sample.  Returns clipped coordinates and a backward cache.
    """
    b = boxes[bidx]
    span = b[:, 2:4] - b[:, 0:2]
    raw = (xy - b[:, 0:2]) / span
    uv = np.clip(raw, 0.0, 1.0)
    inside = (raw > 0.0) & (raw < 1.0)
    return uv, (span, inside)


def normalize_backward(cache, guv):
    span, inside = cache
    return guv * inside / span
