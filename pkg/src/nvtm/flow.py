"""Guidance flow: synthetic ground truth, a classical estimator, file I/O.

Flows are stored in normalized units (fractions of (W-1) and (H-1))
under the backward-warp convention: content at pixel p of the source
frame equals content at p + flow in the target frame.  That makes the
coordinate alignment a plain addition.

The built-in estimator is Horn-Schunck; externally computed flow drops
in through the NVTF file format plus a plain-text manifest, no code
changes required.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionError, FormatError
from .videoio import luma

FLOW_MAGIC = b"NVTF"

_HS_KERNEL = np.array([[1 / 12, 1 / 6, 1 / 12],
                       [1 / 6, 0.0, 1 / 6],
                       [1 / 12, 1 / 6, 1 / 12]])


@dataclass
class FlowField:
    height: int
    width: int
    data: np.ndarray  # (H, W, 2) normalized (dx, dy)
    source_frame: int
    target_frame: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.shape != (self.height, self.width, 2):
            raise DimensionError(
                f"flow data shape {self.data.shape} vs "
                f"({self.height}, {self.width}, 2)")
        if not np.all(np.isfinite(self.data)):
            raise FormatError("flow field contains non-finite values")


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "translate"  # translate | rotate | parallax
    frames: int = 16
    height: int = 48
    width: int = 48
    velocity: tuple = (1.0, 0.0)  # px/frame (vx, vy); fg layer for parallax
    omega_deg: float = 1.0        # rotate: degrees/frame
    bg_velocity: tuple = (0.0, 0.0)
    texture_seed: int = 0

    def __post_init__(self):
        if self.frames < 1 or self.height < 8 or self.width < 8:
            raise DimensionError(
                f"degenerate synthetic size {self.frames}x{self.height}x{self.width}")
        if self.kind not in ("translate", "rotate", "parallax"):
            raise FormatError(f"unknown synthetic kind: {self.kind}")


def _texture(seed, components=8):
    """Smooth non-harmonic RGB texture defined on all of R^2 (pixels).

    A gentle sinusoidal warp of the sample coordinates keeps the
    pattern band-limited but breaks the pure-harmonic structure, so it
    cannot be absorbed by a few sine units.
    """
    rng = np.random.default_rng(seed)
    warp = (rng.uniform(1.2, 2.4, 2), rng.uniform(14.0, 30.0, 2),
            rng.uniform(0.0, 2 * np.pi, 2))
    waves = []
    for _ in range(3):
        lam = rng.uniform(4.0, 20.0, components)
        lam[0] = rng.uniform(24.0, 40.0)  # one coarse component per channel
        theta = rng.uniform(0.0, 2 * np.pi, components)
        fx = np.cos(theta) / lam
        fy = np.sin(theta) / lam
        phase = rng.uniform(0.0, 2 * np.pi, components)
        amp = rng.uniform(0.5, 1.0, components)
        amp = 0.38 * amp / amp.sum()
        waves.append((fx, fy, phase, amp))

    def tex(upx, vpx):
        upx = np.asarray(upx, dtype=np.float64)
        vpx = np.asarray(vpx, dtype=np.float64)
        wa, wl, wp = warp
        uw = upx + wa[0] * np.sin(2 * np.pi * vpx / wl[0] + wp[0])
        vw = vpx + wa[1] * np.sin(2 * np.pi * upx / wl[1] + wp[1])
        out = np.empty(upx.shape + (3,), dtype=np.float64)
        for c, (fx, fy, phase, amp) in enumerate(waves):
            acc = np.full(upx.shape, 0.5)
            for k in range(components):
                acc = acc + amp[k] * np.sin(
                    2 * np.pi * (fx[k] * uw + fy[k] * vw) + phase[k])
            out[..., c] = acc
        return out

    return tex


def _pixel_grid(h, w):
    v, u = np.meshgrid(np.arange(h, dtype=np.float64),
                       np.arange(w, dtype=np.float64), indexing="ij")
    return u, v


def _parallax_alpha(qu, qv, h, w):
    r0 = 0.30 * min(h, w)
    cu, cv = (w - 1) / 2.0, (h - 1) / 2.0
    d = np.sqrt((qu - cu) ** 2 + (qv - cv) ** 2)
    return 1.0 / (1.0 + np.exp((d - r0) / 1.5))


def gen_synthetic(spec: SyntheticSpec):
    """Render a synthetic video plus an exact-flow provider.

    Returns ``(video, flow_fn)`` where ``flow_fn(f, kf)`` yields the
    displacement field mapping content of frame f onto frame kf under
    the backward-warp convention above.  For parallax the label is the
    visible layer's motion, which is exact away from the soft blob edge.
    """
    tex = _texture(spec.texture_seed)
    t, h, w = spec.frames, spec.height, spec.width
    u, v = _pixel_grid(h, w)
    cu, cv = (w - 1) / 2.0, (h - 1) / 2.0
    vx, vy = spec.velocity
    frames = np.empty((t, h, w, 3), dtype=np.float32)

    if spec.kind == "translate":
        for f in range(t):
            frames[f] = tex(u - f * vx, v - f * vy)

        def flow_fn(f, kf):
            d = np.empty((h, w, 2), dtype=np.float32)
            d[..., 0] = (kf - f) * vx / (w - 1)
            d[..., 1] = (kf - f) * vy / (h - 1)
            return FlowField(h, w, d, f, kf)

    elif spec.kind == "rotate":
        # rigid motion: rotation about the frame center plus translation
        step = np.deg2rad(spec.omega_deg)
        for f in range(t):
            a = -f * step
            su, sv = u - cu - f * vx, v - cv - f * vy
            frames[f] = tex(cu + np.cos(a) * su - np.sin(a) * sv,
                            cv + np.sin(a) * su + np.cos(a) * sv)

        def flow_fn(f, kf):
            a = -(f - kf) * step
            su, sv = u - cu - f * vx, v - cv - f * vy
            pu = cu + kf * vx + np.cos(a) * su - np.sin(a) * sv
            pv = cv + kf * vy + np.sin(a) * su + np.cos(a) * sv
            d = np.empty((h, w, 2), dtype=np.float32)
            d[..., 0] = (pu - u) / (w - 1)
            d[..., 1] = (pv - v) / (h - 1)
            return FlowField(h, w, d, f, kf)

    else:  # parallax
        bx, by = spec.bg_velocity
        fg_tex = _texture(spec.texture_seed + 1)
        for f in range(t):
            qu, qv = u - f * vx, v - f * vy
            alpha = _parallax_alpha(qu, qv, h, w)
            fg = fg_tex(qu, qv)
            bg = tex(u - f * bx, v - f * by)
            frames[f] = alpha[..., None] * fg + (1 - alpha[..., None]) * bg

        def flow_fn(f, kf):
            alpha = _parallax_alpha(u - f * vx, v - f * vy, h, w)
            fg_mask = alpha > 0.5
            d = np.empty((h, w, 2), dtype=np.float32)
            d[..., 0] = np.where(fg_mask, (kf - f) * vx, (kf - f) * bx) / (w - 1)
            d[..., 1] = np.where(fg_mask, (kf - f) * vy, (kf - f) * by) / (h - 1)
            return FlowField(h, w, d, f, kf)

    np.clip(frames, 0.0, 1.0, out=frames)
    return frames, flow_fn


def estimate_flow(a, b, alpha=15.0, iters=200) -> FlowField:
    """Dense Horn-Schunck flow such that a(p) ~ b(p + flow).

    Intensities run on the 0-255 scale internally so the default
    smoothness weight has its conventional magnitude.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if alpha <= 0:
        raise FormatError(f"alpha must be positive, got {alpha}")
    i1 = luma(a) * 255.0 if a.ndim == 3 else np.asarray(a, np.float64) * 255.0
    i2 = luma(b) * 255.0 if b.ndim == 3 else np.asarray(b, np.float64) * 255.0
    h, w = i1.shape
    p1 = np.pad(i1, ((0, 1), (0, 1)), mode="edge")
    p2 = np.pad(i2, ((0, 1), (0, 1)), mode="edge")
    ix = 0.25 * ((p1[:-1, 1:] - p1[:-1, :-1]) + (p1[1:, 1:] - p1[1:, :-1])
                 + (p2[:-1, 1:] - p2[:-1, :-1]) + (p2[1:, 1:] - p2[1:, :-1]))
    iy = 0.25 * ((p1[1:, :-1] - p1[:-1, :-1]) + (p1[1:, 1:] - p1[:-1, 1:])
                 + (p2[1:, :-1] - p2[:-1, :-1]) + (p2[1:, 1:] - p2[:-1, 1:]))
    it = 0.25 * ((p2[:-1, :-1] - p1[:-1, :-1]) + (p2[:-1, 1:] - p1[:-1, 1:])
                 + (p2[1:, :-1] - p1[1:, :-1]) + (p2[1:, 1:] - p1[1:, 1:]))
    denom = alpha * alpha + ix * ix + iy * iy
    u = np.zeros((h, w))
    v = np.zeros((h, w))
    for _ in range(iters):
        ub = ndimage.convolve(u, _HS_KERNEL, mode="nearest")
        vb = ndimage.convolve(v, _HS_KERNEL, mode="nearest")
        t = (ix * ub + iy * vb + it) / denom
        u = ub - ix * t
        v = vb - iy * t
    data = np.stack([u / (w - 1), v / (h - 1)], axis=-1).astype(np.float32)
    return FlowField(h, w, data, 0, 0)


def compute_guidance(video, pairs, alpha=15.0, iters=200):
    """Horn-Schunck guidance for each (frame, keyframe) pair."""
    out = {}
    for f, kf in pairs:
        if f == kf:
            h, w = video.shape[1:3]
            fl = FlowField(h, w, np.zeros((h, w, 2), np.float32), f, kf)
        else:
            fl = estimate_flow(video[f], video[kf], alpha=alpha, iters=iters)
            fl.source_frame, fl.target_frame = f, kf
        out[(f, kf)] = fl
    return out


def synthetic_guidance(flow_fn, pairs):
    """Exact guidance from a gen_synthetic flow provider."""
    return {(f, kf): flow_fn(f, kf) for f, kf in pairs}


# ---------------------------------------------------------------------------
# NVTF file format and manifests
# ---------------------------------------------------------------------------

def write_flow(path, field: FlowField):
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<IIII", field.width, field.height,
                            field.source_frame, field.target_frame))
        f.write(field.data.astype("<f4").tobytes())


def read_flow(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != FLOW_MAGIC:
        raise FormatError(f"{path}: not an NVTF flow file")
    w, h, src, tgt = struct.unpack("<IIII", raw[4:20])
    need = h * w * 2 * 4
    payload = raw[20:]
    if len(payload) != need:
        raise FormatError(
            f"{path}: payload {len(payload)} bytes, expected {need}")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).copy()
    return FlowField(h, w, data, src, tgt)


def write_manifest(path, entries):
    """entries: iterable of (frame, keyframe, flow_path)."""
    lines = [f"{f} {kf} {p}" for f, kf, p in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    entries = []
    base = Path(path).parent
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected `frame keyframe path`")
        try:
            f, kf = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad frame indices") from None
        p = Path(parts[2])
        entries.append((f, kf, p if p.is_absolute() else base / p))
    return entries


def load_guidance(manifest_path, height, width):
    """Manifest -> {(frame, keyframe): FlowField}, validating dimensions."""
    out = {}
    for f, kf, p in read_manifest(manifest_path):
        fl = read_flow(p)
        if fl.height != height or fl.width != width:
            raise DimensionError(
                f"{p}: flow dims {fl.width}x{fl.height} do not match "
                f"video {width}x{height}")
        fl.source_frame, fl.target_frame = f, kf
        out[(f, kf)] = fl
    return out
