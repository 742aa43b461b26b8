"""Frame loading/saving plus sequence-dynamics statistics (SI/TI/ME).

Frames live in directories of PNG or binary PPM (P6, 8-bit) files and
are ordered by sorted filename.  Statistics run on the 0-255 intensity
scale so the conventional selection thresholds (30 spatial, 20
temporal) apply directly.  Luma is the unweighted RGB mean, a
documented approximation that keeps scores reproducible here without
pulling in a color-matrix convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DimensionError, FormatError

_FRAME_SUFFIXES = (".png", ".ppm")


@dataclass(frozen=True)
class SequenceStats:
    si: float
    ti: float
    me: float


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if not raw.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (P6)")
    # header: magic, width, height, maxval, separated by whitespace/comments
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise FormatError(f"{path}: bad PPM header fields") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    need = w * h * 3
    data = raw[pos:pos + need]
    if len(data) != need:
        raise FormatError(f"{path}: truncated PPM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def _write_ppm(path: Path, frame_u8: np.ndarray):
    h, w, _ = frame_u8.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(frame_u8).tobytes())


def _read_frame(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".ppm":
        return _read_ppm(path)
    try:
        img = Image.open(path).convert("RGB")
    except Exception as exc:
        raise FormatError(f"{path}: unreadable image ({exc})") from None
    return np.asarray(img, dtype=np.uint8)


def load_video(directory, limit=None) -> np.ndarray:
    """Load frames sorted by filename into a (T,H,W,3) array in [0,1]."""
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in _FRAME_SUFFIXES)
    if limit is not None:
        paths = paths[:limit]
    if not paths:
        raise FormatError(f"{directory}: no PNG/PPM frames found")
    frames = []
    shape = None
    for p in paths:
        arr = _read_frame(p)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise FormatError(
                f"{p}: frame dimensions {arr.shape[:2]} differ from {shape[:2]}")
        frames.append(arr)
    video = np.stack(frames).astype(np.float32) / 255.0
    return video


def save_video(video: np.ndarray, directory, fmt="png", prefix="frame"):
    """Write a [0,1] video as 8-bit frames; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    u8 = np.clip(np.rint(np.asarray(video) * 255.0), 0, 255).astype(np.uint8)
    paths = []
    for f in range(u8.shape[0]):
        path = directory / f"{prefix}_{f:05d}.{fmt}"
        if fmt == "ppm":
            _write_ppm(path, u8[f])
        else:
            Image.fromarray(u8[f], mode="RGB").save(path)
        paths.append(path)
    return paths


def luma(frames: np.ndarray) -> np.ndarray:
    """Unweighted RGB mean over the channel axis."""
    return np.asarray(frames).mean(axis=-1)


def sobel_mag(frame: np.ndarray) -> np.ndarray:
    """sqrt(Gx^2 + Gy^2) with the standard 3x3 kernels, replicate borders."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or frame.shape[0] < 3 or frame.shape[1] < 3:
        raise DimensionError(f"sobel needs a >=3x3 2D frame, got {frame.shape}")
    gx = ndimage.sobel(frame, axis=1, mode="nearest")
    gy = ndimage.sobel(frame, axis=0, mode="nearest")
    return np.sqrt(gx * gx + gy * gy)


def compute_si(video: np.ndarray) -> float:
    """Max over frames of the spatial std of the Sobel magnitude."""
    video = np.asarray(video)
    best = 0.0
    for f in range(video.shape[0]):
        mag = sobel_mag(luma(video[f]) * 255.0)
        best = max(best, float(mag.std()))
    return best


def compute_ti(video: np.ndarray) -> float:
    """Max over successive-frame luma differences of the spatial std."""
    video = np.asarray(video)
    if video.shape[0] < 2:
        raise DimensionError("temporal statistic needs at least 2 frames")
    y = luma(video) * 255.0
    diffs = y[1:] - y[:-1]
    return float(max(d.std() for d in diffs))


def compute_me(video: np.ndarray, flows) -> float:
    """Mean over supplied flows of the mean per-pixel magnitude in pixels.

    Each flow entry points a non-keyframe frame at its GOP keyframe and
    stores normalized displacements, so magnitudes are rescaled by the
    frame extents.
    """
    video = np.asarray(video)
    t, h, w = video.shape[:3]
    flows = list(flows)
    if not flows:
        raise DimensionError("motion statistic needs at least one flow")
    means = []
    for fl in flows:
        if fl.height != h or fl.width != w:
            raise DimensionError(
                f"flow dims {fl.height}x{fl.width} do not match video {h}x{w}")
        dx = fl.data[..., 0] * (w - 1)
        dy = fl.data[..., 1] * (h - 1)
        means.append(float(np.mean(np.sqrt(dx * dx + dy * dy))))
    return float(np.mean(means))


def select_dynamic(stats, si_min=30.0, ti_min=20.0):
    """Indices of sequences passing both thresholds, ranked by ME desc.

    Ties keep input order.
    """
    kept = [i for i, s in enumerate(stats) if s.si >= si_min and s.ti >= ti_min]
    kept.sort(key=lambda i: (-stats[i].me, i))
    return kept


def write_stats_report(path, names, stats):
    """One `name si ti me` line per sequence."""
    lines = [f"{n} {s.si:.4f} {s.ti:.4f} {s.me:.4f}" for n, s in zip(names, stats)]
    Path(path).write_text("\n".join(lines) + "\n")
