"""Model serialization, 8-bit quantization, and grid export.

The model file is little-endian binary: magic "NVTM", a version, flag
bits, a JSON header (configs, dtype, finalized state), the per-grid
normalization boxes, then every parameter tensor in ParamStore order.
Unquantized files round-trip bit exactly.  Quantized files store each
tensor as affine-mapped bytes; latent grid levels quantize per
(gop, channel) slice so that the image export below reproduces exactly
the same dequantized values.

The grid export lays each (level, channel) out as a directory of 8-bit
grayscale images, one per GOP in temporal order, ready to feed an
external video codec; a text manifest carries the per-slice scales.
The rest of the model rides along as a quantized file with the latent
tensors omitted.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, NumericError
from .model import ModelConfig, NvtmModel

MODEL_MAGIC = b"NVTM"
FORMAT_VERSION = 1
FLAG_QUANTIZED = 1
FLAG_NO_LATENT = 2

_KIND_RAW = 0
_KIND_QTENSOR = 1
_KIND_QSLICE = 2


def quantize_u8(arr):
    """Affine 8-bit quantization: returns (bytes, scale, offset).

    Constant tensors store scale 0 and reconstruct exactly.
    """
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NumericError("cannot quantize non-finite values")
    mn = float(arr.min())
    mx = float(arr.max())
    if mx == mn:
        return np.zeros(arr.shape, dtype=np.uint8), 0.0, mn
    q = np.rint((arr - mn) * (255.0 / (mx - mn)))
    return q.astype(np.uint8), (mx - mn) / 255.0, mn


def dequantize_u8(q, scale, offset, dtype=np.float32):
    return (q.astype(np.float64) * scale + offset).astype(dtype)


def bpp(total_bytes, frames, height, width) -> float:
    """Bits per pixel of a payload over a T x H x W video."""
    return 8.0 * total_bytes / (frames * height * width)


def _is_latent(name):
    return name.startswith("latent.level")


def _quantize_entry(tensor):
    """(kind, payload bytes) for one tensor under quantized saving."""
    data = tensor.data
    if _is_latent(tensor.name):
        count, _, _, feats = data.shape
        parts = []
        for g in range(count):
            for c in range(feats):
                q, scale, offset = quantize_u8(data[g, :, :, c])
                parts.append(struct.pack("<dd", scale, offset) + q.tobytes())
        return _KIND_QSLICE, b"".join(parts)
    q, scale, offset = quantize_u8(data)
    return _KIND_QTENSOR, struct.pack("<dd", scale, offset) + q.tobytes()


def _dequantize_entry(kind, payload, shape, dtype):
    if kind == _KIND_QTENSOR:
        scale, offset = struct.unpack("<dd", payload[:16])
        q = np.frombuffer(payload[16:], dtype=np.uint8).reshape(shape)
        return dequantize_u8(q, scale, offset, dtype)
    count, r, _, feats = shape
    out = np.empty(shape, dtype=dtype)
    pos = 0
    plane_bytes = r * r
    for g in range(count):
        for c in range(feats):
            scale, offset = struct.unpack("<dd", payload[pos:pos + 16])
            pos += 16
            q = np.frombuffer(payload[pos:pos + plane_bytes],
                              dtype=np.uint8).reshape(r, r)
            pos += plane_bytes
            out[g, :, :, c] = dequantize_u8(q, scale, offset, dtype)
    return out


def save_model(model: NvtmModel, path, quantize=False, omit_latents=False):
    """Write the model file; returns the byte count written."""
    dtype_name = np.dtype(model.dtype).name
    header = json.dumps({
        "config": model.cfg.to_dict(),
        "dtype": dtype_name,
        "finalized": model.finalized,
    }).encode()
    flags = (FLAG_QUANTIZED if quantize else 0) | \
            (FLAG_NO_LATENT if omit_latents else 0)
    chunks = [MODEL_MAGIC, struct.pack("<II", FORMAT_VERSION, flags),
              struct.pack("<I", len(header)), header,
              struct.pack("<I", model.boxes.shape[0]),
              model.boxes.astype("<f8").tobytes()]
    entries = [(n, t) for n, t in model.params.items()
               if not (omit_latents and _is_latent(n))]
    chunks.append(struct.pack("<I", len(entries)))
    for name, tensor in entries:
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        if quantize:
            kind, payload = _quantize_entry(tensor)
        else:
            kind, payload = _KIND_RAW, tensor.data.astype(
                "<" + np.dtype(model.dtype).char).tobytes()
        chunks.append(struct.pack("<BB", kind, tensor.data.ndim))
        chunks.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
        chunks.append(struct.pack("<Q", len(payload)))
        chunks.append(payload)
    blob = b"".join(chunks)
    Path(path).write_bytes(blob)
    return len(blob)


class _Reader:
    def __init__(self, raw, label):
        self.raw = raw
        self.pos = 0
        self.label = label

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.label}: truncated model file")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path, allow_missing_latents=False) -> NvtmModel:
    """Read a model file back; inverse of save_model up to quantization."""
    rd = _Reader(Path(path).read_bytes(), str(path))
    if rd.take(4) != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic, not a model file")
    version, flags = rd.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    (hlen,) = rd.unpack("<I")
    header = json.loads(rd.take(hlen).decode())
    cfg = ModelConfig.from_dict(header["config"])
    dtype = np.dtype(header["dtype"]).type
    (box_count,) = rd.unpack("<I")
    boxes = np.frombuffer(rd.take(box_count * 32), dtype="<f8")
    boxes = boxes.reshape(box_count, 4).copy()

    model = NvtmModel.build(cfg, seed=0, dtype=dtype)
    model.boxes = boxes
    model.finalized = bool(header["finalized"])
    (count,) = rd.unpack("<I")
    seen = set()
    quantized = bool(flags & FLAG_QUANTIZED)
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode()
        kind, ndim = rd.unpack("<BB")
        shape = rd.unpack(f"<{ndim}I")
        (plen,) = rd.unpack("<Q")
        payload = rd.take(plen)
        if name not in model.params:
            raise FormatError(f"{path}: unknown tensor {name}")
        tensor = model.params[name]
        if tuple(shape) != tensor.data.shape:
            raise FormatError(
                f"{path}: tensor {name} shape {shape} vs {tensor.data.shape}")
        if kind == _KIND_RAW:
            if quantized:
                raise FormatError(f"{path}: raw tensor {name} in quantized file")
            arr = np.frombuffer(payload,
                                dtype="<" + np.dtype(dtype).char).reshape(shape)
            tensor.data[...] = arr
        else:
            tensor.data[...] = _dequantize_entry(kind, payload, shape, dtype)
        seen.add(name)
    missing = set(model.params.names()) - seen
    if flags & FLAG_NO_LATENT:
        missing = {n for n in missing if not _is_latent(n)}
        if not allow_missing_latents:
            raise FormatError(
                f"{path}: latent grids were exported separately; "
                f"re-import through the grid export layout")
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)}")
    return model


def quantized_copy(model: NvtmModel) -> NvtmModel:
    """In-memory model with every tensor through the 8-bit round trip.

    Matches the file/export quantization exactly (latent levels per
    (gop, channel) slice, everything else per tensor).
    """
    out = model.copy()
    for name, tensor in out.params.items():
        kind, payload = _quantize_entry(tensor)
        tensor.data[...] = _dequantize_entry(kind, payload,
                                             tensor.data.shape, out.dtype)
    return out


# ---------------------------------------------------------------------------
# grid-as-video export
# ---------------------------------------------------------------------------

def export_grid_video(model: NvtmModel, out_dir):
    """Write the codec-ready layout; returns a summary dict.

    out_dir/
      model.nvtm                 quantized, latent tensors omitted
      level{L}_feat{C}/{G}.png   one 8-bit grayscale image per GOP
      manifest.txt               resolutions and per-plane scale/offset
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rest_bytes = save_model(model, out_dir / "model.nvtm",
                            quantize=True, omit_latents=True)
    cfg = model.cfg.latent
    count = model.latent_grid.count
    lines = [f"levels {cfg.levels}", f"feats {cfg.feats}", f"gops {count}"]
    total_image_bytes = 0
    dirs = []
    for l, plane in enumerate(model.latent_grid.planes):
        res = plane.shape[1]
        lines.append(f"res {l} {res}")
        for c in range(cfg.feats):
            d = out_dir / f"level{l:02d}_feat{c:02d}"
            d.mkdir(exist_ok=True)
            dirs.append(d)
            for g in range(count):
                q, scale, offset = quantize_u8(plane.data[g, :, :, c])
                p = d / f"{g:04d}.png"
                Image.fromarray(q, mode="L").save(p)
                total_image_bytes += p.stat().st_size
                lines.append(f"plane {l} {g} {c} {scale!r} {offset!r}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    return {"dirs": dirs, "model_bytes": rest_bytes,
            "image_bytes": total_image_bytes,
            "manifest": out_dir / "manifest.txt"}


def import_grid_video(in_dir) -> NvtmModel:
    """Rebuild a model from an export directory (decoded images)."""
    in_dir = Path(in_dir)
    model = load_model(in_dir / "model.nvtm", allow_missing_latents=True)
    manifest = in_dir / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"{manifest}: missing manifest")
    meta = {}
    planes = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] in ("levels", "feats", "gops"):
            meta[parts[0]] = int(parts[1])
        elif parts[0] == "res":
            meta.setdefault("res", {})[int(parts[1])] = int(parts[2])
        elif parts[0] == "plane":
            planes.append((int(parts[1]), int(parts[2]), int(parts[3]),
                           float(parts[4]), float(parts[5])))
        else:
            raise FormatError(f"{manifest}:{lineno}: unknown entry {parts[0]}")
    cfg = model.cfg.latent
    if meta.get("levels") != cfg.levels or meta.get("feats") != cfg.feats \
            or meta.get("gops") != model.latent_grid.count:
        raise FormatError(f"{manifest}: layout does not match the model config")
    for l, g, c, scale, offset in planes:
        p = in_dir / f"level{l:02d}_feat{c:02d}" / f"{g:04d}.png"
        try:
            q = np.asarray(Image.open(p).convert("L"), dtype=np.uint8)
        except Exception as exc:
            raise FormatError(f"{p}: unreadable plane image ({exc})") from None
        res = model.latent_grid.planes[l].shape[1]
        if q.shape != (res, res):
            raise FormatError(f"{p}: plane is {q.shape}, expected {res}x{res}")
        model.latent_grid.planes[l].data[g, :, :, c] = dequantize_u8(
            q, scale, offset, model.dtype)
    return model


def tree_bytes(path) -> int:
    """Total size of all files under a directory (for bpp accounting)."""
    path = Path(path)
    if path.is_file():
        return path.stat().st_size
    return sum(p.stat().st_size for p in path.rglob("*") if p.is_file())
