"""The full video model: parameters, latent assembly, rgb synthesis.

One forward pass per batch of (x, y, t) samples:

1. map t to a (possibly fractional) source-frame position and pick the
   GOP for each configured neighbor offset,
2. decode the alignment flow from that GOP's hyper-generated net and
   displace (x, y) onto the keyframe plane,
3. renormalize through the grid's box and interpolate the latent grid,
4. concatenate neighbor latents (ascending offset) plus the static-grid
   features sampled at the raw coordinates,
5. run the modulated synthesizer on (x, y, t) and the latent.

The backward pass mirrors this chain exactly; reconstruction gradients
reach the flow parameters through the grid-coordinate gradient even
when the auxiliary flow loss is off.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import alignment as al
from . import grids
from .diffcore import ParamStore
from .errors import ConfigError, DimensionError
from .network import ModSirenConfig, ModulatedSiren

FRAME_SNAP = 1e-6  # treat near-integer frame positions as exact frames


@dataclass(frozen=True)
class ModelConfig:
    frames: int
    height: int
    width: int
    gop_size: int = 10
    neighbors: tuple = (0, 1)
    latent: grids.GridConfig = field(default_factory=grids.GridConfig)
    static: grids.GridConfig | None = field(
        default_factory=lambda: grids.GridConfig(16, 16, 1.35, 2))
    net_depth: int = 3
    net_width: int = 185
    omega0: float = 30.0
    omega_hidden: float = 30.0
    embed_dim: int = 16
    flow_width: int = 8
    flow_layers: int = 5
    flow_omega: float = 10.0
    r_th: float = 0.5
    box_bins: int = 256
    time_gain: float = 1.0            # scales the synthesizer's t input
    latent_mode: str = "modulate"     # modulate | direct
    alignment_mode: str = "learned"   # learned | zero | random
    align_scale_px: float = 0.0
    align_seed: int = 0

    def __post_init__(self):
        if self.frames < 1 or self.height < 2 or self.width < 2:
            raise ConfigError(
                f"bad video dims {self.frames}x{self.height}x{self.width}")
        if not self.neighbors or min(self.neighbors) < 0:
            raise ConfigError(f"neighbor offsets must be non-negative, "
                              f"got {self.neighbors}")
        if tuple(sorted(set(self.neighbors))) != tuple(self.neighbors):
            raise ConfigError(f"neighbor offsets must be ascending and unique, "
                              f"got {self.neighbors}")
        if self.alignment_mode not in ("learned", "zero", "random"):
            raise ConfigError(f"unknown alignment mode: {self.alignment_mode}")

    @property
    def z_dim(self):
        z = len(self.neighbors) * self.latent.feature_dim
        if self.static is not None:
            z += self.static.feature_dim
        return z

    def partition(self):
        return al.GopPartition(self.gop_size, self.frames)

    def flow_shape(self):
        return al.FlowNetShape(self.flow_width, self.flow_layers,
                               self.flow_omega)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["neighbors"] = list(self.neighbors)
        d["latent"] = dataclasses.asdict(self.latent)
        d["static"] = dataclasses.asdict(self.static) if self.static else None
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["neighbors"] = tuple(d["neighbors"])
        d["latent"] = grids.GridConfig(**d["latent"])
        d["static"] = grids.GridConfig(**d["static"]) if d["static"] else None
        return ModelConfig(**d)


class NvtmModel:
    """Trainable parameters plus the frozen normalization boxes."""

    def __init__(self, cfg: ModelConfig, params: ParamStore, net,
                 latent_grid, static_grid, boxes, dtype):
        self.cfg = cfg
        self.params = params
        self.net = net
        self.latent_grid = latent_grid
        self.static_grid = static_grid
        self.boxes = boxes          # (gop_count, 4) float64
        self.dtype = dtype
        self.finalized = False
        self._random_fields = {}

    # -- construction -----------------------------------------------------

    @classmethod
    def build(cls, cfg: ModelConfig, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        part = cfg.partition()
        al.init_hyper(cfg.flow_shape(), part.count, cfg.embed_dim, rng,
                      dtype, store)
        latent = grids.init_planes(cfg.latent, part.count, rng, dtype,
                                   store, prefix="latent")
        static = None
        if cfg.static is not None:
            static = grids.init_planes(cfg.static, 1, rng, dtype,
                                       store, prefix="static")
        net_cfg = ModSirenConfig(z_dim=cfg.z_dim, depth=cfg.net_depth,
                                 width=cfg.net_width, omega0=cfg.omega0,
                                 omega_hidden=cfg.omega_hidden,
                                 mode=cfg.latent_mode)
        net = ModulatedSiren(net_cfg, store, rng, dtype)
        boxes = np.tile(np.array([0.0, 0.0, 1.0, 1.0]), (part.count, 1))
        return cls(cfg, store, net, latent, static, boxes, dtype)

    def copy(self, **overrides):
        """Deep parameter copy, optionally with config overrides."""
        cfg = dataclasses.replace(self.cfg, **overrides)
        store = ParamStore()
        for name, t in self.params.items():
            store.add(name, t.data.copy(), decay=t.decay)
        latent = grids.MultiResGrid2D(
            cfg.latent, [store[p.name] for p in self.latent_grid.planes])
        static = None
        if self.static_grid is not None:
            static = grids.MultiResGrid2D(
                cfg.static, [store[p.name] for p in self.static_grid.planes])
        net = ModulatedSiren.__new__(ModulatedSiren)
        net.cfg = self.net.cfg
        net.in_dim = self.net.in_dim
        net.out_dim = self.net.out_dim
        net.synth = [(store[w.name], store[b.name]) for w, b in self.net.synth]
        net.out = (store[self.net.out[0].name], store[self.net.out[1].name])
        net.mod = [(store[w.name], store[b.name]) for w, b in self.net.mod]
        m = NvtmModel(cfg, store, net, latent, static,
                      self.boxes.copy(), self.dtype)
        m.finalized = self.finalized
        return m

    # -- frame bookkeeping --------------------------------------------------

    @property
    def partition(self):
        return self.cfg.partition()

    def frame_position(self, t, f_int=None):
        """Continuous source-frame position plus the integer frame used
        for GOP selection.  Near-integer positions snap exactly so
        keyframe alignment stays the identity on the training lattice."""
        if f_int is not None:
            f_pos = np.asarray(f_int, dtype=np.float64)
        else:
            f_pos = np.asarray(t, dtype=np.float64) * max(self.cfg.frames - 1, 1)
            r = np.rint(f_pos)
            f_pos = np.where(np.abs(f_pos - r) < FRAME_SNAP, r, f_pos)
        f_src = np.clip(np.floor(f_pos + 0.5), 0,
                        self.cfg.frames - 1).astype(np.int64)
        return f_pos, f_src

    # -- alignment flow -----------------------------------------------------

    def _random_field(self, kp, f_src):
        key = (int(kp), int(f_src))
        fld = self._random_fields.get(key)
        if fld is None:
            mix = (self.cfg.align_seed * 1000003 + key[0] * 131071
                   + key[1] * 8191) & 0x7FFFFFFF
            rng = np.random.default_rng(mix)
            h, w = self.cfg.height, self.cfg.width
            px = rng.uniform(-self.cfg.align_scale_px, self.cfg.align_scale_px,
                             size=(h, w, 2))
            fld = np.empty_like(px)
            fld[..., 0] = px[..., 0] / (w - 1)
            fld[..., 1] = px[..., 1] / (h - 1)
            self._random_fields[key] = fld.astype(self.dtype)
        return fld

    def _flow_for_offset(self, p, x, y, f_pos, f_src):
        """Flow of every sample toward the keyframe of its offset-p GOP.

        Returns (flow (B,2), kp (B,), cache or None).
        """
        part = self.partition
        m = part.count
        kp = np.minimum(part.gop_of(f_src) + p, m - 1)
        mode = self.cfg.alignment_mode
        if mode == "zero":
            return np.zeros((x.shape[0], 2), dtype=x.dtype), kp, None
        if mode == "random":
            flow = np.empty((x.shape[0], 2), dtype=x.dtype)
            j = np.clip(np.rint(x * (self.cfg.width - 1)), 0,
                        self.cfg.width - 1).astype(np.int64)
            i = np.clip(np.rint(y * (self.cfg.height - 1)), 0,
                        self.cfg.height - 1).astype(np.int64)
            pairs, inv = np.unique(np.stack([kp, f_src]), axis=1,
                                   return_inverse=True)
            for g in range(pairs.shape[1]):
                mask = inv == g
                fld = self._random_field(pairs[0, g], pairs[1, g])
                flow[mask] = fld[i[mask], j[mask]]
            return flow, kp, None
        uf, gidx = np.unique(f_pos, return_inverse=True)
        uf_src = np.clip(np.floor(uf + 0.5), 0, self.cfg.frames - 1)
        ukp = np.minimum(uf_src.astype(np.int64) // self.cfg.gop_size + p, m - 1)
        embed = al.time_embedding(uf, self.cfg.frames, self.cfg.embed_dim)
        scales = al.flow_scale(uf, part.keyframe_of(ukp)).astype(self.dtype)
        hyper_w = self.params["flow.hyper_w"]
        hyper_b = self.params["flow.hyper_b"]
        theta, hcache = al.generate_flow_params(hyper_w, hyper_b, ukp, embed)
        xy = np.stack([x, y], axis=1)
        flow, fcache = al.flow_net_forward(theta, self.cfg.flow_shape(),
                                           xy, gidx, scales)
        return flow, kp, (hcache, fcache)

    # -- latent assembly ------------------------------------------------------

    def latent_forward(self, x, y, t, f_int=None):
        """Assemble the modulation latent z for a batch; returns cache."""
        f_pos, f_src = self.frame_position(t, f_int)
        parts = []
        zs = []
        for p in self.cfg.neighbors:
            flow, kp, fl_cache = self._flow_for_offset(p, x, y, f_pos, f_src)
            aligned = np.stack([x, y], axis=1) + flow
            uv, ncache = al.normalize_forward(
                aligned, self.boxes.astype(x.dtype), kp)
            z_p, gcache = grids.lookup_batch(self.latent_grid, kp,
                                             uv[:, 0], uv[:, 1])
            zs.append(z_p)
            parts.append((flow, fl_cache, ncache, gcache))
        static_cache = None
        if self.static_grid is not None:
            zero_idx = np.zeros(x.shape[0], dtype=np.int64)
            z_s, static_cache = grids.lookup_batch(self.static_grid,
                                                   zero_idx, x, y)
            zs.append(z_s)
        z = np.concatenate(zs, axis=1)
        return z, {"parts": parts, "static": static_cache,
                   "f_pos": f_pos, "f_src": f_src}

    def latent_backward(self, cache, gz, flow_upstream=None):
        """Push latent gradients back to grids, flow, and coordinates."""
        seg = self.cfg.latent.feature_dim
        gx = None
        gy = None
        for i, (flow, fl_cache, ncache, gcache) in enumerate(cache["parts"]):
            gu, gv = grids.lookup_backward(gcache, gz[:, i * seg:(i + 1) * seg])
            g_aligned = al.normalize_backward(ncache, np.stack([gu, gv], axis=1))
            if flow_upstream is not None and flow_upstream[i] is not None:
                g_flow = g_aligned + flow_upstream[i]
            else:
                g_flow = g_aligned
            if gx is None:
                gx = g_aligned[:, 0].copy()
                gy = g_aligned[:, 1].copy()
            else:
                gx += g_aligned[:, 0]
                gy += g_aligned[:, 1]
            if fl_cache is not None:
                hcache, fcache = fl_cache
                dtheta, dxy = al.flow_net_backward(fcache, g_flow)
                al.generate_flow_params_backward(hcache, dtheta)
                gx += dxy[:, 0]
                gy += dxy[:, 1]
        if cache["static"] is not None:
            n = len(cache["parts"])
            gu, gv = grids.lookup_backward(cache["static"], gz[:, n * seg:])
            gx += gu
            gy += gv
        return gx, gy

    # -- full pipeline ----------------------------------------------------------

    def forward_batch(self, x, y, t, f_int=None):
        """(x, y, t) batch -> linear rgb (B,3) plus backward cache."""
        z, lat_cache = self.latent_forward(x, y, t, f_int)
        g = self.cfg.time_gain
        tg = t if g == 1.0 else (t * g + (1.0 - g) * 0.5).astype(t.dtype)
        coords = np.stack([x, y, tg], axis=1)
        rgb, net_cache = self.net.forward(coords, z)
        flows = [part[0] for part in lat_cache["parts"]]
        return rgb, {"lat": lat_cache, "net": net_cache, "flows": flows}

    def backward_batch(self, cache, grgb, flow_upstream=None):
        """Accumulate parameter grads; returns (gx, gy, gt_network_only).

        Time enters the alignment path as a conditioning index, so only
        the synthesizer contributes a t gradient.
        """
        gcoords, gz = self.net.backward(cache["net"], grgb)
        gx, gy = self.latent_backward(cache["lat"], gz, flow_upstream)
        gx += gcoords[:, 0]
        gy += gcoords[:, 1]
        return gx, gy, gcoords[:, 2]

    # -- public single-point surface ------------------------------------------

    def _check_query(self, k, f):
        part = self.partition
        if not 0 <= f < self.cfg.frames:
            raise DimensionError(f"frame {f} outside video of {self.cfg.frames}")
        if k not in al.permitted_gops(part, self.cfg.neighbors, f):
            raise DimensionError(
                f"frame {f} may not query GOP {k} with offsets "
                f"{self.cfg.neighbors}")

    def flow_decode(self, k, x, y, f):
        """Flow of (x, y, f) toward the keyframe of GOP k (normalized)."""
        self._check_query(k, f)
        part = self.partition
        dt = self.dtype
        if self.cfg.alignment_mode == "zero":
            return 0.0, 0.0
        if self.cfg.alignment_mode == "random":
            fld = self._random_field(k, f)
            j = int(np.clip(round(x * (self.cfg.width - 1)), 0,
                            self.cfg.width - 1))
            i = int(np.clip(round(y * (self.cfg.height - 1)), 0,
                            self.cfg.height - 1))
            return float(fld[i, j, 0]), float(fld[i, j, 1])
        embed = al.time_embedding(np.array([float(f)]), self.cfg.frames,
                                  self.cfg.embed_dim)
        scales = al.flow_scale(np.array([float(f)]),
                               np.array([part.keyframe_of(k)])).astype(dt)
        theta, _ = al.generate_flow_params(
            self.params["flow.hyper_w"], self.params["flow.hyper_b"],
            np.array([k]), embed)
        xy = np.array([[x, y]], dtype=dt)
        flow, _ = al.flow_net_forward(theta, self.cfg.flow_shape(), xy,
                                      np.zeros(1, dtype=np.int64), scales)
        return float(flow[0, 0]), float(flow[0, 1])

    def align(self, x, y, f, k):
        dx, dy = self.flow_decode(k, x, y, f)
        return x + dx, y + dy

    def modulation_latent(self, x, y, f):
        dt = self.dtype
        z, _ = self.latent_forward(np.array([x], dtype=dt),
                                   np.array([y], dtype=dt),
                                   np.array([0.0], dtype=dt),
                                   f_int=np.array([f]))
        return z[0]
