"""Dense multi-resolution 2D feature grids with bilinear lookup.

Each grid level is a node-centered ``res x res`` plane; a query (u, v)
in [0,1]^2 maps to the continuous position (u*(res-1), v*(res-1)) and
is bilinearly interpolated.  Lookups differentiate both ways: scatter
gradients into the plane features and analytic gradients to the query
coordinates, which is what lets the reconstruction loss train the flow
network through the grid query.

Planes are stored stacked over grid instances, shape
``(count, res, res, feats)``; the latent grids use count = number of
GOPs and the static grid uses count = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor
from .errors import ConfigError

INIT_RANGE = 1e-4  # features start tiny so modulation begins near-neutral


@dataclass(frozen=True)
class GridConfig:
    base_res: int = 16
    levels: int = 7
    scale: float = 1.8
    feats: int = 4

    def __post_init__(self):
        if self.base_res < 2:
            raise ConfigError(f"base_res must be >= 2, got {self.base_res}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.scale <= 1.0:
            raise ConfigError(f"scale must be > 1, got {self.scale}")
        if self.feats < 1:
            raise ConfigError(f"feats must be >= 1, got {self.feats}")

    @property
    def feature_dim(self):
        return self.levels * self.feats


def level_res(config: GridConfig, level: int) -> int:
    """Side length of one level: floor(base_res * scale**level)."""
    if not 0 <= level < config.levels:
        raise ConfigError(f"level {level} out of range [0, {config.levels})")
    return int(math.floor(config.base_res * config.scale ** level))


class MultiResGrid2D:
    """A stack of ``count`` grids sharing one GridConfig.

    ``planes[l]`` is a Tensor of shape (count, res_l, res_l, feats).
    """

    def __init__(self, config: GridConfig, planes: list[Tensor]):
        self.config = config
        self.planes = planes

    @property
    def count(self):
        return self.planes[0].shape[0]

    def param_count(self):
        return sum(p.size for p in self.planes)


def init_planes(config: GridConfig, count: int, rng, dtype=np.float32,
                store=None, prefix="grid"):
    """Create per-level plane tensors, i.i.d. uniform in +-INIT_RANGE."""
    planes = []
    for l in range(config.levels):
        r = level_res(config, l)
        data = rng.uniform(-INIT_RANGE, INIT_RANGE,
                           size=(count, r, r, config.feats)).astype(dtype)
        name = f"{prefix}.level{l}"
        t = store.add(name, data) if store is not None else Tensor(data, name)
        planes.append(t)
    return MultiResGrid2D(config, planes)


def _corner_weights(u, v, res):
    """Clamped continuous mapping and the four bilinear corner weights.

    Returns integer corner indices, fractional offsets, and masks that
    zero the coordinate gradient where the query was clamped.
    """
    uc = np.clip(u, 0.0, 1.0)
    vc = np.clip(v, 0.0, 1.0)
    inside_u = (u > 0.0) & (u < 1.0)
    inside_v = (v > 0.0) & (v < 1.0)
    pu = uc * (res - 1)
    pv = vc * (res - 1)
    iu = np.minimum(pu.astype(np.int64), res - 2)
    iv = np.minimum(pv.astype(np.int64), res - 2)
    fu = pu - iu
    fv = pv - iv
    return iu, iv, fu, fv, inside_u, inside_v


def lookup_batch(grid: MultiResGrid2D, gidx, u, v):
    """Interpolate all levels for a batch of queries.

    gidx selects the grid instance per sample.  Returns the level-major
    concatenated features (B, levels*feats) and a cache for backward.
    """
    cfg = grid.config
    B = u.shape[0]
    out = np.empty((B, cfg.feature_dim), dtype=grid.planes[0].dtype)
    caches = []
    for l, plane in enumerate(grid.planes):
        res = plane.shape[1]
        iu, iv, fu, fv, mu, mv = _corner_weights(u, v, res)
        p = plane.data
        c00 = p[gidx, iv, iu]
        c01 = p[gidx, iv, iu + 1]
        c10 = p[gidx, iv + 1, iu]
        c11 = p[gidx, iv + 1, iu + 1]
        wu = fu[:, None]
        wv = fv[:, None]
        val = ((1 - wv) * ((1 - wu) * c00 + wu * c01)
               + wv * ((1 - wu) * c10 + wu * c11))
        out[:, l * cfg.feats:(l + 1) * cfg.feats] = val
        caches.append((iu, iv, fu, fv, mu, mv, c00, c01, c10, c11))
    return out, (grid, gidx, caches)


def lookup_backward(cache, gz):
    """Scatter feature grads into the planes; return (gu, gv)."""
    grid, gidx, caches = cache
    cfg = grid.config
    B = gz.shape[0]
    gu = np.zeros(B, dtype=gz.dtype)
    gv = np.zeros(B, dtype=gz.dtype)
    for l, plane in enumerate(grid.planes):
        res = plane.shape[1]
        iu, iv, fu, fv, mu, mv, c00, c01, c10, c11 = caches[l]
        g = gz[:, l * cfg.feats:(l + 1) * cfg.feats]
        wu = fu[:, None]
        wv = fv[:, None]
        w00 = (1 - wv) * (1 - wu)
        w01 = (1 - wv) * wu
        w10 = wv * (1 - wu)
        w11 = wv * wu
        idx = (np.concatenate([gidx] * 4),
               np.concatenate([iv, iv, iv + 1, iv + 1]),
               np.concatenate([iu, iu + 1, iu, iu + 1]))
        vals = np.concatenate([w00 * g, w01 * g, w10 * g, w11 * g])
        plane.scatter_accumulate(idx, vals)
        # d val / d pu = (1-fv)(c01-c00) + fv(c11-c10), times (res-1)
        du = ((1 - wv) * (c01 - c00) + wv * (c11 - c10))
        dv = ((1 - wu) * (c10 - c00) + wu * (c11 - c01))
        gu += np.sum(g * du, axis=1) * (res - 1) * mu
        gv += np.sum(g * dv, axis=1) * (res - 1) * mv
    return gu, gv


def lookup(grid: MultiResGrid2D, u, v, gidx=0):
    """Single-query convenience wrapper: feature vector (levels*feats,)."""
    uu = np.asarray([u], dtype=grid.planes[0].dtype)
    vv = np.asarray([v], dtype=grid.planes[0].dtype)
    gg = np.asarray([gidx], dtype=np.int64)
    z, _ = lookup_batch(grid, gg, uu, vv)
    return z[0]
