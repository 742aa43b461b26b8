"""Sinusoidal synthesizer with feature-wise latent modulation.

The synthesizer maps (x, y, t) in [0,1]^3 (rescaled to [-1,1]) through
``depth`` sine layers to linear RGB; a parallel rectified-linear
modulator, driven by the latent z, produces one multiplicative gain
vector per sine layer.  Setting every gain to one reproduces a plain
sinusoidal network bit for bit, and the modulator is initialized close
to that neutral point because latents start near zero.

``direct`` mode is the ablation arm: the latent concatenates onto the
coordinate input and there is no modulator branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

MOD_WEIGHT_GAIN = 0.1  # keeps gains near relu(bias)=1 while latents are tiny


@dataclass(frozen=True)
class ModSirenConfig:
    z_dim: int
    depth: int = 3
    width: int = 185
    omega0: float = 30.0
    omega_hidden: float = 30.0
    mode: str = "modulate"  # or "direct"

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.z_dim < 1:
            raise ConfigError(
                f"bad network config: depth {self.depth}, width {self.width}, "
                f"z_dim {self.z_dim}")
        if self.mode not in ("modulate", "direct"):
            raise ConfigError(f"unknown latent mode: {self.mode}")


def param_count(cfg: ModSirenConfig, in_dim=3, out_dim=3):
    """Closed-form trainable parameter count of the base network."""
    w, d, z = cfg.width, cfg.depth, cfg.z_dim
    if cfg.mode == "direct":
        n = (in_dim + z + 1) * w + (d - 1) * (w + 1) * w + (w + 1) * out_dim
        return n
    synth = (in_dim + 1) * w + (d - 1) * (w + 1) * w + (w + 1) * out_dim
    mod = (z + 1) * w + (d - 1) * (w + z + 1) * w
    return synth + mod


class ModulatedSiren:
    """Owns the base-network tensors inside a ParamStore."""

    def __init__(self, cfg: ModSirenConfig, store, rng, dtype=np.float32,
                 in_dim=3, out_dim=3):
        self.cfg = cfg
        self.in_dim = in_dim
        self.out_dim = out_dim
        w, d = cfg.width, cfg.depth
        first_in = in_dim + cfg.z_dim if cfg.mode == "direct" else in_dim

        def sine_layer(name, fan_in, fan_out, omega, first):
            bound = (1.0 / fan_in) if first else math.sqrt(6.0 / fan_in) / omega
            wt = store.add(name + ".w",
                           rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype),
                           decay=True)
            bt = store.add(name + ".b",
                           rng.uniform(-bound, bound, fan_out).astype(dtype))
            return wt, bt

        self.synth = [sine_layer("net.synth0", first_in, w, cfg.omega0, True)]
        for i in range(1, d):
            self.synth.append(
                sine_layer(f"net.synth{i}", w, w, cfg.omega_hidden, False))
        self.out = sine_layer("net.out", w, out_dim, cfg.omega_hidden, False)

        self.mod = []
        if cfg.mode == "modulate":
            for i in range(d):
                fan_in = cfg.z_dim if i == 0 else w + cfg.z_dim
                bound = MOD_WEIGHT_GAIN * math.sqrt(6.0 / fan_in)
                wt = store.add(f"net.mod{i}.w",
                               rng.uniform(-bound, bound, (fan_in, w)).astype(dtype),
                               decay=True)
                bt = store.add(f"net.mod{i}.b", np.ones(w, dtype=dtype))
                self.mod.append((wt, bt))

    def _omega(self, layer):
        return self.cfg.omega0 if layer == 0 else self.cfg.omega_hidden

    def forward(self, coords, z):
        """coords (B,3) in [0,1], z (B,z_dim) -> linear rgb (B,3)."""
        cfg = self.cfg
        if z.shape[1] != cfg.z_dim:
            raise DimensionError(
                f"latent dim {z.shape[1]} does not match config {cfg.z_dim}")
        c = coords * 2.0 - 1.0
        if cfg.mode == "direct":
            return self._forward_direct(c, z)
        gains = []
        mod_cache = []
        m = z
        for i, (wt, bt) in enumerate(self.mod):
            inp = z if i == 0 else np.concatenate([m, z], axis=1)
            pre = inp @ wt.data + bt.data
            m = np.maximum(pre, 0.0)
            gains.append(m)
            mod_cache.append((inp, pre > 0))
        h = c
        syn_cache = []
        for i, (wt, bt) in enumerate(self.synth):
            a = h @ wt.data + bt.data
            s = np.sin(self._omega(i) * a)
            syn_cache.append((h, a, s))
            h = gains[i] * s
        wo, bo = self.out
        rgb = h @ wo.data + bo.data
        return rgb, ("modulate", c, z, gains, mod_cache, syn_cache, h)

    def _forward_direct(self, c, z):
        inp0 = np.concatenate([c, z], axis=1)
        h = inp0
        syn_cache = []
        for i, (wt, bt) in enumerate(self.synth):
            a = h @ wt.data + bt.data
            s = np.sin(self._omega(i) * a)
            syn_cache.append((h, a, s))
            h = s
        wo, bo = self.out
        rgb = h @ wo.data + bo.data
        return rgb, ("direct", inp0, syn_cache, h)

    def backward(self, cache, grgb):
        """Accumulate parameter grads; return (gcoords, gz)."""
        if cache[0] == "direct":
            return self._backward_direct(cache, grgb)
        _, c, z, gains, mod_cache, syn_cache, h_last = cache
        cfg = self.cfg
        wo, bo = self.out
        wo.accumulate(h_last.T @ grgb)
        bo.accumulate(grgb.sum(axis=0))
        dh = grgb @ wo.data.T
        dgain = [None] * cfg.depth
        for i in range(cfg.depth - 1, -1, -1):
            wt, bt = self.synth[i]
            h_in, a, s = syn_cache[i]
            dgain[i] = dh * s
            da = dh * gains[i] * (self._omega(i) * np.cos(self._omega(i) * a))
            wt.accumulate(h_in.T @ da)
            bt.accumulate(da.sum(axis=0))
            dh = da @ wt.data.T
        gcoords = dh * 2.0
        gz = np.zeros_like(z)
        dm = None  # gradient flowing into gains[i] from modulator layer i+1
        for i in range(cfg.depth - 1, -1, -1):
            wt, bt = self.mod[i]
            inp, mask = mod_cache[i]
            dout = dgain[i] if dm is None else dgain[i] + dm
            dpre = dout * mask
            wt.accumulate(inp.T @ dpre)
            bt.accumulate(dpre.sum(axis=0))
            dinp = dpre @ wt.data.T
            if i == 0:
                gz += dinp
                dm = None
            else:
                dm = dinp[:, :cfg.width]
                gz += dinp[:, cfg.width:]
        return gcoords, gz

    def _backward_direct(self, cache, grgb):
        _, inp0, syn_cache, h_last = cache
        wo, bo = self.out
        wo.accumulate(h_last.T @ grgb)
        bo.accumulate(grgb.sum(axis=0))
        dh = grgb @ wo.data.T
        for i in range(self.cfg.depth - 1, -1, -1):
            wt, bt = self.synth[i]
            h_in, a, _ = syn_cache[i]
            da = dh * (self._omega(i) * np.cos(self._omega(i) * a))
            wt.accumulate(h_in.T @ da)
            bt.accumulate(da.sum(axis=0))
            dh = da @ wt.data.T
        gcoords = dh[:, :self.in_dim] * 2.0
        gz = dh[:, self.in_dim:].copy()
        return gcoords, gz
