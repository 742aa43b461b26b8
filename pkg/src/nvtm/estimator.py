"""Estimator-style wrapper so the codec composes with the ML ecosystem.

``NvtmEncoder`` follows the familiar conventions: constructor arguments
are stored verbatim and introspectable through ``get_params``; ``fit``
trains on a video tensor; ``predict`` decodes at an arbitrary lattice;
``score`` reports reconstruction PSNR in dB.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import config as cfgmod
from .alignment import guidance_pairs
from .errors import ConfigError, DimensionError
from .evaluate import decode, gen_masks, psnr
from .flow import compute_guidance
from .trainer import train


def check_video(X) -> np.ndarray:
    """Validate a (T,H,W,3) float video with values in [0,1]."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise DimensionError(
            f"expected a (T,H,W,3) video tensor, got shape {X.shape}")
    if X.shape[0] < 1 or X.shape[1] < 2 or X.shape[2] < 2:
        raise DimensionError(f"degenerate video shape {X.shape}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise DimensionError("video contains non-finite values")
    if X.min() < -1e-6 or X.max() > 1 + 1e-6:
        raise DimensionError(
            f"video values must lie in [0,1], got [{X.min()}, {X.max()}]")
    return np.clip(X, 0.0, 1.0)


def check_shape(shape) -> tuple:
    shape = tuple(int(v) for v in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise DimensionError(f"decode shape must be (T,H,W) >= 1, got {shape}")
    return shape


class NvtmEncoder(BaseEstimator):
    """Fit an implicit representation to a video; decode anywhere.

    Parameters mirror the flat configuration keys; anything not exposed
    directly can be supplied through ``overrides``.  ``guidance``
    selects the auxiliary-flow source: "auto" runs the built-in
    estimator, "none" disables the auxiliary phase, or pass a
    {(frame, keyframe): FlowField} mapping to ``fit``.
    """

    def __init__(self, preset="small", gop_size=10, neighbors=(0, 1),
                 r_th=0.5, w_aux=0.5, iterations=5000, batch_fraction=0.02,
                 lr_max=1e-3, lr_min=1e-5, weight_decay=1e-3,
                 aux_fraction=0.1, guidance="auto", seed=0,
                 deterministic=True, overrides=None):
        self.preset = preset
        self.gop_size = gop_size
        self.neighbors = neighbors
        self.r_th = r_th
        self.w_aux = w_aux
        self.iterations = iterations
        self.batch_fraction = batch_fraction
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.weight_decay = weight_decay
        self.aux_fraction = aux_fraction
        self.guidance = guidance
        self.seed = seed
        self.deterministic = deterministic
        self.overrides = overrides

    def _resolved(self):
        over = {
            "gop_size": self.gop_size,
            "neighbors": ",".join(str(p) for p in self.neighbors),
            "r_th": self.r_th, "w_aux": self.w_aux,
            "iterations": self.iterations,
            "batch_fraction": self.batch_fraction,
            "lr_max": self.lr_max, "lr_min": self.lr_min,
            "weight_decay": self.weight_decay,
            "aux_fraction": self.aux_fraction,
            "seed": self.seed, "deterministic": self.deterministic,
        }
        over.update(self.overrides or {})
        return cfgmod.resolve(preset=self.preset,
                              overrides={k: str(v) for k, v in over.items()})

    def fit(self, X, y=None, guidance=None, masks=None, mask_spec=None):
        """Train on a (T,H,W,3) video in [0,1].

        ``masks`` (T,H,W boolean) or ``mask_spec`` (MaskSpec) exclude
        pixels from training, for the inpainting protocol.
        """
        X = check_video(X)
        t, h, w = X.shape[:3]
        conf = self._resolved()
        mcfg = cfgmod.model_config(conf, t, h, w)
        tcfg = cfgmod.train_config(conf)
        if guidance is None:
            guidance = self.guidance
        if isinstance(guidance, str):
            if guidance == "none":
                guidance = None
                tcfg = cfgmod.train_config({**conf, "aux_fraction": 0.0})
            elif guidance == "auto":
                pairs = guidance_pairs(mcfg.partition(), mcfg.neighbors)
                guidance = compute_guidance(X, pairs, alpha=conf["flow_alpha"],
                                            iters=conf["flow_iters"])
            else:
                raise ConfigError(
                    f"guidance must be 'auto', 'none', or a mapping; "
                    f"got {guidance!r}")
        if mask_spec is not None:
            if masks is not None:
                raise ConfigError("pass either masks or mask_spec, not both")
            masks = gen_masks(mask_spec, t, h, w)
        self.model_, self.report_ = train(X, guidance, mcfg, tcfg, masks=masks)
        self.train_shape_ = (t, h, w)
        return self

    def _require_fit(self):
        if not hasattr(self, "model_"):
            raise ConfigError("this encoder has not been fitted yet")

    def predict(self, shape=None) -> np.ndarray:
        """Decode the fitted model over a (T,H,W) lattice."""
        self._require_fit()
        if shape is not None:
            shape = check_shape(shape)
        return decode(self.model_, shape)

    def score(self, X, y=None) -> float:
        """Reconstruction PSNR (dB) against the given video."""
        self._require_fit()
        X = check_video(X)
        return psnr(self.predict(X.shape[:3]), X)
