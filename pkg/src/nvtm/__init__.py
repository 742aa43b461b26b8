"""Implicit video representation with flow-aligned latent grids.

A video is encoded into per-GOP alignment-flow networks, adaptively
normalized multi-resolution 2D latent grids, and a latent-modulated
sinusoidal base network, trained end to end with hand-derived
gradients.  See ``NvtmEncoder`` for the high-level fit/predict surface
and the ``nvtm`` command-line tool for the operator workflow.
"""

from .errors import (ConfigError, DimensionError, FormatError, NumericError,
                     NvtmError)
from .estimator import NvtmEncoder, check_video
from .evaluate import MaskSpec, decode, gen_masks, psnr
from .flow import FlowField, SyntheticSpec, estimate_flow, gen_synthetic
from .grids import GridConfig
from .model import ModelConfig, NvtmModel
from .trainer import TrainConfig, train
from .videoio import load_video, save_video

__all__ = [
    "ConfigError", "DimensionError", "FormatError", "NumericError",
    "NvtmError", "NvtmEncoder", "check_video", "MaskSpec", "decode",
    "gen_masks", "psnr", "FlowField", "SyntheticSpec", "estimate_flow",
    "gen_synthetic", "GridConfig", "ModelConfig", "NvtmModel",
    "TrainConfig", "train", "load_video", "save_video",
]

__version__ = "0.1.0"
