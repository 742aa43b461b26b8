import numpy as np
import pytest
from sklearn.base import clone

from nvtm.errors import ConfigError, DimensionError
from nvtm.estimator import NvtmEncoder, check_video
from nvtm.flow import SyntheticSpec, gen_synthetic


def small_encoder(**over):
    kw = dict(preset="small", gop_size=4, iterations=120, batch_fraction=0.1,
              aux_fraction=0.1, seed=0,
              overrides={"static_levels": 4, "net_width": 32,
                         "latent_levels": 3, "log_interval": 50})
    kw.update(over)
    return NvtmEncoder(**kw)


def test_check_video_validation():
    with pytest.raises(DimensionError):
        check_video(np.zeros((4, 4, 3)))
    with pytest.raises(DimensionError):
        check_video(np.zeros((2, 4, 4, 1)))
    with pytest.raises(DimensionError):
        check_video(np.full((2, 4, 4, 3), 2.0))
    with pytest.raises(DimensionError):
        check_video(np.full((2, 4, 4, 3), np.nan))
    out = check_video(np.full((2, 4, 4, 3), 0.5))
    assert out.dtype == np.float32


def test_get_params_round_trip_and_clone():
    enc = small_encoder()
    params = enc.get_params()
    assert params["preset"] == "small"
    assert params["gop_size"] == 4
    other = clone(enc)
    assert other.get_params() == params


def test_fit_predict_score(rng):
    video, flow_fn = gen_synthetic(SyntheticSpec(
        kind="translate", frames=8, height=16, width=16,
        velocity=(1.0, 0.0), texture_seed=1))
    enc = small_encoder()
    enc.fit(video, guidance="none")
    out = enc.predict()
    assert out.shape == (8, 16, 16, 3)
    assert out.min() >= 0 and out.max() <= 1
    s = enc.score(video)
    assert s > 15.0
    sr = enc.predict((8, 31, 31))
    assert sr.shape == (8, 31, 31, 3)


def test_predict_before_fit_raises():
    with pytest.raises(ConfigError):
        small_encoder().predict()


def test_guidance_mapping_accepted(rng):
    from nvtm.alignment import guidance_pairs
    from nvtm.flow import synthetic_guidance
    video, flow_fn = gen_synthetic(SyntheticSpec(
        kind="translate", frames=8, height=16, width=16,
        velocity=(1.0, 0.5), texture_seed=2))
    enc = small_encoder()
    conf_part = __import__("nvtm.alignment", fromlist=["GopPartition"])
    part = conf_part.GopPartition(4, 8)
    guid = synthetic_guidance(flow_fn, guidance_pairs(part, (0, 1)))
    enc.fit(video, guidance=guid)
    assert hasattr(enc, "model_")


def test_bad_guidance_string():
    video = np.full((4, 16, 16, 3), 0.5, np.float32)
    with pytest.raises(ConfigError):
        small_encoder().fit(video, guidance="bogus")


def test_mask_spec_exclusion(rng):
    from nvtm.evaluate import MaskSpec
    video, _ = gen_synthetic(SyntheticSpec(
        kind="translate", frames=8, height=16, width=16,
        velocity=(0.5, 0.0), texture_seed=3))
    enc = small_encoder()
    enc.fit(video, guidance="none", mask_spec=MaskSpec(count=2, side=3, seed=1))
    assert hasattr(enc, "model_")
    with pytest.raises(ConfigError):
        enc.fit(video, guidance="none", masks=np.zeros((8, 16, 16), bool),
                mask_spec=MaskSpec(count=1, side=3, seed=0))
