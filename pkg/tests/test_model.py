import numpy as np
import pytest

from nvtm.errors import DimensionError
from nvtm.grids import GridConfig
from nvtm.model import ModelConfig, NvtmModel


def tiny_cfg(**over):
    base = dict(frames=8, height=12, width=12, gop_size=4, neighbors=(0, 1),
                latent=GridConfig(4, 2, 1.8, 2), static=GridConfig(4, 2, 1.5, 2),
                net_depth=2, net_width=8, embed_dim=8, flow_width=4,
                flow_layers=3)
    base.update(over)
    return ModelConfig(**base)


@pytest.fixture
def model():
    return NvtmModel.build(tiny_cfg(), seed=1, dtype=np.float64)


def batch_of(rng, model, n=6):
    T = model.cfg.frames
    f = np.sort(rng.integers(0, T, n))
    x = rng.uniform(0, 1, n)
    y = rng.uniform(0, 1, n)
    t = f / max(T - 1, 1)
    return x, y, t, f


def test_default_latent_dimension_examples():
    # stock configuration: two neighbor grids of 7x4 plus 16x2 static
    cfg = ModelConfig(frames=20, height=32, width=32)
    assert cfg.z_dim == 2 * 28 + 32 == 88
    cfg0 = ModelConfig(frames=20, height=32, width=32, neighbors=(0,))
    assert cfg0.z_dim == 28 + 32 == 60


def test_small_config_latent_dimension():
    cfg = ModelConfig(frames=20, height=32, width=32,
                      latent=GridConfig(16, 5, 1.8, 2))
    assert cfg.z_dim == 2 * 10 + 32 == 52


def test_latent_dim_constant_across_coords(model, rng):
    dims = set()
    for _ in range(10):
        x, y, t, f = batch_of(rng, model, 4)
        z, _ = model.latent_forward(x, y, t, f_int=f)
        dims.add(z.shape[1])
    assert dims == {model.cfg.z_dim}


def test_last_gop_clamps_to_final_grid(model):
    # a frame of the last GOP queries only the final grid for both offsets
    f = model.cfg.frames - 1
    from nvtm.alignment import permitted_gops
    assert permitted_gops(model.partition, model.cfg.neighbors, f) == {1}


def test_forward_deterministic(model, rng):
    x, y, t, f = batch_of(rng, model)
    a, _ = model.forward_batch(x, y, t, f_int=f)
    b, _ = model.forward_batch(x, y, t, f_int=f)
    assert np.array_equal(a, b)


def test_keyframe_alignment_identity_for_any_params(rng):
    # scale is exactly zero at keyframes, for arbitrary parameter values
    for seed in range(3):
        m = NvtmModel.build(tiny_cfg(), seed=seed, dtype=np.float64)
        for p in m.params:
            p.data[...] = rng.normal(0, 1.0, p.shape)
        for k, kf in ((0, 0), (1, 4)):
            x, y = rng.uniform(0, 1, 2)
            assert m.flow_decode(k, x, y, kf) == (0.0, 0.0)
            assert m.align(x, y, kf, k) == (x, y)


def test_flow_decode_permitted_range(model):
    with pytest.raises(DimensionError):
        model.flow_decode(1, 0.5, 0.5, 20)  # frame outside video
    with pytest.raises(DimensionError):
        model.flow_decode(0, 0.5, 0.5, 5)   # later GOPs may not look back
    model.flow_decode(1, 0.5, 0.5, 5)       # own GOP is fine
    model.flow_decode(1, 0.5, 0.5, 0)       # forward neighbor is fine


def test_alignment_addition(model):
    dx, dy = model.flow_decode(0, 0.5, 0.5, 2)
    ax, ay = model.align(0.5, 0.5, 2, 0)
    assert ax == pytest.approx(0.5 + dx)
    assert ay == pytest.approx(0.5 + dy)


def test_zero_mode_flow_and_keyframe_equivalence(model, rng):
    zero = model.copy(alignment_mode="zero")
    assert zero.flow_decode(0, 0.3, 0.7, 2) == (0.0, 0.0)
    # at a keyframe both modes produce identical latents
    x, y = rng.uniform(0, 1, 2)
    za = model.modulation_latent(x, y, 4)
    zb = zero.modulation_latent(x, y, 4)
    assert np.array_equal(za, zb)


def test_random_mode_deterministic(model):
    r1 = model.copy(alignment_mode="random", align_scale_px=3.0, align_seed=5)
    r2 = model.copy(alignment_mode="random", align_scale_px=3.0, align_seed=5)
    assert r1.flow_decode(0, 0.3, 0.7, 2) == r2.flow_decode(0, 0.3, 0.7, 2)
    r3 = model.copy(alignment_mode="random", align_scale_px=3.0, align_seed=6)
    assert r1.flow_decode(0, 0.3, 0.7, 2) != r3.flow_decode(0, 0.3, 0.7, 2)


def test_copy_is_independent(model, rng):
    cp = model.copy()
    before = model.params["net.out.w"].data.copy()
    cp.params["net.out.w"].data[...] = 123.0
    assert np.array_equal(model.params["net.out.w"].data, before)


def test_backward_twice_doubles_param_grads(model, rng):
    x, y, t, f = batch_of(rng, model)
    model.params.zero_grad()
    rgb, cache = model.forward_batch(x, y, t, f_int=f)
    g = rng.standard_normal(rgb.shape)
    model.backward_batch(cache, g)
    snap = {p.name: (p.grad.copy() if p.grad is not None else None)
            for p in model.params}
    _, cache2 = model.forward_batch(x, y, t, f_int=f)
    model.backward_batch(cache2, g)
    for p in model.params:
        if snap[p.name] is not None:
            assert np.allclose(p.grad, 2 * snap[p.name], rtol=1e-10, atol=0)


def test_frame_position_snapping(model):
    t = np.array([2.0 / 7.0])  # frame 2 of 8 through the lattice rule
    f_pos, f_src = model.frame_position(t)
    assert f_pos[0] == 2.0
    assert f_src[0] == 2
    t_half = np.array([2.5 / 7.0])
    f_pos, f_src = model.frame_position(t_half)
    assert f_pos[0] == pytest.approx(2.5)
    assert f_src[0] == 3  # round-half-up for GOP selection


def test_config_round_trip():
    cfg = tiny_cfg(alignment_mode="random", align_scale_px=2.5)
    back = ModelConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_neighbors_validation():
    with pytest.raises(Exception):
        tiny_cfg(neighbors=(1, 0))
    with pytest.raises(Exception):
        tiny_cfg(neighbors=())
