import numpy as np
import pytest

from nvtm.diffcore import ParamStore
from nvtm.errors import ConfigError, NumericError
from nvtm.flow import FlowField, SyntheticSpec, gen_synthetic, synthetic_guidance
from nvtm.alignment import guidance_pairs
from nvtm.grids import GridConfig
from nvtm.model import ModelConfig, NvtmModel
from nvtm.trainer import (TrainConfig, adamw_step, lr_schedule, sample_batch,
                          total_loss, train)


def tiny_cfg(**over):
    base = dict(frames=8, height=16, width=16, gop_size=4, neighbors=(0, 1),
                latent=GridConfig(4, 2, 1.8, 2), static=GridConfig(4, 2, 1.5, 2),
                net_depth=2, net_width=8, embed_dim=8, flow_width=4,
                flow_layers=3)
    base.update(over)
    return ModelConfig(**base)


def tiny_video(rng, t=8, h=16, w=16):
    return rng.uniform(0, 1, (t, h, w, 3)).astype(np.float32)


def tiny_guidance(cfg, rng):
    out = {}
    for f, kf in guidance_pairs(cfg.partition(), cfg.neighbors):
        data = rng.uniform(-0.02, 0.02, (cfg.height, cfg.width, 2))
        out[(f, kf)] = FlowField(cfg.height, cfg.width,
                                 data.astype(np.float32), f, kf)
    return out


def test_sample_batch_size_rule(rng):
    b = sample_batch(rng, 16, 48, 48, 0.001)
    assert b.size == 36  # floor(36864 * 0.001)


def test_sample_batch_full_fraction_covers_everything(rng):
    b = sample_batch(rng, 2, 5, 5, 1.0)
    assert b.size == 50
    flat = b.f * 25 + b.i * 5 + b.j
    assert len(set(flat.tolist())) == 50


def test_sample_batch_deterministic():
    a = sample_batch(np.random.default_rng(3), 4, 8, 8, 0.2)
    b = sample_batch(np.random.default_rng(3), 4, 8, 8, 0.2)
    assert np.array_equal(a.f, b.f)
    assert np.array_equal(a.i, b.i)
    assert np.array_equal(a.j, b.j)


def test_sample_batch_empty_rejected(rng):
    with pytest.raises(ConfigError):
        sample_batch(rng, 2, 4, 4, 0.001)


def test_sample_batch_coordinates_normalized(rng):
    video = tiny_video(rng)
    b = sample_batch(rng, 8, 16, 16, 0.5, video=video)
    assert np.all(b.x == (b.j / 15).astype(np.float32))
    assert np.all(b.y == (b.i / 15).astype(np.float32))
    assert np.all(b.t == (b.f / 7).astype(np.float32))
    assert np.array_equal(b.targets, video[b.f, b.i, b.j])
    assert np.all(np.diff(b.f) >= 0)  # sorted by frame


def test_lr_schedule_endpoints_and_monotone():
    cfg = TrainConfig(iterations=1000, lr_max=1e-3, lr_min=1e-5)
    assert lr_schedule(0, cfg) == pytest.approx(1e-3)
    assert lr_schedule(1000, cfg) == pytest.approx(1e-5)
    vals = [lr_schedule(i, cfg) for i in range(0, 1001, 50)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_fraction=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_max=1e-5, lr_min=1e-3)
    with pytest.raises(ConfigError):
        TrainConfig(aux_fraction=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(precision="f16")


def test_adamw_converges_on_quadratic():
    # single parameter, loss (theta - 0.5)^2, no decay on the target
    store = ParamStore()
    p = store.add("theta", np.zeros(1))
    cfg = TrainConfig(iterations=500, lr_max=0.05, lr_min=1e-5,
                      weight_decay=0.0)
    for it in range(500):
        store.zero_grad()
        p.accumulate(2.0 * (p.data - 0.5))
        adamw_step(store, lr_schedule(it, cfg), cfg.weight_decay, it + 1)
    assert abs(p.data[0] - 0.5) < 1e-4


def test_adamw_rejects_nonfinite():
    store = ParamStore()
    p = store.add("theta", np.zeros(2))
    p.accumulate(np.array([np.nan, 0.0]))
    with pytest.raises(NumericError):
        adamw_step(store, 1e-3, 0.0, 1)


def test_total_loss_combination(rng):
    cfg = tiny_cfg()
    model = NvtmModel.build(cfg, seed=0, dtype=np.float32)
    video = tiny_video(rng)
    guidance = tiny_guidance(cfg, rng)
    batch = sample_batch(rng, 8, 16, 16, 0.2, video=video)
    total, l_recon, l_aux = total_loss(model, batch, guidance, w_aux=0.5,
                                       aux_active=True, backprop=False)
    assert total == pytest.approx(l_recon + 0.5 * l_aux)
    t2, r2, a2 = total_loss(model, batch, guidance, w_aux=0.5,
                            aux_active=False, backprop=False)
    assert a2 == 0.0 and t2 == r2


def test_aux_loss_values(rng):
    # flows equal to guidance -> 0; constant 0.01 offset in both
    # components -> 1e-4 under the per-component mean convention
    cfg = tiny_cfg()
    model = NvtmModel.build(cfg, seed=0, dtype=np.float32)
    video = tiny_video(rng)
    batch = sample_batch(rng, 8, 16, 16, 0.3, video=video)
    _, cache = model.forward_batch(batch.x, batch.y, batch.t, f_int=batch.f)
    flows = cache["flows"]
    part = cfg.partition()
    guid_exact, guid_offset = {}, {}
    for f, kf in guidance_pairs(part, cfg.neighbors):
        data = np.zeros((16, 16, 2), np.float32)
        guid_exact[(f, kf)] = FlowField(16, 16, data.copy(), f, kf)
        guid_offset[(f, kf)] = FlowField(16, 16, data.copy(), f, kf)
    for pi, p in enumerate(cfg.neighbors):
        for u, f in enumerate(batch.f):
            k = min(int(part.gop_of(f)) + p, part.count - 1)
            kf = int(part.keyframe_of(k))
            guid_exact[(f, kf)].data[batch.i[u], batch.j[u]] = flows[pi][u]
            guid_offset[(f, kf)].data[batch.i[u], batch.j[u]] = \
                flows[pi][u] + 0.01
    _, _, zero_aux = total_loss(model, batch, guid_exact, 0.5, True,
                                backprop=False)
    assert zero_aux == pytest.approx(0.0, abs=1e-12)
    _, _, const_aux = total_loss(model, batch, guid_offset, 0.5, True,
                                 backprop=False)
    assert const_aux == pytest.approx(1e-4, rel=1e-4)


def test_missing_guidance_raises(rng):
    cfg = tiny_cfg()
    model = NvtmModel.build(cfg, seed=0, dtype=np.float32)
    video = tiny_video(rng)
    batch = sample_batch(rng, 8, 16, 16, 0.2, video=video)
    with pytest.raises(ConfigError):
        total_loss(model, batch, {}, 0.5, True, backprop=False)


def test_zero_iterations_returns_initialized_model(rng):
    cfg = tiny_cfg()
    video = tiny_video(rng)
    tcfg = TrainConfig(iterations=0, seed=4, aux_fraction=0.0)
    model, report = train(video, None, cfg, tcfg, compute_final_psnr=False)
    fresh = NvtmModel.build(cfg, seed=4, dtype=np.float32)
    for a, b in zip(model.params, fresh.params):
        assert np.array_equal(a.data, b.data)
    assert model.finalized


def test_recon_gradient_reaches_flow_net_without_aux(rng):
    cfg = tiny_cfg()
    model = NvtmModel.build(cfg, seed=1, dtype=np.float32)
    video = tiny_video(rng)
    batch = sample_batch(rng, 8, 16, 16, 0.3, video=video)
    model.params.zero_grad()
    total_loss(model, batch, None, 0.5, aux_active=False, backprop=True)
    hw = model.params["flow.hyper_w"]
    hb = model.params["flow.hyper_b"]
    assert hw.grad is not None and np.any(hw.grad != 0)
    assert hb.grad is not None and np.any(hb.grad != 0)


def test_dims_mismatch_rejected(rng):
    cfg = tiny_cfg()
    with pytest.raises(ConfigError):
        train(tiny_video(rng, t=9), None, cfg,
              TrainConfig(iterations=1, aux_fraction=0.0))


def test_aux_phase_requires_guidance(rng):
    cfg = tiny_cfg()
    with pytest.raises(ConfigError):
        train(tiny_video(rng), None, cfg,
              TrainConfig(iterations=10, aux_fraction=0.5))


def test_training_is_deterministic(rng):
    cfg = tiny_cfg()
    video = tiny_video(np.random.default_rng(5))
    guidance = tiny_guidance(cfg, np.random.default_rng(6))
    tcfg = TrainConfig(iterations=60, batch_fraction=0.1, seed=11,
                       aux_fraction=0.2, box_refresh_interval=25)
    m1, _ = train(video, guidance, cfg, tcfg, compute_final_psnr=False)
    m2, _ = train(video, guidance, cfg, tcfg, compute_final_psnr=False)
    for a, b in zip(m1.params, m2.params):
        assert np.array_equal(a.data, b.data), a.name
    assert np.array_equal(m1.boxes, m2.boxes)


def test_training_reduces_loss_and_masks_filter(rng):
    cfg = tiny_cfg()
    video = tiny_video(np.random.default_rng(5))
    guidance = tiny_guidance(cfg, np.random.default_rng(6))
    masks = np.zeros((8, 16, 16), bool)
    masks[:, :4, :4] = True
    tcfg = TrainConfig(iterations=150, batch_fraction=0.2, seed=2,
                       aux_fraction=0.1, log_interval=10)
    model, report = train(video, guidance, cfg, tcfg, masks=masks,
                          compute_final_psnr=False)
    first = np.mean([r[2] for r in report.rows[:3]])
    last = np.mean([r[2] for r in report.rows[-3:]])
    assert last < first


def test_report_csv_format(tmp_path):
    from nvtm.trainer import TrainReport
    rep = TrainReport()
    rep.log(0, 1e-3, 0.5, 0.1, 1.0)
    rep.final_psnr = 30.0
    path = tmp_path / "rep.csv"
    rep.save_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,lr,l_recon,l_aux,seconds"
    assert lines[1].startswith("0,0.001,0.5,0.1")
