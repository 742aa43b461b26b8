"""Finite-difference verification of every differentiable component.

Each component is checked on freshly randomized instances whose
parameters sit at generic scales, with inputs resampled away from the
non-smooth points (relu kinks, clip edges, interpolation cell
boundaries) where a central difference straddles two branches.  The
relative-error criterion is |analytic - cd| / max(|analytic|, |cd|,
1e-12), maximized over checked entries.
"""

from __future__ import annotations

import time

import numpy as np

from . import alignment as al
from . import grids
from .diffcore import ParamStore, grad_check
from .errors import NumericError
from .flow import FlowField
from .grids import GridConfig
from .model import ModelConfig, NvtmModel
from .network import ModSirenConfig, ModulatedSiren
from .trainer import Batch, total_loss

KINK_MARGIN = 1e-3
DEFAULT_EPS = 1e-6
DEFAULT_TOL = 1e-5


def _check_affine(rng, eps):
    n, i, o = rng.integers(1, 6), rng.integers(1, 7), rng.integers(1, 7)
    x = rng.standard_normal((n, i))
    w = rng.standard_normal((i, o))
    b = rng.standard_normal(o)
    return grad_check("affine", [x, w, b], eps=eps, rng=rng)


def _check_sine(rng, eps):
    x = rng.standard_normal((rng.integers(1, 5), rng.integers(1, 8)))
    omega = float(rng.uniform(0.5, 40.0))
    return grad_check(lambda a: _sine_prim(a, omega), [x], eps=eps, rng=rng)


def _sine_prim(x, omega):
    from .diffcore import sine_backward, sine_forward
    y, cache = sine_forward(x, omega)
    return y, lambda gy: sine_backward(cache, gy)


def _check_relu(rng, eps):
    while True:
        x = rng.standard_normal((rng.integers(1, 5), rng.integers(1, 8)))
        if np.min(np.abs(x)) > KINK_MARGIN:
            break
    return grad_check("relu", [x], eps=eps, rng=rng)


def _check_mse(rng, eps):
    shape = (rng.integers(1, 5), rng.integers(1, 5))
    pred = rng.standard_normal(shape)
    target = rng.standard_normal(shape)
    return grad_check("mse", [pred, target], eps=eps, rng=rng)


def _grid_instance(rng):
    cfg = GridConfig(base_res=int(rng.integers(2, 6)),
                     levels=int(rng.integers(1, 4)),
                     scale=float(rng.uniform(1.3, 2.2)),
                     feats=int(rng.integers(1, 4)))
    count = int(rng.integers(1, 3))
    store = ParamStore()
    grid = grids.init_planes(cfg, count, rng, np.float64, store)
    for p in grid.planes:
        p.data[...] = rng.standard_normal(p.shape)
    b = int(rng.integers(2, 6))
    gidx = rng.integers(0, count, b)
    while True:
        u = rng.uniform(0.02, 0.98, b)
        v = rng.uniform(0.02, 0.98, b)
        ok = True
        for l in range(cfg.levels):
            res = grid.planes[l].shape[1]
            for q in (u, v):
                frac = q * (res - 1) - np.floor(q * (res - 1))
                if np.min(np.minimum(frac, 1 - frac)) < KINK_MARGIN:
                    ok = False
        if ok:
            return grid, gidx, u, v


def _check_grid_lookup(rng, eps):
    grid, gidx, u, v = _grid_instance(rng)

    def fn(*arrs):
        for p, a in zip(grid.planes, arrs[:-2]):
            p.data[...] = a
        z, cache = grids.lookup_batch(grid, gidx, arrs[-2], arrs[-1])

        def vjp(gz):
            for p in grid.planes:
                p.zero_grad()
            gu, gv = grids.lookup_backward(cache, gz)
            return [p.grad.copy() for p in grid.planes] + [gu, gv]

        return z, vjp

    inputs = [p.data.copy() for p in grid.planes] + [u, v]
    return grad_check(fn, inputs, eps=eps, rng=rng, resolve_floor=1e-4)


def _network_instance(rng, mode):
    cfg = ModSirenConfig(z_dim=int(rng.integers(2, 7)),
                         depth=int(rng.integers(1, 4)),
                         width=int(rng.integers(4, 10)),
                         omega0=float(rng.uniform(2.0, 8.0)),
                         omega_hidden=float(rng.uniform(2.0, 8.0)),
                         mode=mode)
    store = ParamStore()
    net = ModulatedSiren(cfg, store, rng, dtype=np.float64)
    for p in store:
        p.data[...] = rng.normal(0.0, 0.35, p.shape)
    b = int(rng.integers(2, 5))
    z_scale = 0.6 if mode == "direct" else 1.0
    while True:
        coords = rng.uniform(0.0, 1.0, (b, 3))
        z = z_scale * rng.standard_normal((b, cfg.z_dim))
        if mode == "direct":
            return net, store, coords, z
        m = z
        margin = np.inf
        for i, (wt, bt) in enumerate(net.mod):
            inp = z if i == 0 else np.concatenate([m, z], axis=1)
            pre = inp @ wt.data + bt.data
            margin = min(margin, float(np.min(np.abs(pre))))
            m = np.maximum(pre, 0.0)
        if margin > KINK_MARGIN:
            return net, store, coords, z


def _check_network(rng, eps, mode="modulate"):
    net, store, coords, z = _network_instance(rng, mode)
    tensors = list(store)

    def fn(*arrs):
        for t, a in zip(tensors, arrs[:-2]):
            t.data[...] = a
        rgb, cache = net.forward(arrs[-2], arrs[-1])

        def vjp(gy):
            store.zero_grad()
            gc, gz = net.backward(cache, gy)
            return [t.grad.copy() for t in tensors] + [gc, gz]

        return rgb, vjp

    inputs = [t.data.copy() for t in tensors] + [coords, z]
    return grad_check(fn, inputs, eps=eps, rng=rng, resolve_floor=1e-4)


def _check_hyper_flow(rng, eps):
    shape = al.FlowNetShape(width=int(rng.integers(3, 7)),
                            layers=int(rng.integers(3, 6)),
                            omega=float(rng.uniform(2.0, 10.0)))
    gop_count = int(rng.integers(1, 4))
    embed_dim = 8
    store = ParamStore()
    al.init_hyper(shape, gop_count, embed_dim, rng, np.float64, store,
                  weight_scale=0.03, final_gain=0.5)
    hyper_w = store["flow.hyper_w"]
    hyper_b = store["flow.hyper_b"]
    groups = int(rng.integers(1, 4))
    kidx = rng.integers(0, gop_count, groups)
    keyframes = rng.integers(0, 9, groups)
    while True:  # keep the log1p scale clearly nonzero
        f_pos = rng.uniform(0.0, 9.0, groups)
        if np.min(np.abs(f_pos - keyframes)) > 0.05:
            break
    embed = al.time_embedding(f_pos, 10, embed_dim)
    scales = al.flow_scale(f_pos, keyframes).astype(np.float64)
    b = int(rng.integers(2, 6))
    gidx = rng.integers(0, groups, b)
    xy = rng.uniform(0.0, 1.0, (b, 2))

    def fn(w, bias, q):
        hyper_w.data[...] = w
        hyper_b.data[...] = bias
        theta, hc = al.generate_flow_params(hyper_w, hyper_b, kidx, embed)
        flow, fc = al.flow_net_forward(theta, shape, q, gidx, scales)

        def vjp(gflow):
            store.zero_grad()
            dtheta, dxy = al.flow_net_backward(fc, gflow)
            al.generate_flow_params_backward(hc, dtheta)
            return [hyper_w.grad.copy(), hyper_b.grad.copy(), dxy]

        return flow, vjp

    return grad_check(fn, [hyper_w.data.copy(), hyper_b.data.copy(), xy],
                      eps=eps, rng=rng, resolve_floor=1e-4)


def _model_instance(rng):
    frames = int(rng.integers(4, 8))
    cfg = ModelConfig(
        frames=frames, height=12, width=12,
        gop_size=int(rng.integers(2, 4)), neighbors=(0, 1),
        latent=GridConfig(4, 2, 1.8, 2), static=GridConfig(4, 2, 1.5, 2),
        net_depth=2, net_width=6, omega0=10.0, omega_hidden=10.0,
        embed_dim=8, flow_width=4, flow_layers=3, flow_omega=6.0)
    model = NvtmModel.build(cfg, seed=int(rng.integers(0, 2 ** 31)),
                            dtype=np.float64)
    for p in model.params:
        p.data[...] = rng.normal(0.0, 0.2, p.shape)
    model.boxes[:] = np.array([-2.5, -2.5, 3.5, 3.5])
    b = 4
    f = np.sort(rng.integers(0, frames, b))
    i = rng.integers(1, 11, b)
    j = rng.integers(1, 11, b)
    batch = Batch(f, i, j,
                  (j / 11).astype(np.float64), (i / 11).astype(np.float64),
                  (f / max(frames - 1, 1)).astype(np.float64),
                  rng.uniform(0.0, 1.0, (b, 3)))
    part = cfg.partition()
    guidance = {}
    for fr, kf in al.guidance_pairs(part, cfg.neighbors):
        data = rng.uniform(-0.05, 0.05, (12, 12, 2)).astype(np.float32)
        guidance[(fr, kf)] = FlowField(12, 12, data, fr, kf)
    return model, batch, guidance


def _model_margins(model, batch):
    """Smallest distance to any kink for one forward pass."""
    margin = np.inf
    rgb, cache = model.forward_batch(batch.x, batch.y, batch.t, f_int=batch.f)
    for part in cache["lat"]["parts"]:
        gcache = part[3]
        for lc in gcache[2]:
            fu, fv = lc[2], lc[3]
            for frac in (fu, fv):
                margin = min(margin, float(np.min(np.minimum(frac, 1 - frac))))
        span, inside = part[2][:2]
        if not np.all(inside):
            return 0.0
    netc = cache["net"]
    if netc[0] == "modulate":
        _, c, z, gains, mod_cache, _, _ = netc
        m = z
        for i, (wt, bt) in enumerate(model.net.mod):
            inp = z if i == 0 else np.concatenate([m, z], axis=1)
            pre = inp @ wt.data + bt.data
            margin = min(margin, float(np.min(np.abs(pre))))
            m = np.maximum(pre, 0.0)
    return margin


def _check_total_loss(rng, eps, sample=8):
    while True:
        model, batch, guidance = _model_instance(rng)
        if _model_margins(model, batch) > KINK_MARGIN:
            break
    tensors = list(model.params)

    def fn(*arrs):
        for t, a in zip(tensors, arrs):
            t.data[...] = a
        val, _, _ = total_loss(model, batch, guidance, w_aux=0.5,
                               aux_active=True, backprop=False)

        def vjp(gy):
            model.params.zero_grad()
            total_loss(model, batch, guidance, w_aux=0.5, aux_active=True,
                       backprop=True)
            return [float(gy) * (t.grad if t.grad is not None
                                 else np.zeros_like(t.data)) for t in tensors]

        return np.asarray(val), vjp

    inputs = [t.data.copy() for t in tensors]
    return grad_check(fn, inputs, eps=eps, rng=rng, sample=sample,
                      resolve_floor=1e-4)


COMPONENTS = [
    ("affine", _check_affine),
    ("sine_act", _check_sine),
    ("relu", _check_relu),
    ("mse", _check_mse),
    ("grid_lookup", _check_grid_lookup),
    ("modulated_network", lambda r, e: _check_network(r, e, "modulate")),
    ("direct_network", lambda r, e: _check_network(r, e, "direct")),
    ("hyper_flow", _check_hyper_flow),
    ("total_loss", _check_total_loss),
]


def run_suite(instances=100, seed=0, eps=DEFAULT_EPS, tol=DEFAULT_TOL,
              progress=None):
    """Run every component check; returns a list of result dicts."""
    results = []
    for name, fn in COMPONENTS:
        rng = np.random.default_rng(seed)
        worst = 0.0
        t0 = time.perf_counter()
        for _ in range(instances):
            try:
                worst = max(worst, fn(rng, eps))
            except NumericError:
                worst = np.inf
                break
        res = {"component": name, "max_rel_err": worst,
               "passed": bool(worst < tol),
               "seconds": time.perf_counter() - t0}
        results.append(res)
        if progress is not None:
            progress(res)
    return results


def suite_passed(results):
    return all(r["passed"] for r in results)
