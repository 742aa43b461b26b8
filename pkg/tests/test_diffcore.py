import numpy as np
import pytest

from nvtm.diffcore import (ParamStore, Tensor, affine_backward,
                           affine_forward, grad_check, mse_backward,
                           mse_forward, sine_backward, sine_forward)
from nvtm.errors import ConfigError, DimensionError


def test_affine_identity_like():
    y, _ = affine_forward(np.array([[1.0, 0.0]]),
                          np.array([[2.0, 0.0], [0.0, 3.0]]),
                          np.zeros(2))
    assert np.array_equal(y, [[2.0, 0.0]])


def test_affine_zero_weight():
    x = np.random.default_rng(0).standard_normal((4, 3))
    y, _ = affine_forward(x, np.zeros((3, 1)), np.array([5.0]))
    assert np.array_equal(y, np.full((4, 1), 5.0))


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        affine_forward(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))
    with pytest.raises(DimensionError):
        affine_forward(np.zeros((2, 3)), np.zeros((3, 2)), np.zeros(3))


def test_affine_backward_vs_finite_differences(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))
    b = rng.standard_normal(2)
    assert grad_check("affine", [x, w, b], eps=1e-5, rng=rng) < 1e-6


def test_sine_at_zero():
    y, cache = sine_forward(np.zeros(1), 30.0)
    assert y[0] == 0.0
    (gx,) = sine_backward(cache, np.ones(1))
    assert gx[0] == pytest.approx(30.0)


def test_sine_extremum():
    x = np.array([np.pi / 60.0])
    y, cache = sine_forward(x, 30.0)
    assert y[0] == pytest.approx(1.0)
    (gx,) = sine_backward(cache, np.ones(1))
    assert abs(gx[0]) < 1e-12


def test_sine_rejects_bad_omega():
    with pytest.raises(ConfigError):
        sine_forward(np.zeros(1), 0.0)


def test_sine_backward_vs_finite_differences(rng):
    x = rng.standard_normal((5, 2))
    assert grad_check("sine", [x], eps=1e-6, rng=rng) < 1e-6


def test_mse_equal_inputs():
    a = np.ones((2, 5))
    val, cache = mse_forward(a, a.copy())
    assert val == 0.0
    (g,) = mse_backward(cache)
    assert np.array_equal(g, np.zeros_like(a))


def test_mse_uniform_difference():
    pred = np.full(10, 0.1)
    val, _ = mse_forward(pred, np.zeros(10))
    assert val == pytest.approx(0.01)


def test_mse_empty_and_mismatch():
    with pytest.raises(DimensionError):
        mse_forward(np.zeros((0,)), np.zeros((0,)))
    with pytest.raises(DimensionError):
        mse_forward(np.zeros(3), np.zeros(4))


def test_mse_gradient_vs_finite_differences(rng):
    pred = rng.standard_normal((4, 3))
    target = rng.standard_normal((4, 3))
    assert grad_check("mse", [pred, target], eps=1e-6, rng=rng) < 1e-6


def test_grad_check_eps_validation(rng):
    with pytest.raises(ConfigError):
        grad_check("mse", [np.zeros(2), np.zeros(2)], eps=0.5)
    with pytest.raises(ConfigError):
        grad_check("mse", [np.zeros(2), np.zeros(2)], eps=0.0)


def test_grad_check_detects_sign_flip(rng):
    def corrupted(x):
        y, cache = sine_forward(x, 3.0)
        return y, lambda gy: tuple(-g for g in sine_backward(cache, gy))

    err = grad_check(corrupted, [rng.standard_normal(6)], eps=1e-6, rng=rng)
    assert err == pytest.approx(2.0, abs=1e-3)


@pytest.mark.parametrize("dtype,eps,tol,floor", [
    (np.float64, 1e-6, 1e-5, 0.0),
    # 32-bit forward noise caps how small a gradient a central
    # difference can resolve; sub-resolution entries are skipped
    (np.float32, 2e-3, 1e-3, 1.0),
])
def test_primitives_pass_100_random_instances(dtype, eps, tol, floor):
    rng = np.random.default_rng(7)
    for _ in range(100):
        x = rng.standard_normal((3, 4)).astype(dtype)
        w = rng.standard_normal((4, 2)).astype(dtype)
        b = rng.standard_normal(2).astype(dtype)
        assert grad_check("affine", [x, w, b], eps=eps, rng=rng,
                          resolve_floor=floor) < tol
        s = rng.standard_normal((2, 5)).astype(dtype)
        assert grad_check("sine", [s], eps=eps, rng=rng,
                          resolve_floor=floor) < tol
        p = rng.standard_normal(6).astype(dtype)
        t = rng.standard_normal(6).astype(dtype)
        assert grad_check("mse", [p, t], eps=eps, rng=rng,
                          resolve_floor=floor) < tol


def test_forward_bitwise_repeatable(rng):
    x = rng.standard_normal((64, 32)).astype(np.float32)
    w = rng.standard_normal((32, 16)).astype(np.float32)
    b = rng.standard_normal(16).astype(np.float32)
    y1, _ = affine_forward(x, w, b)
    y2, _ = affine_forward(x, w, b)
    assert np.array_equal(y1, y2)


def test_gradient_accumulation_doubles(rng):
    t = Tensor(rng.standard_normal((4, 3)).astype(np.float32), "p")
    g = rng.standard_normal((4, 3)).astype(np.float32)
    t.accumulate(g)
    once = t.grad.copy()
    t.accumulate(g)
    assert np.allclose(t.grad, 2 * once)


def test_scatter_accumulation_doubles(rng):
    t = Tensor(np.zeros((5, 4, 4, 2), np.float32), "plane")
    idx = (np.array([0, 0, 2]), np.array([1, 1, 3]), np.array([2, 2, 0]))
    vals = rng.standard_normal((3, 2)).astype(np.float32)
    t.scatter_accumulate(idx, vals)
    once = t.grad.copy()
    t.scatter_accumulate(idx, vals)
    assert np.allclose(t.grad, 2 * once)
    # duplicate index rows accumulate, not overwrite
    assert np.allclose(t.grad[0, 1, 2], 2 * (vals[0] + vals[1]))


def test_zero_grad_clears_touched_rows(rng):
    t = Tensor(np.zeros((5, 4, 4, 2), np.float32), "plane")
    idx = (np.array([1]), np.array([2]), np.array([3]))
    t.scatter_accumulate(idx, rng.standard_normal((1, 2)).astype(np.float32))
    t.zero_grad()
    assert np.all(t.grad == 0)
    assert t.touched is None


def test_param_store_rejects_duplicates():
    store = ParamStore()
    store.add("a", np.zeros(3))
    with pytest.raises(ConfigError):
        store.add("a", np.zeros(3))


def test_param_store_order_is_insertion_order():
    store = ParamStore()
    for name in ("z", "m", "a"):
        store.add(name, np.zeros(1))
    assert store.names() == ["z", "m", "a"]
