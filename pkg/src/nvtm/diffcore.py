"""Differentiable primitives with hand-derived forward/backward rules.

The model has a fixed topology, so there is no tape: every composite
(flow net, grid lookup, modulated synthesizer) chains these primitives
manually and mirrors the chain in its backward pass.  Primitives are
pure; gradient accumulation into parameters happens at the model level
through :class:`Tensor` / :class:`ParamStore`.

All arithmetic is float32 by default.  Gradient checking rebuilds the
same computations at float64 (callers pass float64 inputs), where the
central-difference comparison is tight.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32


class Tensor:
    """A named parameter array with an optional gradient accumulator.

    ``grad`` is lazily allocated and always accumulated with ``+=`` so
    running a backward pass twice doubles every gradient buffer.
    ``touched`` collects flat indices written by sparse scatters, which
    lets the optimizer skip untouched grid entries.
    """

    __slots__ = ("name", "data", "grad", "decay", "touched", "m", "v")

    def __init__(self, data, name="", decay=False):
        self.name = name
        self.data = np.ascontiguousarray(data)
        self.grad = None
        self.decay = decay
        self.touched = None
        self.m = None
        self.v = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def rows(self, arr):
        """View as (rows, feature-block); scatters address the rows."""
        return arr.reshape(-1, self.data.shape[-1]) if self.data.ndim > 1 \
            else arr.reshape(-1, 1)

    def zero_grad(self):
        """Clear the gradient; only touched rows are rewritten when the
        tensor was last updated through scatters."""
        if self.grad is not None:
            if isinstance(self.touched, list):
                g2 = self.rows(self.grad)
                for idx in self.touched:
                    g2[idx] = 0
            else:
                self.grad.fill(0)
        self.touched = None

    def accumulate(self, g):
        """Dense gradient accumulation."""
        self.ensure_grad()
        self.grad += g
        self.touched = False  # dense update: whole tensor is live

    def scatter_accumulate(self, index, g):
        """Sparse accumulation at ``index`` (tuple of integer arrays
        addressing all leading axes, with the last axis as the block).

        Rows collapse to unique targets first so the write touches
        memory proportional to the batch, not the tensor.
        """
        if len(index) != max(self.data.ndim - 1, 1):
            raise DimensionError(
                f"scatter into {self.name}: got {len(index)} index axes "
                f"for shape {self.data.shape}")
        self.ensure_grad()
        flat = np.ravel_multi_index(index, self.data.shape[: len(index)])
        uidx, inv = np.unique(flat, return_inverse=True)
        g2 = np.asarray(g).reshape(flat.size, -1)
        compact = np.zeros((uidx.size, g2.shape[1]), dtype=g2.dtype)
        np.add.at(compact, inv, g2)
        self.rows(self.grad)[uidx] += compact
        if self.touched is None:
            self.touched = [uidx]
        elif isinstance(self.touched, list):
            self.touched.append(uidx)


class ParamStore:
    """Ordered mapping name -> Tensor.

    Iteration order is insertion order and is what the serializer and
    optimizer rely on, so it must never depend on runtime conditions.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name, data, decay=False):
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name: {name}")
        t = Tensor(data, name=name, decay=decay)
        self._entries[name] = t
        return t

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries.keys())

    def items(self):
        return self._entries.items()

    def zero_grad(self):
        for t in self:
            t.zero_grad()

    def total_size(self):
        return sum(t.size for t in self)

    def check_finite(self, context=""):
        for t in self:
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"non-finite parameter {t.name} {context}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def affine_forward(x, w, b):
    """y = x @ w + b for x (N,I), w (I,O), b (O,)."""
    x = np.asarray(x)
    w = np.asarray(w)
    b = np.asarray(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"affine shapes do not conform: x {x.shape} w {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"affine bias shape {b.shape} vs {w.shape[1]}")
    y = x @ w + b
    return y, (x, w)


def affine_backward(cache, gy):
    """Returns (gx, gw, gb) given upstream gy."""
    x, w = cache
    gy = np.asarray(gy)
    gx = gy @ w.T
    gw = x.T @ gy
    gb = gy.sum(axis=0)
    return gx, gw, gb


def sine_forward(x, omega):
    """y = sin(omega * x)."""
    if omega <= 0:
        raise ConfigError(f"omega must be positive, got {omega}")
    x = np.asarray(x)
    y = np.sin(omega * x)
    return y, (x, omega)


def sine_backward(cache, gy):
    x, omega = cache
    return (gy * (omega * np.cos(omega * x)),)


def relu_forward(x):
    x = np.asarray(x)
    y = np.maximum(x, 0)
    return y, (x > 0)


def relu_backward(cache, gy):
    mask = cache
    return (gy * mask,)


def mse_forward(pred, target):
    """Mean of squared differences; scalar output."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise DimensionError("mse of empty input")
    diff = pred - target
    return float(np.mean(diff * diff)), diff


def mse_backward(cache, gy=1.0):
    diff = cache
    return (gy * 2.0 * diff / diff.size,)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def _as_prim(primitive):
    if isinstance(primitive, str):
        try:
            return PRIMITIVES[primitive]
        except KeyError:
            raise ConfigError(f"unknown primitive: {primitive}") from None
    return primitive


def grad_check(primitive, inputs, eps=1e-6, rng=None, sample=None,
               resolve_floor=0.0):
    """Max relative error between analytic and central-difference grads.

    ``primitive(*inputs)`` must return ``(y, vjp)`` where ``vjp(gy)``
    yields one gradient per input.  The scalar probe is L = sum(y * r)
    for a fixed random r, so the analytic gradient of L is vjp(r).
    ``sample`` limits the number of perturbed entries per input, which
    keeps checks of large composites affordable; None checks them all.
    ``resolve_floor`` skips entries where analytic and numeric values
    are both that small in magnitude: below roughly 1e-5 the float64
    difference quotient is dominated by rounding of the probe sum and
    cannot resolve a relative comparison at any step size.
    """
    if not (0.0 < eps <= 1e-2):
        raise ConfigError(f"eps must be in (0, 1e-2], got {eps}")
    fn = _as_prim(primitive)
    rng = rng or np.random.default_rng(0)
    inputs = [np.array(x, copy=True) for x in inputs]

    y, vjp = fn(*inputs)
    y = np.asarray(y)
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite forward output in grad_check")
    r = rng.standard_normal(y.shape).astype(y.dtype, copy=False)
    if y.ndim == 0:
        r = np.asarray(float(r))
    analytic = vjp(r)
    for g in analytic:
        if g is not None and not np.all(np.isfinite(np.asarray(g))):
            raise NumericError("non-finite analytic gradient in grad_check")

    def loss():
        out = np.asarray(fn(*inputs)[0])
        return float(np.sum(out * r))

    worst = 0.0
    for x, g in zip(inputs, analytic):
        if g is None:
            continue
        g = np.asarray(g)
        flat = x.reshape(-1)
        n = flat.size
        if sample is not None and sample < n:
            positions = rng.choice(n, size=sample, replace=False)
        else:
            positions = range(n)
        for pos in positions:
            keep = flat[pos]
            flat[pos] = keep + eps
            lp = loss()
            flat[pos] = keep - eps
            lm = loss()
            flat[pos] = keep
            cd = (lp - lm) / (2.0 * eps)
            a = float(g.reshape(-1)[pos])
            if max(abs(a), abs(cd)) < resolve_floor:
                continue
            denom = max(abs(a), abs(cd), 1e-12)
            worst = max(worst, abs(a - cd) / denom)
    return worst


def _prim_affine(x, w, b):
    y, cache = affine_forward(x, w, b)
    return y, lambda gy: affine_backward(cache, gy)


def _prim_sine(x, omega=30.0):
    y, cache = sine_forward(x, omega)
    return y, lambda gy: sine_backward(cache, gy) + (None,)


def _prim_relu(x):
    y, cache = relu_forward(x)
    return y, lambda gy: relu_backward(cache, gy)


def _prim_mse(pred, target):
    y, cache = mse_forward(pred, target)
    return y, lambda gy: mse_backward(cache, gy) + (None,)


PRIMITIVES = {
    "affine": _prim_affine,
    "sine": _prim_sine,
    "relu": _prim_relu,
    "mse": _prim_mse,
}
