"""Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors wrap numpy arrays and are immutable once produced. While a Tape is
active, every differentiable operation appends (output, inputs, vjp) to it;
``backward`` replays the entries in reverse and accumulates gradients into
the Parameters that participated. Without an active tape the same functions
run as plain numpy forward passes, which keeps eval mode and the
finite-difference oracle cheap.

Everything is 64-bit. That is deliberate: the package verifies every
derivative against central finite differences, and float32 would not leave
enough headroom for a 1e-5 relative tolerance.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tensor:
    """Immutable dense array of float64 values."""

    __slots__ = ("data", "param")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.param = None  # backref set by Parameter for gradient routing

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """A named, trainable tensor with an accumulated gradient buffer."""

    def __init__(self, value, name):
        data = value.data if isinstance(value, Tensor) else value
        # contiguity keeps element-wise finite-difference pokes view-safe
        self.value = Tensor(np.ascontiguousarray(data, dtype=np.float64))
        self.value.param = self
        self.name = name
        self.grad = np.zeros_like(self.value.data)

    def reset_grad(self):
        self.grad = np.zeros_like(self.value.data)

    def assign(self, data):
        """Replace the value with a fresh tensor (the old one stays immutable)."""
        new = np.ascontiguousarray(data, dtype=np.float64)
        if new.shape != self.value.data.shape:
            raise ShapeError(
                f"parameter {self.name!r}: cannot assign shape {new.shape} "
                f"over {self.value.data.shape}"
            )
        self.value.param = None
        self.value = Tensor(new)
        self.value.param = self

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.data.shape})"


def zero_grads(params):
    for p in params:
        p.reset_grad()


class Tape:
    """Ordered record of differentiable operations; single use.

    Used as a context manager::

        tape = Tape()
        with tape:
            loss = ...   # tensor ops recorded here
        backward(loss, tape)
    """

    def __init__(self):
        self.entries = []
        self.consumed = False

    def __enter__(self):
        self._outer = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = self._outer
        return False


def _as_const(x):
    """Coerce a non-Tensor operand to a float64 ndarray constant."""
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Sum g down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    ad = a.data if ta else _as_const(a)
    bd = b.data if tb else _as_const(b)
    out = Tensor(ad + bd)
    tape = _active_tape()
    if tape is not None and (ta or tb):
        ash, bsh = ad.shape, bd.shape

        def vjp(g):
            return (
                _unbroadcast(g, ash) if ta else None,
                _unbroadcast(g, bsh) if tb else None,
            )

        tape.entries.append((out, (a if ta else None, b if tb else None), vjp))
    return out


def sub(a, b):
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    ad = a.data if ta else _as_const(a)
    bd = b.data if tb else _as_const(b)
    out = Tensor(ad - bd)
    tape = _active_tape()
    if tape is not None and (ta or tb):
        ash, bsh = ad.shape, bd.shape

        def vjp(g):
            return (
                _unbroadcast(g, ash) if ta else None,
                _unbroadcast(-g, bsh) if tb else None,
            )

        tape.entries.append((out, (a if ta else None, b if tb else None), vjp))
    return out


def mul(a, b):
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    ad = a.data if ta else _as_const(a)
    bd = b.data if tb else _as_const(b)
    out = Tensor(ad * bd)
    tape = _active_tape()
    if tape is not None and (ta or tb):
        ash, bsh = ad.shape, bd.shape

        def vjp(g):
            return (
                _unbroadcast(g * bd, ash) if ta else None,
                _unbroadcast(g * ad, bsh) if tb else None,
            )

        tape.entries.append((out, (a if ta else None, b if tb else None), vjp))
    return out


def neg(a):
    out = Tensor(-a.data)
    tape = _active_tape()
    if tape is not None:
        tape.entries.append((out, (a,), lambda g: (-g,)))
    return out


def matmul(a, b):
    ad = a.data if isinstance(a, Tensor) else _as_const(a)
    bd = b.data if isinstance(b, Tensor) else _as_const(b)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    out = Tensor(ad @ bd)
    tape = _active_tape()
    if tape is not None:
        ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
        if ta or tb:

            def vjp(g):
                return (
                    g @ bd.T if ta else None,
                    ad.T @ g if tb else None,
                )

            tape.entries.append((out, (a if ta else None, b if tb else None), vjp))
    return out


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.data.shape}")
    out = Tensor(a.data.T)
    tape = _active_tape()
    if tape is not None:
        tape.entries.append((out, (a,), lambda g: (g.T,)))
    return out


def reshape(a, shape):
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))
    tape = _active_tape()
    if tape is not None:
        tape.entries.append((out, (a,), lambda g: (g.reshape(old),)))
    return out


def concat_cols(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(
            f"concat_cols: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    na = a.data.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    tape = _active_tape()
    if tape is not None:
        tape.entries.append((out, (a, b), lambda g: (g[:, :na], g[:, na:])))
    return out


def slice_rows(a, lo, hi):
    full = a.data.shape
    out = Tensor(a.data[lo:hi])
    tape = _active_tape()
    if tape is not None:

        def vjp(g):
            pad = np.zeros(full)
            pad[lo:hi] = g
            return (pad,)

        tape.entries.append((out, (a,), vjp))
    return out


def sum_all(a):
    shape = a.data.shape
    out = Tensor(a.data.sum())
    tape = _active_tape()
    if tape is not None:
        tape.entries.append((out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),)))
    return out


def mean_all(a):
    n = a.data.size
    shape = a.data.shape
    out = Tensor(a.data.mean())
    tape = _active_tape()
    if tape is not None:
        tape.entries.append(
            (out, (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))
        )
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def softmax_rows(a):
    """Row-wise softmax with max-subtraction for overflow safety."""
    x = a.data
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {x.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)
    tape = _active_tape()
    if tape is not None:

        def vjp(g):
            return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

        tape.entries.append((out, (a,), vjp))
    return out


def _hardswish_grad(x):
    g = (2.0 * x + 3.0) / 6.0
    return np.where(x <= -3.0, 0.0, np.where(x >= 3.0, 1.0, g))


def hardswish(a):
    x = a.data
    # piecewise keeps the x >= 3 branch exactly x (x*6/6 can lose an ulp)
    y = np.where(x >= 3.0, x, np.where(x <= -3.0, 0.0, x * (x + 3.0) / 6.0))
    out = Tensor(y)
    tape = _active_tape()
    if tape is not None:
        tape.entries.append((out, (a,), lambda g: (g * _hardswish_grad(x),)))
    return out


def _leaky_relu_grad(x, slope):
    return np.where(x > 0.0, 1.0, slope)


def leaky_relu(a, slope):
    x = a.data
    out = Tensor(np.where(x > 0.0, x, slope * x))
    tape = _active_tape()
    if tape is not None:
        tape.entries.append((out, (a,), lambda g: (g * _leaky_relu_grad(x, slope),)))
    return out


def _sigmoid_grad(y):
    return y * (1.0 - y)


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)
    tape = _active_tape()
    if tape is not None:
        tape.entries.append((out, (a,), lambda g: (g * _sigmoid_grad(y),)))
    return out


def _tanh_grad(y):
    return 1.0 - y * y


def tanh(a):
    y = np.tanh(a.data)
    out = Tensor(y)
    tape = _active_tape()
    if tape is not None:
        tape.entries.append((out, (a,), lambda g: (g * _tanh_grad(y),)))
    return out


def _relu6_grad(x):
    return ((x > 0.0) & (x < 6.0)).astype(np.float64)


def relu6(a):
    x = a.data
    out = Tensor(np.clip(x, 0.0, 6.0))
    tape = _active_tape()
    if tape is not None:
        tape.entries.append((out, (a,), lambda g: (g * _relu6_grad(x),)))
    return out


def activation(kind, a, slope=None):
    """Apply an activation selected by name.

    `leaky_relu` requires an explicit slope; every other kind rejects one.
    """
    if kind == "leaky_relu":
        if slope is None:
            raise ConfigError("leaky_relu requires a slope")
        return leaky_relu(a, slope)
    if slope is not None:
        raise ConfigError(f"activation {kind!r} takes no slope")
    table = {
        "hardswish": hardswish,
        "sigmoid": sigmoid,
        "tanh": tanh,
        "relu6": relu6,
    }
    fn = table.get(kind)
    if fn is None:
        raise ConfigError(f"unknown activation kind {kind!r}")
    return fn(a)


def dropout(a, p, training, rng=None):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ContractError("training-mode dropout requires a seeded generator")
    keep = (rng.random(a.data.shape) >= p).astype(np.float64) / (1.0 - p)
    out = Tensor(a.data * keep)
    tape = _active_tape()
    if tape is not None:
        tape.entries.append((out, (a,), lambda g: (g * keep,)))
    return out


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss, tape):
    """Accumulate d(loss)/d(parameter) into every participating Parameter.

    The tape is consumed: a second backward over the same tape raises.
    Gradients add onto whatever is already in each Parameter's buffer, so
    two backward passes from two losses accumulate the sum.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward needs a scalar loss tensor")
    if tape.consumed:
        raise ContractError("tape already consumed; rebuild it with a new forward pass")
    tape.consumed = True

    grads = {id(loss): [loss, np.ones_like(loss.data)]}
    for out, inputs, vjp in reversed(tape.entries):
        ent = grads.pop(id(out), None)
        if ent is None:
            continue
        in_grads = vjp(ent[1])
        for t, g in zip(inputs, in_grads):
            if t is None or g is None:
                continue
            cur = grads.get(id(t))
            if cur is None:
                grads[id(t)] = [t, g]
            else:
                cur[1] = cur[1] + g  # fresh array: vjp outputs may alias upstream

    for t, g in grads.values():
        if t.param is not None:
            t.param.grad = t.param.grad + g.reshape(t.param.grad.shape)
    tape.entries.clear()


# ---------------------------------------------------------------------------
# finite-difference oracle


def gradient_check(f, params, h=1e-6):
    """Max relative error between analytic and central-difference gradients.

    `f` takes no arguments, reads the current parameter values, and returns
    a scalar loss Tensor. It must be deterministic (dropout disabled); this
    is verified by evaluating it twice before any differencing.

    Per element the error is |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8); the return value is the max over every element of
    every parameter. Existing gradient buffers are cleared.
    """
    if h <= 0.0:
        raise ConfigError(f"step size must be positive, got {h}")
    params = list(params)
    if f().item() != f().item():
        raise ContractError("f is not deterministic (is dropout still active?)")

    zero_grads(params)
    tape = Tape()
    with tape:
        loss = f()
    backward(loss, tape)
    analytic = {p.name: p.grad.copy() for p in params}

    worst = 0.0
    for p in params:
        data = p.value.data
        flat = data.reshape(-1)
        a_flat = analytic[p.name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = f().item()
            flat[i] = saved - h
            down = f().item()
            flat[i] = saved
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            err = abs(a_flat[i] - numeric) / denom
            if err > worst:
                worst = err
    return worst
