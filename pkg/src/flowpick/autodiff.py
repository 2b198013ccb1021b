"""Minimal reverse-mode autodiff on dense float64 arrays.

Supports the handful of primitives needed by the rest of the package:
matmul, elementwise arithmetic, tanh/softplus/exp/log, layer norm and
softmax over the last axis, reductions, slicing and concatenation.
Gradients are accumulated on an explicit tape that is rebuilt for every
forward pass.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a primitive."""


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes = []  # (output, [(input, vjp), ...])

    def backward(self, root: Tensor):
        """Populate .grad of every tensor reachable from a scalar root."""
        if root.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        root.grad = np.ones_like(root.data)
        for out, pulls in reversed(self.nodes):
            if out.grad is None:
                continue
            for inp, vjp in pulls:
                if not inp.requires_grad:
                    continue
                g = vjp(out.grad)
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=np.float64)
                else:
                    inp.grad = inp.grad + g


_ACTIVE_TAPE: Tape | None = None


@contextmanager
def tape():
    """Activate a fresh tape; ops outside any tape run inference-only."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = Tape()
    try:
        yield _ACTIVE_TAPE
    finally:
        _ACTIVE_TAPE = prev


def _record(out: Tensor, pulls):
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE.nodes.append((out, pulls))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(name, a, b, fwd, vjp_a, vjp_b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from e
    out = Tensor(data, requires_grad=a.requires_grad or b.requires_grad)
    _record(out, [(a, lambda g, a=a, b=b: _unbroadcast(vjp_a(g, a.data, b.data), a.shape)),
                  (b, lambda g, a=a, b=b: _unbroadcast(vjp_b(g, a.data, b.data), b.shape))])
    return out


def add(a, b):
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, np.multiply,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary("div", a, b, np.divide,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(np.matmul(a.data, b.data),
                 requires_grad=a.requires_grad or b.requires_grad)

    def vjp_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)

    def vjp_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    _record(out, [(a, vjp_a), (b, vjp_b)])
    return out


def _unary(a, fwd, make_vjp):
    a = as_tensor(a)
    out = Tensor(fwd(a.data), requires_grad=a.requires_grad)
    _record(out, [(a, make_vjp(a.data, out.data))])
    return out


def neg(a):
    return _unary(a, np.negative, lambda x, y: lambda g: -g)


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: lambda g: g * (1.0 - y * y))


def exp(a):
    return _unary(a, np.exp, lambda x, y: lambda g: g * y)


def log(a):
    return _unary(a, np.log, lambda x, y: lambda g: g / x)


def _softplus_fwd(x):
    # overflow-safe form: max(x, 0) + log1p(exp(-|x|))
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    return _unary(a, _softplus_fwd, lambda x, y: lambda g: g * _sigmoid(x))


def square(a):
    return _unary(a, np.square, lambda x, y: lambda g: g * 2.0 * x)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims),
                 requires_grad=a.requires_grad)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    _record(out, [(a, vjp)])
    return out


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def layernorm(a, eps=1e-5):
    """Normalize over the last axis to zero mean, unit variance (non-affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    s = np.sqrt(var + eps)
    xhat = (a.data - mu) / s
    out = Tensor(xhat, requires_grad=a.requires_grad)

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (g - gm - xhat * gxm) / s

    _record(out, [(a, vjp)])
    return out


def softmax(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s, requires_grad=a.requires_grad)

    def vjp(g):
        return s * (g - (g * s).sum(axis=-1, keepdims=True))

    _record(out, [(a, vjp)])
    return out


def slice_(a, key):
    a = as_tensor(a)
    out = Tensor(a.data[key], requires_grad=a.requires_grad)

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        return buf

    _record(out, [(a, vjp)])
    return out


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=any(t.requires_grad for t in tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return vjp

    _record(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])
    return out


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)
    _record(out, [(a, lambda g: g.reshape(a.shape))])
    return out


def maximum(a, b):
    return _binary("maximum", a, b, np.maximum,
                   lambda g, x, y: g * (x >= y), lambda g, x, y: g * (x < y))


def minimum(a, b):
    return _binary("minimum", a, b, np.minimum,
                   lambda g, x, y: g * (x <= y), lambda g, x, y: g * (x > y))


def clip(a, lo: float, hi: float):
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi), requires_grad=a.requires_grad)
    mask = (a.data >= lo) & (a.data <= hi)
    _record(out, [(a, lambda g: g * mask)])
    return out


# ---------------------------------------------------------------------------
# parameters

def glorot_uniform(rng: np.random.Generator, shape, name=None) -> Tensor:
    """Weight init: uniform in +-sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = shape[-2], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros_param(shape, name=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def zero_grads(params):
    for p in params.values() if isinstance(params, dict) else params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(f, params, step=1e-5, rng=None, max_entries_per_param=None):
    """Max relative error between analytic gradients and central differences.

    f is a deterministic zero-argument callable returning a scalar Tensor and
    reading the given parameter tensors. Entries may be subsampled per
    parameter to bound runtime.
    """
    if isinstance(params, dict):
        params = list(params.values())
    zero_grads(params)
    with tape() as tp:
        out = f()
    if out.size != 1 or not np.isfinite(out.data).all():
        raise ValueError("finite_diff_check requires a finite scalar output")
    tp.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    def value():
        return float(as_tensor(f()).data)

    max_err = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(flat.size, size=max_entries_per_param, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            f1 = value()
            flat[i] = orig - step
            f2 = value()
            flat[i] = orig
            num = (f1 - f2) / (2.0 * step)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            max_err = max(max_err, err)
    return max_err


# ---------------------------------------------------------------------------
# checkpoint format: 8-byte magic, little-endian u64 manifest length, JSON
# manifest [{name, shape, offset}] with byte offsets into the raw <f8 data
# section that follows.

_MAGIC = b"FPCKPT01"


def save_checkpoint(path, params: dict):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        offset += len(blob)
        blobs.append(blob)
    manifest = json.dumps(entries).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        entries = json.loads(fh.read(mlen).decode("utf-8"))
        data = fh.read()
    out = {}
    for ent in entries:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=ent["offset"])
        out[ent["name"]] = arr.reshape(shape).astype(np.float64)
    return out


def load_into(path, params: dict):
    """Load a checkpoint into existing parameter tensors, checking shapes."""
    loaded = load_checkpoint(path)
    missing = set(params) - set(loaded)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
    for name, p in params.items():
        arr = loaded[name]
        if arr.shape != p.data.shape:
            raise ValueError(
                f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.data.shape}")
        p.data = arr.copy()
