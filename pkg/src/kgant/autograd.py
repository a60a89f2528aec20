"""Dense tensors with tape-based reverse-mode differentiation.

Each differentiable op records a node carrying its parents and a
vector-Jacobian closure.  Node ids come from one global counter, so the
recording order is total and :func:`backward` replays it in exact reverse.

Broadcasting is limited to a *leading batch* dimension: two operands must
have equal shapes, or one shape must be a trailing suffix of the other
(e.g. ``(N, D) + (B, N, D)``).  Anything else is a :class:`ShapeError`.
"""
from __future__ import annotations

import itertools
import math
from contextlib import contextmanager

import numpy as np

from . import kernels

_node_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """An op was called outside its documented preconditions."""


@contextmanager
def no_grad():
    """Run ops without recording them (inference, oracles)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "parents", "vjp", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.parents = ()
        self.vjp = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.vjp is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data, parents, vjp):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
    return out


class Tape:
    """Ordered record of the nodes reachable from an output.

    ``nodes`` is sorted by node id, i.e. recording order; every op appears
    after its inputs.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        seen = {}
        stack = [out]
        while stack:
            t = stack.pop()
            if t.node_id in seen or not t.requires_grad:
                continue
            seen[t.node_id] = t
            stack.extend(t.parents)
        return cls(sorted(seen.values(), key=lambda t: t.node_id))

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Grads accumulate across calls; zero them between optimisation steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    tape = Tape.from_output(loss)
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


# ------------------------------------------------------------ shape helpers
def _lead_compatible(sa, sb):
    if sa == sb:
        return True
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    return long_[len(long_) - len(short):] == short


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _binary_operands(a, b, opname):
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        if not _lead_compatible(a.shape, b.shape):
            raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ beyond a leading batch dimension")
        return a, b, b.data
    if isinstance(b, (int, float)):
        return a, None, b
    b_arr = np.asarray(b)
    if b_arr.ndim and not _lead_compatible(a.shape, b_arr.shape):
        raise ShapeError(f"{opname}: shapes {a.shape} and {b_arr.shape} differ beyond a leading batch dimension")
    if b_arr.dtype.kind == "f" and b_arr.dtype != a.dtype and b_arr.ndim:
        b_arr = b_arr.astype(a.dtype)
    return a, None, b_arr


# ---------------------------------------------------------------- elementwise
def add(a, b):
    a, bt, bd = _binary_operands(a, b, "add")
    sa = a.shape
    if bt is None:
        return _make(a.data + bd, (a,), lambda g: (_unbroadcast(g, sa),))
    sb = bt.shape
    return _make(a.data + bd, (a, bt), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def sub(a, b):
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -b if isinstance(b, (int, float)) else -np.asarray(b))


def mul(a, b):
    a, bt, bd = _binary_operands(a, b, "mul")
    ad, sa = a.data, a.shape
    if bt is None:
        return _make(ad * bd, (a,), lambda g: (_unbroadcast(g * bd, sa),))
    sb = bt.shape
    return _make(ad * bd, (a, bt),
                 lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def exp(x):
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x):
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh approximation of GELU."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(u)
    y = 0.5 * xd * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _make(y, (x,), vjp)


def sigmoid(x):
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x):
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


# ------------------------------------------------------------------- linear
def matmul(a, b):
    """Matrix product over the last two axes; leading batch axes on either side."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    if ba and bb and not _lead_compatible(ba, bb):
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), sa)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb)
        return ga, gb

    return _make(ad @ bd, (a, b), vjp)


def affine(x, weight, bias=None):
    """Fully connected layer ``x @ weight + bias`` over the last axis."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine: input {x.shape} does not match weight {weight.shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape):
    shape = tuple(shape)
    src = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return _make(y, (x,), lambda g: (g.reshape(src),))


def expand(x, lead):
    """Repeat ``x`` along new leading axes ``lead`` (explicit batch broadcast)."""
    lead = tuple(lead)
    y = np.broadcast_to(x.data, lead + x.shape).copy()
    return _make(y, (x,), lambda g: (g.reshape((-1,) + x.shape).sum(axis=0),))


def getitem(x, idx):
    src, dtype = x.shape, x.dtype

    key = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(k, (list, np.ndarray)) for k in key)

    def vjp(g):
        out = np.zeros(src, dtype=dtype)
        if advanced:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _make(x.data[idx], (x,), vjp)


def concat(tensors, axis=-1):
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[u.shape for u in tensors]} disagree off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), vjp)


def embedding(table, idx):
    """Row lookup ``table[idx]`` for an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range for table of {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(table.data[idx], (table,), vjp)


# --------------------------------------------------------------- reductions
def sum_(x, axis=None):
    src = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), vjp)


def mean(x, axis=None):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis), 1.0 / float(n))


# ------------------------------------------------------------ normalisation
def _rows(a):
    return a.reshape(-1, a.shape[-1])


def softmax(x, axis=-1):
    """Max-subtracted softmax along ``axis``. NaN inputs propagate to NaN outputs."""
    ax = axis % x.ndim
    moved = np.moveaxis(x.data, ax, -1)
    y = kernels.softmax_forward(_rows(moved)).reshape(moved.shape)

    def vjp(g):
        gm = np.moveaxis(g, ax, -1)
        dx = kernels.softmax_backward(_rows(gm), _rows(y)).reshape(gm.shape)
        return (np.moveaxis(dx, -1, ax),)

    return _make(np.moveaxis(y, -1, ax), (x,), vjp)


def log_softmax(x):
    """Log-softmax over the last axis."""
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(xd - m).sum(axis=-1, keepdims=True))
    y = xd - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs feature dim {d}")
    out, xhat, inv = kernels.layer_norm_forward(_rows(x.data), gain.data, bias.data, eps)
    src = x.shape

    def vjp(g):
        dx, dg, db = kernels.layer_norm_backward(_rows(g), xhat, inv, gain.data)
        return dx.reshape(src), dg, db

    return _make(out.reshape(src), (x, gain, bias), vjp)


# ------------------------------------------------------------------- losses
def cross_entropy(logits, targets, weights=None):
    """Mean (or weighted mean) cross-entropy from logits over the last axis.

    ``targets`` are integer class ids with shape ``logits.shape[:-1]``;
    ``weights`` (same shape, nonnegative) masks padded positions.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    lp = log_softmax(logits)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    if weights is None:
        w = np.full(targets.shape, 1.0 / max(targets.size, 1), dtype=logits.dtype)
    else:
        w = np.asarray(weights, dtype=logits.dtype)
        total = w.sum()
        w = w / total if total > 0 else w
    return neg(sum_(mul(lp, onehot * w[..., None])))


def mse(pred, target, reduction="mean"):
    diff = sub(pred, np.asarray(target, dtype=pred.dtype))
    sq = mul(diff, diff)
    return mean(sq) if reduction == "mean" else sum_(sq)


# --------------------------------------------------------------- misc ops
def dropout(x, p, rng, training=True):
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, keep)


def lstm(x, weight, bias):
    """Single-layer LSTM over ``x`` (B, T, I); returns hidden states (B, T, H).

    ``weight`` is (I + H, 4H) acting on ``[x_t, h_{t-1}]``; gate order i, f, g, o.
    Zero initial state.
    """
    if x.ndim != 3 or weight.shape[0] != x.shape[2] + weight.shape[1] // 4:
        raise ShapeError(f"lstm: input {x.shape} incompatible with weight {weight.shape}")
    h, c, gates = kernels.lstm_forward(x.data, weight.data, bias.data)

    def vjp(g):
        return kernels.lstm_backward(g, x.data, weight.data, h, c, gates)

    return _make(h, (x, weight, bias), vjp)


# ---------------------------------------------------------------- optimiser
def uniform_init(rng, shape, fan_in, dtype=np.float64):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def clip_grad_norm(params, max_norm):
    """Scale grads in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                          for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(s)
    return total


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8 by default)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            upd = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype, copy=False)

    def state(self):
        """Flat name -> array mapping, for checkpoints."""
        out = {}
        for k in self.params:
            out[f"adam.m/{k}"] = self.m[k]
            out[f"adam.v/{k}"] = self.v[k]
        return out

    def load_state(self, arrays, t):
        for k in self.params:
            self.m[k] = arrays[f"adam.m/{k}"].astype(self.params[k].dtype)
            self.v[k] = arrays[f"adam.v/{k}"].astype(self.params[k].dtype)
        self.t = t
