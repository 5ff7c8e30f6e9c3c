"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to one gradient per parent. ``Tensor.backward`` walks the
recorded graph in reverse topological order and accumulates into ``.grad``.

Training runs in float32; wrap model construction in ``precision(np.float64)``
(or call ``Module.astype``) for finite-difference gradient checks.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

_state = {"dtype": np.float32, "grad_enabled": True, "kinks": None}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dtype}")
    old = _state["dtype"]
    _state["dtype"] = dtype
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


@contextlib.contextmanager
def track_kinks():
    """Collect ``min |x|`` at every non-differentiable point (relu, abs) evaluated.

    Finite differences are only meaningful when no input sits within the step
    of a kink; gradient checks use this to verify that precondition.
    """
    old = _state["kinks"]
    seen: list[float] = []
    _state["kinks"] = seen
    try:
        yield seen
    finally:
        _state["kinks"] = old


def _note_kink(x: np.ndarray):
    if _state["kinks"] is not None and x.size:
        _state["kinks"].append(float(np.abs(x).min()))


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(default_dtype())
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is not None and parent.requires_grad:
                    _accumulate(parent, g)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _node(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# -- elementwise / broadcasting ops ---------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    data = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _node(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _node(data, (a,), lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tabs(a: Tensor) -> Tensor:
    _note_kink(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    _note_kink(a.data)
    positive = a.data > 0
    return _node(a.data * positive, (a,), lambda g: (g * positive,))


# -- reductions and shape ops ---------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(np.asarray(data), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _node(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _node(data, (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a: Tensor, index) -> Tensor:
    data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(data), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate {[t.shape for t in tensors]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(data, tensors, backward)


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    if not isinstance(b, Tensor):
        b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(data, (a, b), backward)


# -- neural-network primitives ---------------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (a,), backward)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply the affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    n = x.shape[-1]

    parents = [x]
    if weight is not None:
        parents.append(weight)
    if bias is not None:
        parents.append(bias)

    def backward(g):
        gxhat = g * weight.data if weight is not None else g
        gx = inv_std / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append(_unbroadcast(g * xhat, weight.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return grads

    return _node(out, parents, backward)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity when ``train`` is off or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return mul(x, Tensor(keep))


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 1-D convolution along time.

    x is ``[T, C_in]`` or ``[B, T, C_in]``; kernel is ``[k, C_in, C_out]`` with odd k.
    Positions outside the sequence are treated as zeros.
    """
    k, c_in, c_out = kernel.shape
    if k % 2 == 0:
        raise ParameterError(f"conv1d needs an odd kernel size, got {k}")
    if x.shape[-1] != c_in:
        raise DimensionError(f"conv1d expects {c_in} input channels, got {x.shape[-1]}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    batch, steps, _ = xd.shape
    half = k // 2
    padded = np.pad(xd, ((0, 0), (half, half), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=1)  # B,T,C,k
    cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(batch, steps, k * c_in)
    w2 = kernel.data.reshape(k * c_in, c_out)
    out = cols @ w2
    if bias is not None:
        out = out + bias.data
    if squeeze:
        out = out[0]

    parents = [x, kernel] + ([bias] if bias is not None else [])

    def backward(g):
        g3 = g[None] if squeeze else g
        gx = gk = None
        if x.requires_grad:
            gcols = (g3 @ w2.T).reshape(batch, steps, k, c_in)
            gpad = np.zeros_like(padded)
            for j in range(k):
                gpad[:, j:j + steps] += gcols[:, :, j]
            gx = gpad[:, half:half + steps]
            if squeeze:
                gx = gx[0]
        if kernel.requires_grad:
            gk = np.einsum("btk,bto->ko", cols, g3).reshape(kernel.shape)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 1)))
        return grads

    return _node(out, parents, backward)


def embedding(ids: np.ndarray, weight: Tensor) -> Tensor:
    """Row lookup ``weight[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids)
    data = weight.data[ids]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _node(data, (weight,), backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows along the sequence axis.

    x is ``[N, C]`` with index ``[T]`` or ``[B, N, C]`` with index ``[B, T]``.
    Rows may repeat; their gradients accumulate.
    """
    index = np.asarray(index, dtype=np.int64)
    if x.ndim == 2:
        data = x.data[index]

        def backward(g):
            full = np.zeros_like(x.data)
            np.add.at(full, index, g)
            return (full,)
    else:
        rows = np.arange(x.shape[0])[:, None]
        data = x.data[rows, index]

        def backward(g):
            full = np.zeros_like(x.data)
            np.add.at(full, (rows, index), g)
            return (full,)

    return _node(data, (x,), backward)


# -- gradient checking ------------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5,
                   indices: Iterable[tuple] | None = None) -> tuple[np.ndarray, list[tuple]]:
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``param``.

    Returns the derivative at each probed index (all entries by default).
    """
    if indices is None:
        indices = list(np.ndindex(param.shape))
    else:
        indices = list(indices)
    out = np.empty(len(indices), dtype=np.float64)
    with no_grad():
        for n, idx in enumerate(indices):
            orig = param.data[idx].copy()
            param.data[idx] = orig + eps
            hi = float(fn().data)
            param.data[idx] = orig - eps
            lo = float(fn().data)
            param.data[idx] = orig
            out[n] = (hi - lo) / (2 * eps)
    return out, indices


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """``||a - n|| / max(||a||, ||n||)`` with a tiny denominator floor."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
              max_entries: int | None = None, rng: np.random.Generator | None = None) -> dict:
    """Compare backprop gradients of ``fn()`` with central differences.

    Returns ``{param_index: relative_error}``. When ``max_entries`` is set,
    only that many randomly chosen entries per parameter are probed.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    fn().backward()
    errors = {}
    for n, p in enumerate(params):
        analytic_full = p.grad if p.grad is not None else np.zeros_like(p.data)
        indices = None
        if max_entries is not None and p.data.size > max_entries:
            flat = rng.choice(p.data.size, size=max_entries, replace=False)
            indices = [np.unravel_index(i, p.shape) for i in sorted(flat)]
        numeric, probed = numerical_grad(fn, p, eps, indices)
        analytic = np.array([analytic_full[idx] for idx in probed])
        errors[n] = relative_error(analytic, numeric)
    return errors
