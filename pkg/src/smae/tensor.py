"""A small dense tensor with reverse-mode automatic differentiation.

Every op that touches a tensor requiring gradients records a node carrying
its parents and a backward rule. Nodes get a monotonically increasing tape
id at creation, so visiting reachable nodes in decreasing id order is a
valid reverse topological order. ``backward`` consumes the graph: calling it
twice on the same loss without re-running the forward pass is an error.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K

log = logging.getLogger(__name__)

_tape_ids = itertools.count()
_grad_enabled = True

LN_EPS = 1e-5


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._id = next(_tape_ids)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, name: str | None = None, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# --------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, with numpy broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = np.broadcast_to(a.data, tuple(shape))
    return _make(out, (a,), lambda g: (_unbroadcast(g, src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of nothing")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    out = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + n)
        out.append(take_slice(a, tuple(sl)))
        start += n
    return out


def take_slice(a: Tensor, index: tuple) -> Tensor:
    """Basic (slice-only) indexing."""
    src_shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), bw)


def gather(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 1 per batch item: out[b, k] = a[b, idx[b, k]].

    ``a`` has shape (B, N, *rest) and ``idx`` has shape (B, K). Indices may
    repeat; their gradients accumulate.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim < 2 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ValueError(f"gather: incompatible shapes {a.shape} and index {idx.shape}")
    n = a.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for axis of length {n}")
    B, Kn = idx.shape
    rest = a.shape[2:]
    width = int(np.prod(rest)) if rest else 1
    flat_idx = (idx + n * np.arange(B)[:, None]).reshape(-1)
    src = a.data.reshape(B * n, width)
    out = src[flat_idx].reshape((B, Kn) + rest)
    dtype = a.dtype

    def bw(g):
        full = np.zeros((B * n, width), dtype=dtype)
        K.scatter_add_rows(full, flat_idx, np.ascontiguousarray(g.reshape(B * Kn, width)))
        return (full.reshape(a.shape),)

    return _make(out, (a,), bw)


# --------------------------------------------------------------------------
# nonlinearities and normalisation


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ValueError("softmax over an empty axis")
    shape = a.shape
    y = K.softmax_fwd(_rows(a.data))

    def bw(g):
        return (K.softmax_bwd(y, _rows(g)).reshape(shape),)

    return _make(y.reshape(shape), (a,), bw)


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply optional gain and bias.

    A zero-variance row normalises to zeros (the eps keeps it finite).
    """
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ValueError("layer_norm over an empty axis")
    shape = a.shape
    xhat, rstd = K.layernorm_fwd(_rows(a.data), eps)

    def bw(g):
        return (K.layernorm_bwd(_rows(g), xhat, rstd).reshape(shape),)

    out = _make(xhat.reshape(shape), (a,), bw)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    shape = a.shape
    x = _rows(a.data)

    def bw(g):
        return (K.gelu_bwd(x, _rows(g)).reshape(shape),)

    return _make(K.gelu_fwd(x).reshape(shape), (a,), bw)


# --------------------------------------------------------------------------
# reductions and losses


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return _make(np.asarray(a.data.sum(), dtype=dtype), (a,), lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / max(a.size, 1))


def masked_mse(pred: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over the rows selected by ``mask``.

    ``pred`` and ``target`` have shape (B, N, P); ``mask`` is a boolean
    (B, N) array (None selects everything). Rows outside the mask contribute
    neither to the value nor to the gradient, and their targets are never
    read.
    """
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if tgt.shape != pred.shape:
        raise ValueError(f"masked_mse: pred {pred.shape} vs target {tgt.shape}")
    if mask is None:
        mask = np.ones(pred.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:2]:
        raise ValueError(f"masked_mse: mask {mask.shape} vs rows {pred.shape[:2]}")
    count = int(mask.sum()) * int(np.prod(pred.shape[2:]))
    if count == 0:
        raise ValueError("masked_mse over an empty selection")
    diff = np.zeros_like(pred.data)
    diff[mask] = pred.data[mask] - tgt[mask]
    value = np.asarray((diff * diff).sum() / count, dtype=pred.dtype)
    coef = pred.dtype.type(2.0 / count)

    def bw(g):
        return (diff * (coef * g),)

    return _make(value, (pred,), bw)


# --------------------------------------------------------------------------
# backward pass


def _reachable(root: Tensor) -> list[Tensor]:
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward called twice on the same graph; re-run the forward pass")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    order = _reachable(loss)
    grads: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape, dtype=loss.dtype)}
    for node in order:
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = np.asarray(g, dtype=node.dtype)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
    loss._consumed = True


def _max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def _central_diff(x: np.ndarray, evaluate: Callable[[], float], h: float) -> np.ndarray:
    """Central differences of ``evaluate`` w.r.t. every element of ``x`` (perturbed in place)."""
    numeric = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    out = numeric.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = evaluate()
        flat[j] = orig - h
        fm = evaluate()
        flat[j] = orig
        out[j] = (fp - fm) / (2 * h)
    return numeric


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a list of tensors to a scalar tensor. The relative error of
    each element is |a - n| / max(1, |a|, |n|). Runs in float64.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True) for x in arrays]
    out = f(leaves)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)

    def evaluate():
        with no_grad():
            return f([Tensor(a) for a in arrays]).item()

    worst = 0.0
    for leaf, x in zip(leaves, arrays):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
        worst = max(worst, _max_rel_err(analytic, _central_diff(x, evaluate, h)))
    return worst


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Like :func:`grad_check` for tensors already wired into a model.

    ``loss_fn`` rebuilds the forward pass from the current parameter values.
    Parameters must be float64.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check_params needs float64 parameters")
        p.grad = None
    out = loss_fn()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def evaluate():
        with no_grad():
            return loss_fn().item()

    worst = 0.0
    for p, a in zip(params, analytic):
        worst = max(worst, _max_rel_err(a, _central_diff(p.data, evaluate, h)))
    return worst


# --------------------------------------------------------------------------
# optimiser


@dataclass
class SgdState:
    lr: float = 1e-4
    momentum: float = 0.9
    velocity: dict[int, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: SgdState) -> bool:
    """Heavy-ball momentum: v <- mu*v + g; p <- p - lr*v.

    Returns False (and leaves every parameter and velocity untouched) when
    any gradient is non-finite.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    if not all(g is None or np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient, SGD step skipped")
        return False
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        v = state.velocity.get(i)
        if v is None:
            v = np.zeros_like(p.data)
            state.velocity[i] = v
        v *= p.dtype.type(state.momentum)
        v += g
        p.data -= p.dtype.type(state.lr) * v
    return True


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, momentum: float = 0.9):
        self.params = list(params)
        self.state = SgdState(lr=lr, momentum=momentum)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        return sgd_step(self.params, [p.grad for p in self.params], self.state)
