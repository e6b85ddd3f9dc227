"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor produced by an op while gradients are enabled records its
parents, a backward closure, and a forward closure that recomputes its value
from its parents' values.  Nodes are numbered in construction order;
:func:`backward` walks the reachable subgraph in exact reverse order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class RankError(ValueError):
    pass


class GradCheckError(RuntimeError):
    def __init__(self, message: str, param_index: int):
        super().__init__(message)
        self.param_index = param_index


_node_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = (
        "data", "requires_grad", "grad", "node_id", "_parents", "_backward", "_forward", "name"
    )

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._forward: Callable | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.node_id = None
        t._parents = ()
        t._backward = None
        t._forward = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_rank(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

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
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _raise_rank(shape):
    raise RankError(f"expected a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _result(
    data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, forward_fn: Callable
) -> Tensor:
    out = Tensor._wrap(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._forward = forward_fn
        out.node_id = next(_node_ids)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _collect(loss: Tensor) -> dict[int, Tensor]:
    """Interior nodes reachable from ``loss`` through ``requires_grad`` edges."""
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.is_leaf or t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    return nodes


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients add to whatever is already stored, so repeated calls accumulate.
    """
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        _accumulate(loss, np.ones_like(loss.data))
        return

    nodes = _collect(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                _accumulate(parent, pg)
            elif parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.broadcast_to(g, leaf.shape)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
        np.add,
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
        np.subtract,
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
        np.multiply,
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)),
        np.divide,
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), np.negative)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), np.exp)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), np.log)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), np.sqrt)


def _relu(x):
    return np.where(x > 0, x, 0.0)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _result(_relu(a.data), (a,), lambda g: (g * (a.data > 0),), _relu)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data

    def bw(g):
        t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(_gelu(x), (a,), bw, _gelu)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), _sigmoid)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), np.abs)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(
        np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), lambda x: np.clip(x, lo, hi)
    )


# ----------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def tsum(a, axis=None, keepdims: bool = False, scale: float = 1.0) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)

    def fwd(x):
        out = x.sum(axis=axes, keepdims=keepdims)
        return out * scale if scale != 1.0 else out

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale if scale != 1.0 else g, a.shape),)

    return _result(fwd(a.data), (a,), bw, fwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims, scale=1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(
        a.data.reshape(shape),
        (a,),
        lambda g: (g.reshape(a.shape),),
        lambda x: x.reshape(shape),
    )


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(
        a.data.transpose(axes),
        (a,),
        lambda g: (g.transpose(inverse),),
        lambda x: x.transpose(axes),
    )


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise DimensionError(
                f"cannot concatenate shapes {[t.shape for t in ts]} along axis {axis}"
            )
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fwd(*xs):
        return np.concatenate(xs, axis=axis)

    return _result(
        fwd(*(t.data for t in ts)), ts, lambda g: tuple(np.split(g, splits, axis=axis)), fwd
    )


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), bw, lambda x: x[index])


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    return _result(
        np.broadcast_to(a.data, shape),
        (a,),
        lambda g: (unbroadcast(g, a.shape),),
        lambda x: np.broadcast_to(x, shape),
    )


# ----------------------------------------------------------------------------
# linear algebra and neural-net primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim >= 2 and a.shape[0] == b.shape[-2]:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        return linear(a, b, None)

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, np.matmul)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` with a 2-D weight, as a single node."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    k, p = w.shape
    out_shape = x.shape[:-1] + (p,)
    x2 = x.data.reshape(-1, k)

    def bw(g):
        g2 = g.reshape(-1, p)
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    if b is None:
        parents = (x, w)

        def fwd(xd, wd):
            return (xd.reshape(-1, k) @ wd).reshape(out_shape)

        data = (x2 @ w.data).reshape(out_shape)
    else:
        b = as_tensor(b)
        if b.shape != (p,):
            raise DimensionError(f"linear bias {b.shape} does not match output width {p}")
        parents = (x, w, b)

        def fwd(xd, wd, bd):
            return (xd.reshape(-1, k) @ wd + bd).reshape(out_shape)

        data = (x2 @ w.data + b.data).reshape(out_shape)
    return _result(data, parents, bw, fwd)


def _softmax(x, axis):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise RankError(f"softmax axis {axis} out of range for rank {x.ndim}")
    out = _softmax(x.data, axis)
    return _result(
        out,
        (x,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
        lambda xd: _softmax(xd, axis),
    )


def _layer_norm(x, gamma, beta, eps):
    d = x.shape[-1]
    xc = x - x.sum(axis=-1, keepdims=True) / d
    inv_std = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) / d + eps)
    xhat = xc * inv_std
    return xhat * gamma + beta, xhat, inv_std


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: last dim {d} vs gamma {gamma.shape}, beta {beta.shape}"
        )
    out, xhat, inv_std = _layer_norm(x.data, gamma.data, beta.data, eps)

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv_std * (
                gh
                - gh.sum(axis=-1, keepdims=True) / d
                - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d
            )
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _result(
        out, (x, gamma, beta), bw, lambda xd, gd, bd: _layer_norm(xd, gd, bd, eps)[0]
    )


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of padded NHWC input as ``[B*ho*wo, k*k*C]`` in (ki, kj, c) order."""
    b, c = xp.shape[0], xp.shape[3]
    cols = np.empty((b, ho, wo, k, k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b * ho * wo, k * k * c)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on NHWC input with an HWIO kernel (no bias)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2] or w.shape[0] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    k, cin, cout = w.shape[0], w.shape[2], w.shape[3]
    b, h, wd, _ = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {k}")
    pads = ((0, 0), (padding, padding), (padding, padding), (0, 0))

    def fwd(xd, wdata):
        cols = _im2col(np.pad(xd, pads), k, stride, ho, wo)
        return (cols @ wdata.reshape(k * k * cin, cout)).reshape(b, ho, wo, cout)

    xp = np.pad(x.data, pads)
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = w.data.reshape(k * k * cin, cout)
    out = (cols @ w2).reshape(b, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(b, ho, wo, k, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, i, j
                    ]
            gx = gxp[:, padding : padding + h, padding : padding + wd]
        return gx, gw

    return _result(out, (x, w), bw, fwd)


def _upsample(x, factor):
    return np.repeat(np.repeat(x, factor, axis=-3), factor, axis=-2)


def upsample_nearest(x, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the two spatial axes of ``[..., h, w, c]``."""
    x = as_tensor(x)
    *lead, h, w, c = x.shape

    def bw(g):
        return (g.reshape(*lead, h, factor, w, factor, c).sum(axis=(-4, -2)),)

    return _result(_upsample(x.data, factor), (x,), bw, lambda xd: _upsample(xd, factor))


# ----------------------------------------------------------------------------
# gradient checking


class _Replay:
    """Re-evaluates a recorded graph after a leaf changes, recomputing only its descendants.

    Each plan is a list of ``(forward, argument slots, output slot)``; slot 0
    holds the perturbed leaf and the other non-recomputed inputs are fixed.
    """

    def __init__(self, loss: Tensor, leaves: Sequence[Tensor]):
        self.loss = float(loss.data.reshape(-1)[0])
        nodes = [n for _, n in sorted(_collect(loss).items())]
        self.plans = []
        for leaf in leaves:
            slot_of = {id(leaf): 0}
            values: list = [leaf.data]
            steps = []
            for node in nodes:
                if not any(id(p) in slot_of for p in node._parents):
                    continue
                args = []
                for p in node._parents:
                    if id(p) not in slot_of:
                        slot_of[id(p)] = len(values)
                        values.append(p.data)
                    args.append(slot_of[id(p)])
                slot_of[id(node)] = len(values)
                values.append(None)
                steps.append((node._forward, tuple(args), slot_of[id(node)]))
            out = slot_of.get(id(loss))
            self.plans.append((values, steps, out))

    def __call__(self, index: int) -> float:
        values, steps, out = self.plans[index]
        if out is None:
            return self.loss
        vals = list(values)
        for fwd, args, dst in steps:
            vals[dst] = fwd(*[vals[i] for i in args])
        return float(vals[out].reshape(-1)[0])


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    replay: bool = True,
) -> float:
    """Largest ``|analytic - central| / max(1, |central|)`` over probed coordinates.

    ``f`` must be a deterministic closure over ``params``.  By default the
    perturbed losses are obtained by replaying the recorded forward graph
    downstream of the perturbed tensor; ``replay=False`` calls ``f`` afresh for
    every probe.  With ``max_coords`` set, only that many randomly chosen
    coordinates per tensor are probed.
    """
    zero_grad(params)
    loss = f()
    if loss.data.size != 1:
        raise RankError(f"grad_check needs a scalar function, got shape {loss.shape}")
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    zero_grad(params)

    if replay and loss.requires_grad:
        engine = _Replay(loss, params)

        def evaluate(pi: int) -> float:
            return engine(pi)

    else:

        def evaluate(pi: int) -> float:
            with no_grad():
                return f().item()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        grad_flat = analytic[pi].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate(pi)
            flat[i] = orig - step
            fm = evaluate(pi)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(
                    f"non-finite loss while probing parameter {pi} coordinate {i}", pi
                )
            numeric = (fp - fm) / (2 * step)
            worst = max(worst, abs(grad_flat[i] - numeric) / max(1.0, abs(numeric)))
    return worst
