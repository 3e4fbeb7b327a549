"""Dense tensors with reverse-mode automatic differentiation.

Every primitive computes its forward value with numpy and, when any input
requires a gradient, records a node holding the inputs and a closure that maps
the output gradient to input gradients.  :func:`backward` walks the recorded
nodes in reverse topological order and sums gradient contributions, so tensors
used more than once receive the total of all paths.

Broadcasting is restricted on purpose: elementwise ops accept operands of
identical shape, or operands where one shape is a trailing suffix of the other
(leading-axis expansion).  Anything else needs an explicit :func:`reshape` or
:func:`broadcast_to`.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor", "Graph", "ShapeError", "no_grad", "is_grad_enabled", "tensor",
    "apply_primitive", "backward", "grad_check",
    "add", "sub", "mul", "div", "neg", "matmul", "broadcast_to", "reshape",
    "transpose", "softmax", "layer_norm", "gelu", "sigmoid", "tanh", "exp",
    "gather", "sum", "mean", "scalar_mul", "square", "gru_cell", "mse",
]

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes violate a primitive's shape rule."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=np.float64, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out: np.ndarray, op: str, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    t = Tensor(out)
    if _grad_enabled and any(p.requires_grad for p in inputs):
        t.requires_grad = True
        t.op = op
        t.parents = tuple(inputs)
        t._backward = grad_fn
    return t


# ---------------------------------------------------------------------------
# shape helpers

def _suffix_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: shapes {a} and {b} differ beyond leading-axis expansion")


def _unexpand(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over leading axes that were expanded from ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead)))
    return g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} invalid for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# primitives

def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _suffix_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unexpand(g, sa), _unexpand(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _suffix_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unexpand(g, sa), -_unexpand(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _suffix_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unexpand(g * bd, ad.shape), _unexpand(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _suffix_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def grad_fn(g):
        return _unexpand(g / bd, ad.shape), _unexpand(-g * out / bd, bd.shape)

    return _make(out, "div", (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, "scalar_mul", (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, "square", (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: ``0.5 x (1 + tanh(c (x + 0.044715 x^3)))``."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, "gelu", (a,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product.

    ``b`` may be 2-D (shared across all leading axes of ``a``); otherwise the
    leading axes of both operands must match exactly.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading axes differ for {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    shared = bd.ndim == 2
    if shared:
        # one GEMM over the flattened leading axes instead of a loop per batch entry
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out = ad @ bd

    def grad_fn(g):
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, "matmul", (a, b), grad_fn)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    src = a.shape
    return _make(out, "broadcast", (a,), lambda g: (_unbroadcast(g, src),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    src = a.shape
    return _make(out, "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    axes = tuple(_check_axis(ax, a.ndim, "transpose") for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, a.ndim, "softmax")
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), grad_fn)


def layer_norm(a: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    x = a.data
    d = x.shape[-1]
    for p, nm in ((gamma, "gamma"), (beta, "beta")):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: {nm} shape {p.shape} != ({d},)")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + beta.data
    inputs = [a] + [p for p in (gamma, beta) if p is not None]

    def grad_fn(g):
        gx = g * gd if gd is not None else g
        gxhat_mean = gx.mean(axis=-1, keepdims=True)
        proj = (gx * xhat).mean(axis=-1, keepdims=True)
        grads = [inv * (gx - gxhat_mean - xhat * proj)]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return tuple(grads)

    return _make(out, "layer_norm", inputs, grad_fn)


def gather(a: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """``np.take_along_axis`` with broadcasting of ``index`` against ``a``."""
    axis = _check_axis(axis, a.ndim, "gather")
    index = np.asarray(index)
    if index.ndim != a.ndim:
        raise ShapeError(f"gather: index rank {index.ndim} != input rank {a.ndim}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[axis]):
        raise ShapeError(f"gather: index out of range for axis {axis} of size {a.shape[axis]}")
    out = np.take_along_axis(a.data, index, axis=axis)
    src_shape, dtype = a.shape, a.dtype

    def grad_fn(g):
        idx: list = []
        for d, (s, n) in enumerate(zip(src_shape, g.shape)):
            shape = [1] * g.ndim
            shape[d] = n
            # size-1 source axes were broadcast against the index
            idx.append((np.arange(n) if s == n else np.zeros(n, dtype=np.intp)).reshape(shape))
        idx[axis] = np.broadcast_to(index, g.shape)
        flat = np.ravel_multi_index(tuple(np.broadcast_arrays(*idx)), src_shape)
        ga = np.bincount(flat.ravel(), weights=g.ravel(), minlength=int(np.prod(src_shape)))
        return (ga.reshape(src_shape).astype(dtype, copy=False),)

    return _make(out, "gather", (a,), grad_fn)


def sum(a: Tensor, axis: int | tuple | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _make(np.asarray(out), "sum", (a,), grad_fn)


def mean(a: Tensor, axis: int | tuple | None = None, keepdims: bool = False) -> Tensor:
    src = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([src[ax] for ax in axes]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src),)

    return _make(np.asarray(out), "mean", (a,), grad_fn)


def gru_cell(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU step with gate order (reset, update, candidate).

    ``w_ih`` is (input, 3*hidden) and ``w_hh`` is (hidden, 3*hidden)::

        r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
        z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
        n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
        h' = (1 - z) * n + z * h
    """
    xd, hd = x.data, h.data
    hid = hd.shape[-1]
    if w_ih.shape != (xd.shape[-1], 3 * hid) or w_hh.shape != (hid, 3 * hid):
        raise ShapeError(f"gru_cell: weights {w_ih.shape}, {w_hh.shape} do not fit "
                         f"input {xd.shape} and hidden {hd.shape}")
    if b_ih.shape != (3 * hid,) or b_hh.shape != (3 * hid,):
        raise ShapeError(f"gru_cell: biases {b_ih.shape}, {b_hh.shape} != ({3 * hid},)")
    if xd.shape[:-1] != hd.shape[:-1]:
        raise ShapeError(f"gru_cell: input {xd.shape} and hidden {hd.shape} disagree on leading axes")
    gi = xd @ w_ih.data + b_ih.data
    gh = hd @ w_hh.data + b_hh.data
    r = special.expit(gi[..., :hid] + gh[..., :hid])
    z = special.expit(gi[..., hid:2 * hid] + gh[..., hid:2 * hid])
    hn = gh[..., 2 * hid:]
    n = np.tanh(gi[..., 2 * hid:] + r * hn)
    out = (1.0 - z) * n + z * hd

    def grad_fn(g):
        dn = g * (1.0 - z)
        dz = g * (hd - n)
        dh = g * z
        dn_pre = dn * (1.0 - n * n)
        dr = dn_pre * hn
        dr_pre = dr * r * (1.0 - r)
        dz_pre = dz * z * (1.0 - z)
        dgi = np.concatenate([dr_pre, dz_pre, dn_pre], axis=-1)
        dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=-1)
        dx = dgi @ w_ih.data.T
        dh = dh + dgh @ w_hh.data.T
        flat_x = xd.reshape(-1, xd.shape[-1])
        flat_h = hd.reshape(-1, hid)
        dgi2 = dgi.reshape(-1, 3 * hid)
        dgh2 = dgh.reshape(-1, 3 * hid)
        return dx, dh, flat_x.T @ dgi2, flat_h.T @ dgh2, dgi2.sum(axis=0), dgh2.sum(axis=0)

    return _make(out, "gru_cell", (x, h, w_ih, w_hh, b_ih, b_hh), grad_fn)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over every entry."""
    target = _as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    return mean(square(sub(pred, target)))


_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "matmul": matmul,
    "broadcast": broadcast_to, "reshape": reshape, "transpose": transpose,
    "softmax": softmax, "layer_norm": layer_norm, "gelu": gelu, "sigmoid": sigmoid,
    "tanh": tanh, "exp": exp, "gather": gather, "sum": sum, "mean": mean,
    "scalar_mul": scalar_mul, "square": square, "gru_cell": gru_cell,
}


def apply_primitive(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply primitive ``op`` by name, e.g. ``apply_primitive("softmax", [x], axis=0)``."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# graph + backward

class Graph:
    """Topologically ordered view of the nodes that produced ``output``."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> Graph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and p.id not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Populate ``.grad`` of every grad-requiring tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg


def grad_check(f: Callable[[], Tensor], points: Tensor | Iterable[Tensor], eps: float = 1e-5,
               coords: int | None = None, rng: np.random.Generator | None = None,
               fd_dtype=None) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``f`` rebuilds the scalar graph from the current values of ``points``.
    The error per coordinate is ``|a - n| / (|a| + |n| + 1e-12)``.  With
    ``coords`` set, only that many randomly chosen coordinates are probed.

    ``fd_dtype`` (e.g. ``np.longdouble``) evaluates the finite differences at a
    wider precision than the analytic pass.  In float64 the difference quotient
    carries roughly ``ulp(f) / eps`` of round-off, which swamps coordinates whose
    true gradient is below about 1e-5.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    pts = [points] if isinstance(points, Tensor) else list(points)
    for p in pts:
        p.requires_grad = True
        p.grad = None
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("grad_check: non-finite value at the base point")
    backward(out)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in pts]

    probes = [(i, j) for i, p in enumerate(pts) for j in range(p.data.size)]
    if coords is not None and coords < len(probes):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(probes), size=coords, replace=False)
        probes = [probes[k] for k in sorted(pick)]

    saved = [p.data for p in pts]
    if fd_dtype is not None:
        for p in pts:
            p.data = p.data.astype(fd_dtype)
    try:
        worst = _fd_sweep(f, pts, analytic, probes, eps)
    finally:
        for p, d in zip(pts, saved):
            p.data = d
    return worst


def _fd_sweep(f, pts, analytic, probes, eps) -> float:
    worst = 0.0
    with no_grad():
        for i, j in probes:
            flat = pts[i].data.reshape(-1)
            orig = flat[j]
            hi, lo = orig + eps, orig - eps
            flat[j] = hi
            fp = f().data
            flat[j] = lo
            fm = f().data
            flat[j] = orig
            # divide by the step actually taken, not the nominal 2 * eps
            num = float((fp - fm) / (hi - lo))
            ana = float(analytic[i].reshape(-1)[j])
            if not (np.isfinite(num) and np.isfinite(ana)):
                raise FloatingPointError(f"grad_check: non-finite value at tensor {i}, coordinate {j}")
            err = abs(ana - num) / (abs(ana) + abs(num) + 1e-12)
            worst = max(worst, err)
    return worst
