"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation records a node holding its parents and a vector-Jacobian
product (VJP). VJPs are themselves written with the differentiable operations
of this module, so running :func:`backward` with ``create_graph=True`` records
the gradient computation on the graph and the returned gradients can be
differentiated again (double backprop, needed for the gradient penalty).

Nodes carry a monotonically increasing id; an operation's output is always
created after its inputs, so sorting reachable nodes by descending id gives a
valid reverse topological order (the tape order, replayed backwards).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _accel

__all__ = [
    "Tensor",
    "backward",
    "grad",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "square",
    "sqrt",
    "reciprocal",
    "leaky_relu",
    "relu",
    "elementwise",
    "sum",
    "mean",
    "l2_norm_per_batch",
    "reduce",
    "sum_to",
    "broadcast_to",
    "reshape",
    "transpose",
    "matmul",
    "conv2d",
    "upsample",
    "detach",
]

_ids = itertools.count()
_grad_enabled = True

# cap on the im2col buffer per chunk (float64 entries)
_COLS_BUDGET = 2000000


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def _grad_mode(flag: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = flag
    try:
        yield
    finally:
        _grad_enabled = prev


def no_grad():
    """Context manager: operations inside do not record graph nodes."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Node:
    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: tuple, vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """A float64 array, optionally attached to the computation graph.

    ``data`` must not be mutated once the tensor participates in a graph.
    """

    __slots__ = ("data", "requires_grad", "node", "id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __radd__(self, other):
        return add(_as_tensor(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), shape))


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), vjp)
    return out


def detach(t: Tensor) -> Tensor:
    return Tensor(t.data)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g, need: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g, need: (g, neg(g) if need[1] else None), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")

    def vjp(g, need):
        return (mul(g, b) if need[0] else None, mul(g, a) if need[1] else None)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g, need: (scale(g, c),), "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g, need: (g,), "add_scalar")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g, need: (mul(g, scale(a, 2.0)),), "square")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def vjp(g, need):
        return (mul(g, scale(reciprocal(out), 0.5)),)

    out = _make(out_data, (a,), vjp, "sqrt")
    return out


def reciprocal(a: Tensor) -> Tensor:
    def vjp(g, need):
        return (scale(mul(g, square(out)), -1.0),)

    out = _make(1.0 / a.data, (a,), vjp, "reciprocal")
    return out


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    # piecewise linear: the derivative mask is a constant of the graph
    mask = np.where(a.data > 0, 1.0, slope)
    m = Tensor(mask)
    return _make(a.data * mask, (a,), lambda g, need: (mul(g, m),), "leaky_relu")


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def elementwise(kind: str, a: Tensor, b: Tensor | None = None, *, slope: float = 0.2, factor: float = 1.0) -> Tensor:
    """Dispatch by name over the pointwise operations."""
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind == "relu":
        return relu(a)
    if kind == "square":
        return square(a)
    if kind == "scale":
        return scale(a, factor)
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return {"add": add, "sub": sub, "mul": mul}[kind](a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------


def _reduce_axes(src: tuple, dst: tuple) -> tuple[tuple, tuple]:
    lead = len(src) - len(dst)
    if lead < 0:
        raise ValueError(f"cannot reduce shape {src} to {dst}")
    axes = list(range(lead))
    for i, d in enumerate(dst):
        s = src[lead + i]
        if d == 1 and s != 1:
            axes.append(lead + i)
        elif d != s:
            raise ValueError(f"cannot reduce shape {src} to {dst}")
    return tuple(axes), dst


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    """Sum ``a`` down to a broadcast-compatible ``shape`` (inverse of broadcasting)."""
    shape = tuple(shape)
    in_shape = a.shape
    if in_shape == shape:
        return a
    axes, _ = _reduce_axes(in_shape, shape)
    data = a.data.sum(axis=axes).reshape(shape)
    return _make(data, (a,), lambda g, need: (broadcast_to(g, in_shape),), "sum_to")


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    in_shape = a.shape
    if in_shape == shape:
        return a
    data = np.broadcast_to(a.data, shape)
    return _make(data, (a,), lambda g, need: (sum_to(g, in_shape),), "broadcast_to")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    if a.size == 0:
        raise ValueError("sum of an empty tensor")
    return sum_to(a, ())


def mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ValueError("mean of an empty tensor")
    return scale(sum_to(a, ()), 1.0 / a.size)


def l2_norm_per_batch(a: Tensor) -> Tensor:
    """Euclidean norm of each batch element, reducing every axis but the first."""
    if a.size == 0:
        raise ValueError("l2_norm_per_batch of an empty tensor")
    if a.ndim < 2:
        raise ValueError("l2_norm_per_batch requires rank >= 2")
    keep = (a.shape[0],) + (1,) * (a.ndim - 1)
    return reshape(sqrt(sum_to(square(a), keep)), (a.shape[0],))


def reduce(kind: str, a: Tensor) -> Tensor:
    fn = {"sum": sum, "mean": mean, "l2_norm_per_batch": l2_norm_per_batch}.get(kind)
    if fn is None:
        raise ValueError(f"unknown reduction {kind!r}")
    return fn(a)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    in_shape = a.shape
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g, need: (reshape(g, in_shape),), "reshape")


def transpose(a: Tensor, axes: tuple | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g, need: (transpose(g, inv),), "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def vjp(g, need):
        return (
            matmul(g, transpose(b)) if need[0] else None,
            matmul(transpose(a), g) if need[1] else None,
        )

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------
#
# Three mutually adjoint primitives: the forward cross-correlation, its
# adjoint w.r.t. the input (transposed convolution) and its adjoint w.r.t. the
# kernel. Each one's VJP is expressed with the other two, so the set is closed
# under differentiation to any order.


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _chunks(b: int, per_item: int):
    step = max(1, _COLS_BUDGET // max(per_item, 1))
    for s in range(0, b, step):
        yield slice(s, min(b, s + step))


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_fwd(x: np.ndarray, k: np.ndarray, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    o, _, kh, kw = k.shape
    ho, wo = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    kmat = k.reshape(o, -1)
    xp = _pad(x, pad)
    out = np.empty((b, o, ho, wo))
    for sl in _chunks(b, ho * wo * c * kh * kw):
        nb = sl.stop - sl.start
        cols = _accel.im2col(xp[sl], kh, kw, stride, ho, wo)
        out[sl] = (kmat @ cols).reshape(o, nb, ho, wo).transpose(1, 0, 2, 3)
    return out


def _conv_bwd_input(g: np.ndarray, k: np.ndarray, x_shape: tuple, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = x_shape
    o, _, kh, kw = k.shape
    ho, wo = g.shape[2], g.shape[3]
    kmat_t = k.reshape(o, -1).T
    hp, wp = h + 2 * pad, w + 2 * pad
    out = np.empty(x_shape)
    for sl in _chunks(b, ho * wo * c * kh * kw):
        nb = sl.stop - sl.start
        gmat = g[sl].transpose(1, 0, 2, 3).reshape(o, nb * ho * wo)
        xp = _accel.col2im(kmat_t @ gmat, (nb, c, hp, wp), kh, kw, stride, ho, wo)
        out[sl] = xp[:, :, pad : pad + h, pad : pad + w]
    return out


def _conv_bwd_kernel(x: np.ndarray, g: np.ndarray, k_shape: tuple, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    o, _, kh, kw = k_shape
    ho, wo = g.shape[2], g.shape[3]
    xp = _pad(x, pad)
    acc = np.zeros((o, c * kh * kw))
    for sl in _chunks(b, ho * wo * c * kh * kw):
        nb = sl.stop - sl.start
        cols = _accel.im2col(xp[sl], kh, kw, stride, ho, wo)
        gmat = g[sl].transpose(1, 0, 2, 3).reshape(o, nb * ho * wo)
        acc += gmat @ cols.T
    return acc.reshape(k_shape)


def _conv(x: Tensor, k: Tensor, stride: int, pad: int) -> Tensor:
    def vjp(g, need):
        return (
            _conv_input_grad(g, k, x.shape, stride, pad) if need[0] else None,
            _conv_kernel_grad(x, g, k.shape, stride, pad) if need[1] else None,
        )

    return _make(_conv_fwd(x.data, k.data, stride, pad), (x, k), vjp, "conv2d")


def _conv_input_grad(g: Tensor, k: Tensor, x_shape: tuple, stride: int, pad: int) -> Tensor:
    def vjp(u, need):
        return (
            _conv(u, k, stride, pad) if need[0] else None,
            _conv_kernel_grad(u, g, k.shape, stride, pad) if need[1] else None,
        )

    data = _conv_bwd_input(g.data, k.data, x_shape, stride, pad)
    return _make(data, (g, k), vjp, "conv2d_input_grad")


def _conv_kernel_grad(x: Tensor, g: Tensor, k_shape: tuple, stride: int, pad: int) -> Tensor:
    def vjp(u, need):
        return (
            _conv_input_grad(g, u, x.shape, stride, pad) if need[0] else None,
            _conv(x, u, stride, pad) if need[1] else None,
        )

    data = _conv_bwd_kernel(x.data, g.data, k_shape, stride, pad)
    return _make(data, (x, g), vjp, "conv2d_kernel_grad")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[B,C,H,W]`` with ``kernel[O,C,kh,kw]`` plus ``bias[O]``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding non-negative")
    kh, kw = kernel.shape[2:]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape[2:]} (pad {padding})")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {kernel.shape[0]} outputs")
    y = _conv(x, kernel, stride, padding)
    if bias is not None:
        y = add(y, broadcast_to(reshape(bias, (1, kernel.shape[0], 1, 1)), y.shape))
    return y


# ---------------------------------------------------------------------------
# upsampling as separable linear resampling: y = A_h @ x @ A_w^T
# ---------------------------------------------------------------------------


def _interp_matrix(n: int, factor: int, mode: str) -> np.ndarray:
    m = n * factor
    a = np.zeros((m, n))
    if mode == "nearest":
        a[np.arange(m), np.arange(m) // factor] = 1.0
    elif mode == "bilinear":
        # align_corners=False: source coordinate (i + 0.5)/f - 0.5, clamped at the borders
        src = (np.arange(m) + 0.5) / factor - 0.5
        src = np.clip(src, 0.0, n - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        frac = src - lo
        np.add.at(a, (np.arange(m), lo), 1.0 - frac)
        np.add.at(a, (np.arange(m), hi), frac)
    else:
        raise ValueError(f"unknown upsample mode {mode!r}")
    return a


def _resample(x: Tensor, ah: np.ndarray, aw: np.ndarray) -> Tensor:
    data = np.matmul(np.matmul(ah, x.data), aw.T)
    return _make(data, (x,), lambda g, need: (_resample(g, ah.T, aw.T),), "resample")


def upsample(x: Tensor, factor: int, mode: str = "nearest") -> Tensor:
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if x.ndim != 4:
        raise ValueError(f"upsample expects [B,C,H,W], got {x.shape}")
    if factor == 1:
        return x
    ah = _interp_matrix(x.shape[2], factor, mode)
    aw = _interp_matrix(x.shape[3], factor, mode)
    return _resample(x, ah, aw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo(output: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if t.id in seen or not t.requires_grad:
            continue
        seen[t.id] = t
        if t.node is not None:
            stack.extend(t.node.parents)
    return sorted(seen.values(), key=lambda t: t.id, reverse=True)


def backward(
    output: Tensor,
    wrt: Iterable[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> dict[Tensor, Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the gradient computation is itself recorded, so the
    returned tensors can be passed to another :func:`backward`. A tensor that
    ``output`` does not depend on raises ``ValueError`` unless ``allow_unused``
    is set, in which case its gradient is zero.
    """
    wrt = list(wrt)
    if output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    order = _topo(output)
    reachable = {t.id for t in order}
    missing = [t for t in wrt if t.id not in reachable]
    if missing and not allow_unused:
        raise ValueError(f"{len(missing)} tensor(s) in wrt are not reachable from the output")

    keep = {t.id for t in wrt}
    # only propagate along paths that end in a requested tensor
    leads: set[int] = set()
    for t in reversed(order):
        if t.id in keep or (t.node is not None and any(p.id in leads for p in t.node.parents)):
            leads.add(t.id)
    grads: dict[int, Tensor] = {output.id: Tensor(np.ones(output.shape))}
    with _grad_mode(create_graph):
        for t in order:
            if t.node is None or t.id not in leads:
                continue
            g = grads.get(t.id) if t.id in keep else grads.pop(t.id, None)
            if g is None:
                continue
            parents = t.node.parents
            need = tuple(p.id in leads for p in parents)
            pgrads = t.node.vjp(g, need)
            for p, pg, nd in zip(parents, pgrads, need):
                if pg is None or not nd:
                    continue
                if pg.shape != p.shape:
                    pg = sum_to(pg, p.shape)
                prev = grads.get(p.id)
                grads[p.id] = pg if prev is None else add(prev, pg)
    result = {}
    for t in wrt:
        g = grads.get(t.id)
        result[t] = g if g is not None else Tensor(np.zeros(t.shape))
    return result


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False, allow_unused: bool = False) -> list[Tensor]:
    """List form of :func:`backward`, in the order of ``wrt``."""
    res = backward(output, wrt, create_graph=create_graph, allow_unused=allow_unused)
    return [res[t] for t in wrt]
