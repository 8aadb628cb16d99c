"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
output remembers its parents and a backward rule; :func:`backward` walks that
graph in reverse topological order, accumulates ``.grad`` on leaf tensors and
then releases the graph.

Binary elementwise ops broadcast only over the leading (batch) extent: the
operands must have equal shapes, or one must be a scalar, or one must match
the other's shape with the leading axis dropped.
"""

import contextlib
import math

import numpy as np

from . import kernels

LOG_GUARD = 1e-12

_debug = False
_grad_enabled = True


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_debug(flag):
    """Toggle finiteness assertions after every op."""
    global _debug
    _debug = bool(flag)


def debug_enabled():
    return _debug


@contextlib.contextmanager
def debug_mode(flag=True):
    prev = _debug
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(prev)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; outputs never require grad."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = None
        self.name = name

    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = np.asarray(data)
        out.grad = None
        out.name = None
        out._op = op
        if _debug and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite output from op {op!r}")
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.sum(grad)
    # operand was missing the leading batch axis
    return np.sum(grad, axis=0)


def _check_broadcast(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if sa[1:] == sb or sb[1:] == sa:
        return
    raise DimensionError(f"{op}: cannot broadcast shapes {sa} and {sb}")


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(out, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(out, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(out, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(out, (a, b), backward, "div")


def negate(a):
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "negate")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a, guard=False):
    """Natural log. ``guard=True`` evaluates ``log(max(a, 1e-12))``.

    The guard is for likelihood terms only; unguarded log of a non-positive
    value raises :class:`DomainError`.
    """
    a = as_tensor(a)
    if guard:
        x = np.maximum(a.data, LOG_GUARD)
        live = a.data >= LOG_GUARD

        def backward(g):
            return (np.where(live, g / x, 0.0),)

        return Tensor._result(np.log(x), (a,), backward, "log")
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive input")
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0
    out = np.where(mask, a.data, 0.0)
    return Tensor._result(out, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # split evaluation avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def square(a):
    a = as_tensor(a)
    return Tensor._result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


_UNARY = {"exp": exp, "log": log, "relu": relu, "sigmoid": sigmoid, "square": square, "negate": negate}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind, a, b=None):
    if op_kind in _BINARY:
        if b is None:
            raise ContractError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ----------------------------------------------------------------------------
# reductions and shape ops
# ----------------------------------------------------------------------------


def _norm_axes(axes, ndim, op):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"{op}: axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce_sum(a, axes=None):
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim, "sum")
    if not axes:
        return a
    out = np.sum(a.data, axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), backward, "sum")


def reduce_mean(a, axes=None):
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim, "mean")
    if not axes:
        return a
    count = math.prod(a.shape[ax] for ax in axes)
    out = np.sum(a.data, axis=axes) / count

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), backward, "mean")


def reduce(op_kind, a, axes=None):
    if op_kind == "sum":
        return reduce_sum(a, axes)
    if op_kind == "mean":
        return reduce_mean(a, axes)
    raise ValueError(f"unknown reduction {op_kind!r}")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from exc
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out, tuple(tensors), backward, "concat")


def rows(a, index):
    """Gather rows ``a[index]`` along the leading axis."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(out, (a,), backward, "rows")


def segment_mean(a, counts):
    """Mean over consecutive row segments of lengths ``counts``.

    ``a`` is ``[sum(counts), ...]``; the result is ``[len(counts), ...]``.
    """
    a = as_tensor(a)
    counts = np.asarray(counts, dtype=np.intp)
    if counts.ndim != 1 or np.any(counts < 1) or counts.sum() != a.shape[0]:
        raise DimensionError(f"segment_mean: counts {counts.tolist()} do not tile {a.shape[0]} rows")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    scale = counts.astype(np.float64).reshape((-1,) + (1,) * (a.ndim - 1))
    out = np.add.reduceat(a.data, starts, axis=0) / scale

    def backward(g):
        return (np.repeat(g / scale, counts, axis=0),)

    return Tensor._result(out, (a,), backward, "segment_mean")


def stop_gradient(a):
    """Forward identity that contributes no gradient to ``a``."""
    a = as_tensor(a)
    return Tensor(a.data.copy())


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(out, (a, b), backward, "matmul")


def log_softmax(a):
    """Row-wise log-softmax over the last axis."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * np.sum(g, axis=-1, keepdims=True),)

    return Tensor._result(out, (a,), backward, "log_softmax")


def softmax(a):
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return Tensor._result(out, (a,), backward, "softmax")


# ----------------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------------


def conv_output_size(size, stride):
    return -(-size // stride)


def _conv_geometry(kernel, stride):
    k = kernel.shape[-1]
    if kernel.ndim != 4 or kernel.shape[-2] != k or k % 2 == 0:
        raise DimensionError(f"kernel must be [F, C, k, k] with odd k, got {kernel.shape}")
    if stride not in (1, 2):
        raise DimensionError(f"stride must be 1 or 2, got {stride}")
    return k, (k - 1) // 2


def conv2d(x, kernel, bias=None, stride=1):
    """Cross-correlation with symmetric zero padding ``(k - 1) // 2``.

    Output spatial extent is ``ceil(H / stride)``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    k, pad = _conv_geometry(kernel, stride)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be [B, C, H, W], got {x.shape}")
    B, C, H, W = x.shape
    F = kernel.shape[0]
    if kernel.shape[1] != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel {kernel.shape} expects {kernel.shape[1]}")
    oh, ow = conv_output_size(H, stride), conv_output_size(W, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = kernels.im2col(xp, k, stride, oh, ow)
    wmat = kernel.data.reshape(F, -1)
    out = (cols @ wmat.T).reshape(B, oh, ow, F).transpose(0, 3, 1, 2)
    parents = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (F,):
            raise DimensionError(f"conv2d bias must be ({F},), got {bias.shape}")
        out = out + bias.data.reshape(1, F, 1, 1)
        parents = parents + (bias,)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gw = (g2.T @ cols).reshape(kernel.shape)
        gx = kernels.col2im(np.ascontiguousarray(g2 @ wmat), xp.shape, k, stride, oh, ow)
        gx = gx[:, :, pad : pad + H, pad : pad + W]
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return Tensor._result(out, parents, backward, "conv2d")


def conv2d_transpose(y, kernel, bias=None, stride=1, output_size=None):
    """Adjoint of :func:`conv2d` with the same kernel and geometry.

    ``kernel`` is ``[F, C, k, k]`` as for the forward convolution, so this maps
    ``F`` channels to ``C``. ``output_size`` picks between the spatial sizes
    that share ``ceil(size / stride)``; default ``stride * H``.
    """
    y, kernel = as_tensor(y), as_tensor(kernel)
    k, pad = _conv_geometry(kernel, stride)
    if y.ndim != 4:
        raise DimensionError(f"conv2d_transpose input must be [B, F, h, w], got {y.shape}")
    B, F, oh, ow = y.shape
    if kernel.shape[0] != F:
        raise DimensionError(f"conv2d_transpose: input has {F} channels, kernel {kernel.shape} expects {kernel.shape[0]}")
    C = kernel.shape[1]
    if output_size is None:
        H, W = oh * stride, ow * stride
    else:
        H, W = (output_size, output_size) if isinstance(output_size, int) else tuple(output_size)
    if conv_output_size(H, stride) != oh or conv_output_size(W, stride) != ow:
        raise DimensionError(f"output size {(H, W)} incompatible with input {(oh, ow)} at stride {stride}")
    padded = (B, C, H + 2 * pad, W + 2 * pad)
    wmat = kernel.data.reshape(F, -1)
    y2 = np.ascontiguousarray(y.data.transpose(0, 2, 3, 1)).reshape(-1, F)
    full = kernels.col2im(np.ascontiguousarray(y2 @ wmat), padded, k, stride, oh, ow)
    out = full[:, :, pad : pad + H, pad : pad + W]
    parents = (y, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (C,):
            raise DimensionError(f"conv2d_transpose bias must be ({C},), got {bias.shape}")
        out = out + bias.data.reshape(1, C, 1, 1)
        parents = parents + (bias,)
    out = np.ascontiguousarray(out)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = kernels.im2col(gp, k, stride, oh, ow)
        gy = (cols @ wmat.T).reshape(B, oh, ow, F).transpose(0, 3, 1, 2)
        gw = (y2.T @ cols).reshape(kernel.shape)
        grads = (np.ascontiguousarray(gy), gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return Tensor._result(out, parents, backward, "conv2d_transpose")


# ----------------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------------


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Backpropagate from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` get their gradient added to ``.grad``.
    Returns ``{leaf: grad}`` for the leaves reached. The graph is released
    afterwards, so a second call on the same loss raises.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if loss._backward is None and loss._parents == () and loss._op is not None:
        raise ContractError("graph already released")
    order = _topo_order(loss)
    grads = {id(loss): np.ones((), dtype=np.float64)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=np.float64)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp
    for node in order:
        if node._parents:
            node._parents = ()
            node._backward = None
    return leaves
