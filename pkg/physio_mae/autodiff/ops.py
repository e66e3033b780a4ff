"""Differentiable primitives over :class:`Tensor`.

Every function accepts tensors or array-likes and returns a new tensor whose
``backward_fn`` yields one gradient per input. Broadcasting follows numpy;
gradients are summed back to the input shape.
"""
import builtins

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor, as_tensor

GELU_COEFF = np.sqrt(2.0 / np.pi)
LAYER_NORM_EPS = 1e-5


def unbroadcast(grad, shape):
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _result(data, parents, backward_fn, op):
    requires_grad = any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, op=op)
    return Tensor(data, parents=parents, backward_fn=backward_fn, op=op)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(grad):
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def embedding_add(tokens, table):
    """Adds a position-indexed ``J x d`` table to ``(..., J, d)`` tokens."""
    tokens, table = as_tensor(tokens), as_tensor(table)
    if tokens.shape[-2:] != table.shape[-2:]:
        raise DimensionError(
            f"Embedding table {table.shape} does not match tokens "
            f"{tokens.shape}"
        )
    return add(tokens, table)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(grad):
        return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda grad: (-grad,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(grad):
        return (
            unbroadcast(grad * b.data, a.shape),
            unbroadcast(grad * a.data, b.shape),
        )

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(grad):
        return (
            unbroadcast(grad / b.data, a.shape),
            unbroadcast(-grad * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), backward, "div")


def square(a):
    return mul(a, a)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape} @ {b.shape}"
        )

    def backward(grad):
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(grad):
        return (np.transpose(grad, inverse),)

    return _result(np.transpose(a.data, axes), (a,), backward, "transpose")


def swapaxes(a, axis1, axis2):
    axes = list(range(as_tensor(a).ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, tuple(axes))


def reshape(a, shape):
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"Cannot reshape {a.shape} into {shape}")

    def backward(grad):
        return (grad.reshape(a.shape),)

    return _result(data, (a,), backward, "reshape")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"Cannot concatenate shapes {shapes}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(grad):
        return tuple(np.split(grad, sizes, axis=axis))

    return _result(data, tuple(tensors), backward, "concat")


def slice(a, index):
    a = as_tensor(a)
    data = a.data[index]

    def backward(grad):
        full = np.zeros_like(a.data)
        np.add.at(full, index, grad)
        return (full,)

    return _result(np.array(data, copy=True), (a,), backward, "slice")


def take_rows(a, index):
    """Selects rows ``index[b, k]`` of ``a[b]`` for a ``(B, T, D)`` tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 3 or index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise DimensionError(
            f"take_rows expects (B, T, D) and (B, K); got {a.shape} and "
            f"{index.shape}"
        )
    batch = np.arange(a.shape[0])[:, None]

    def backward(grad):
        full = np.zeros_like(a.data)
        np.add.at(full, (batch, index), grad)
        return (full,)

    return _result(a.data[batch, index], (a,), backward, "take_rows")


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, a.shape).copy(),)

    data = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(data), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    total = sum(a, axis=axis, keepdims=keepdims)
    return mul(total, 1.0 / builtins.max(count, 1))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda grad: (grad * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda grad: (grad / a.data,), "log")


def sqrt(a):
    """Square root; the gradient at zero is taken as zero."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(grad):
        local = np.zeros_like(out)
        np.divide(0.5, out, out=local, where=out > 0)
        return (grad * local,)

    return _result(out, (a,), backward, "sqrt")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(
        out, (a,), lambda grad: (grad * (1.0 - out * out),), "tanh"
    )


def gelu(a):
    """GELU with the tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = GELU_COEFF * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(grad):
        d_inner = GELU_COEFF * (1.0 + 3 * 0.044715 * x ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (grad * local,)

    return _result(out, (a,), backward, "gelu")


def softplus(a):
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)

    def backward(grad):
        return (grad * (0.5 * (1.0 + np.tanh(0.5 * x))),)

    return _result(out, (a,), backward, "softplus")


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(grad):
        inner = np.sum(grad * out, axis=axis, keepdims=True)
        return (out * (grad - inner),)

    return _result(out, (a,), backward, "softmax")


def layer_norm(a, gain, bias, eps=LAYER_NORM_EPS):
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    width = a.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"layer_norm gain {gain.shape} / bias {bias.shape} do not match "
            f"last axis of {a.shape}"
        )
    centered = a.data - a.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def backward(grad):
        g_normed = grad * gain.data
        grad_a = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(a.ndim - 1))
        return (
            grad_a,
            np.sum(grad * normed, axis=lead),
            np.sum(grad, axis=lead),
        )

    out = normed * gain.data + bias.data
    return _result(out, (a, gain, bias), backward, "layer_norm")
