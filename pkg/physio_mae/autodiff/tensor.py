import logging

import numpy as np

from ..errors import InternalError

log = logging.getLogger(__name__)


def _as_float_array(data, dtype=None):
    array = np.asarray(data, dtype=dtype)
    if not np.issubdtype(array.dtype, np.floating):
        array = array.astype(np.float64)
    return array


class Tensor(object):
    """Dense row-major array recorded as a node of the computation graph.

    ``backward_fn`` maps the gradient of this node to one gradient (or
    ``None``) per parent. Leaves have no parents and keep their gradient
    in ``grad`` across backward passes until ``zero_grad`` is called.
    """

    __slots__ = (
        "data",
        "grad",
        "requires_grad",
        "parents",
        "backward_fn",
        "op",
        "name",
    )

    def __init__(
        self,
        data,
        requires_grad=False,
        parents=(),
        backward_fn=None,
        op="leaf",
        name=None,
        dtype=None,
    ):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self.parents
        )

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self.parents

    def item(self):
        if self.size != 1:
            raise InternalError(
                f"item() needs a single element, got {self.shape}"
            )
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, grad):
        if grad.shape != self.data.shape:
            raise InternalError(
                f"Gradient shape {grad.shape} does not match "
                f"value shape {self.data.shape} for {self.name or self.op}"
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, grad=None):
        """Runs the reverse pass from this node and returns the record."""
        record = ComputationRecord.trace(self)
        record.backward(self, grad)
        return record

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    def __len__(self):
        return self.shape[0]

    # Arithmetic delegates to ``ops``, which imports this module, so the
    # import happens at call time.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops

        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops

        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.slice(self, index)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False, dtype=dtype)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class ComputationRecord(object):
    """Executed primitives in topological order (inputs before outputs)."""

    def __init__(self, nodes):
        self.nodes = list(nodes)

    @classmethod
    def trace(cls, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @property
    def operations(self):
        return [node.op for node in self.nodes if not node.is_leaf]

    def backward(self, root, grad=None):
        if not root.requires_grad:
            raise InternalError("backward() called on a constant tensor")
        if grad is None:
            if root.size != 1:
                raise InternalError(
                    "Implicit gradient needs a scalar output, got "
                    f"{root.shape}"
                )
            grad = np.ones_like(root.data)
        grads = {id(root): np.asarray(grad, dtype=root.data.dtype)}
        visits = 0
        for node in reversed(self.nodes):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            visits += 1
            if node.is_leaf:
                node.accumulate_grad(node_grad)
                continue
            parent_grads = node.backward_fn(node_grad)
            for parent, parent_grad in zip(node.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad
        log.debug("Backward visited %d of %d nodes", visits, len(self))
        return visits
