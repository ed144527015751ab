# -*- coding: utf-8 -*-
"""
Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` over raw arrays and a ``backward`` mapping the output gradient to
one gradient per input. :func:`custom_backward_op` builds a node whose backward
rule is supplied by the caller, which is how straight-through discretization is
expressed.
"""
import logging
import struct
from contextlib import contextmanager

import numpy as np
from exceptions import (
    CheckpointError,
    InvalidArgumentError,
    NumericInputError,
    ShapeError,
)

logger = logging.getLogger("chainflow")

DTYPE = np.float64
CHECKPOINT_MAGIC = b"CHAINCKPT1"


class _GradMode:
    enabled = True


@contextmanager
def no_grad():
    """
    Run the enclosed block without recording graph nodes.
    """
    previous = _GradMode.enabled
    _GradMode.enabled = False
    try:
        yield
    finally:
        _GradMode.enabled = previous


class Tensor:
    """
    A dense array that participates in a reverse-mode differentiation graph.

    Leaves are tensors without a creator. Only leaves with ``requires_grad``
    keep a ``grad`` after :func:`backward`; gradients accumulate across calls
    until :meth:`zero_grad`.
    """

    def __init__(self, data, requires_grad=False, name=None, creator=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.creator = creator
        self.name = name

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
    def is_leaf(self):
        return self.creator is None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def backward(self):
        return backward(self)

    def sum(self, axis=None):
        return Sum.apply(self, axis=axis)

    def reshape(self, *shape):
        return Reshape.apply(self, shape=shape)

    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(other))

    def __rsub__(self, other):
        return Add.apply(other, Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def __repr__(self):
        return "<Tensor {} shape={}{}>".format(
            self.name or "", self.shape, " grad" if self.requires_grad else ""
        )  # pragma: no cover


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Function:
    """
    Base class for graph operations.

    ``forward`` receives the input arrays (plus keyword options) and returns
    the output array. ``backward`` receives the output gradient and returns a
    tuple with one gradient (or ``None``) per input.
    """

    def __init__(self, *inputs):
        self.inputs = inputs

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError("forward not implemented")  # pragma: no cover

    def backward(self, grad):
        raise NotImplementedError("backward not implemented")  # pragma: no cover

    @classmethod
    def apply(cls, *inputs, **kwargs):
        inputs = tuple(as_tensor(t) for t in inputs)
        func = cls(*inputs)
        out = func.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = _GradMode.enabled and any(t.requires_grad for t in inputs)
        return Tensor(
            out, requires_grad=requires_grad, creator=func if requires_grad else None
        )


class GradGraph:
    """
    Topologically ordered view of the nodes reachable from a loss.

    :param nodes: Tensors ordered so every node follows all of its inputs.
    :type nodes: list
    :param leaves: The leaf tensors among ``nodes`` that require gradients.
    :type leaves: list
    """

    def __init__(self, nodes, leaves):
        self.nodes = nodes
        self.leaves = leaves

    @classmethod
    def from_loss(cls, loss):
        order = []
        visited = set()
        stack = [(loss, False)]
        while stack:
            node, finished = stack.pop()
            if finished:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        leaves = [t for t in order if t.creator is None and t.requires_grad]
        return cls(order, leaves)


def backward(loss, graph=None):
    """
    Backpropagate from a scalar loss.

    Gradients reaching a tensor through several consumers are summed. Leaf
    gradients are added to any gradient already stored on the leaf.

    :param loss: A tensor holding exactly one value.
    :type loss: Tensor
    :param graph: A prebuilt graph for ``loss``; built on demand when omitted.
    :type graph: GradGraph
    :rtype: dict
    :returns: This call's gradient contribution for every reachable leaf,
        keyed by the leaf tensor.
    """
    if loss.data.size != 1:
        raise InvalidArgumentError(
            "backward requires a scalar loss, got shape {}".format(loss.shape)
        )
    if graph is None:
        graph = GradGraph.from_loss(loss)

    grads = {id(loss): np.ones_like(loss.data)}
    contributions = {}
    for node in reversed(graph.nodes):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.creator is None:
            contributions[node] = grad
            continue

        input_grads = node.creator.backward(grad)
        for parent, parent_grad in zip(node.creator.inputs, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = np.asarray(parent_grad, dtype=DTYPE)
            if parent_grad.shape != parent.data.shape:
                raise ShapeError(
                    "{} backward produced a gradient of the wrong shape".format(
                        type(node.creator).__name__
                    ),
                    parent_grad.shape,
                    parent.data.shape,
                )
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad

    for leaf in graph.leaves:
        grad = contributions.get(leaf)
        if grad is None:
            grad = np.zeros_like(leaf.data)
            contributions[leaf] = grad
        leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad
    return contributions


def zero_grad(tensors):
    for tensor in tensors:
        tensor.zero_grad()


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, what):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("{} operands do not broadcast".format(what), a.shape, b.shape)


class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b, "add")
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b, "mul")
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return (
            _unbroadcast(grad * b.data, a.shape),
            _unbroadcast(grad * a.data, b.shape),
        )


class MatMul(Function):
    """
    Vector/matrix products for operands of rank 1 or 2.
    """

    def forward(self, a, b):
        if a.ndim not in (1, 2) or b.ndim not in (1, 2):
            raise ShapeError("matmul supports rank 1 and 2 operands", a.shape, b.shape)
        inner_a = a.shape[-1]
        inner_b = b.shape[0]
        if inner_a != inner_b:
            raise ShapeError("matmul inner dimensions differ", a.shape, b.shape)
        return a @ b

    def backward(self, grad):
        a, b = (t.data for t in self.inputs)
        if a.ndim == 2 and b.ndim == 2:
            return grad @ b.T, a.T @ grad
        if a.ndim == 1 and b.ndim == 2:
            return b @ grad, np.outer(a, grad)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(grad, b), a.T @ grad
        return grad * b, grad * a


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError:
            raise ShapeError(
                "concat operands disagree off axis {}".format(axis),
                *(a.shape for a in arrays)
            )

    def backward(self, grad):
        bounds = np.cumsum([t.shape[self.axis] for t in self.inputs])[:-1]
        return tuple(np.split(grad, bounds, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays):
        try:
            return np.stack(arrays, axis=0)
        except ValueError:
            raise ShapeError("stack operands differ", *(a.shape for a in arrays))

    def backward(self, grad):
        return tuple(grad[i] for i in range(len(self.inputs)))


class GetItem(Function):
    def forward(self, a, index=None):
        self.index = index
        return a[index]

    def backward(self, grad):
        out = np.zeros_like(self.inputs[0].data)
        np.add.at(out, self.index, grad)
        return (out,)


class Reshape(Function):
    def forward(self, a, shape=None):
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError("cannot reshape to {}".format(shape), a.shape)

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class Sum(Function):
    def forward(self, a, axis=None):
        self.axis = axis
        return np.sum(a, axis=axis)

    def backward(self, grad):
        shape = self.inputs[0].shape
        if self.axis is not None:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Sigmoid(Function):
    def forward(self, a):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * a))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out**2),)


class ReLU(Function):
    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, grad):
        return (grad * (self.inputs[0].data > 0),)


class LeakyReLU(Function):
    def forward(self, a, slope=0.01):
        self.slope = slope
        return np.where(a > 0, a, slope * a)

    def backward(self, grad):
        return (np.where(self.inputs[0].data > 0, grad, self.slope * grad),)


class Softmax(Function):
    """
    Softmax over the last axis of ``logits / tau``, with optional boolean mask
    (False entries get probability exactly zero).
    """

    def forward(self, logits, tau=1.0, mask=None):
        self.tau = tau
        scaled = logits / tau
        if mask is not None:
            scaled = np.where(mask, scaled, -np.inf)
        scaled = scaled - np.max(scaled, axis=-1, keepdims=True)
        exp = np.exp(scaled)
        self.out = exp / np.sum(exp, axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        inner = np.sum(grad * s, axis=-1, keepdims=True)
        return (s * (grad - inner) / self.tau,)


class MaskedCrossEntropy(Function):
    """
    Mean negative log-probability of the target classes over unmasked rows.
    """

    def forward(self, probs, targets=None, mask=None, eps=1e-12):
        self.targets = np.asarray(targets, dtype=np.int64)
        self.mask = np.asarray(mask, dtype=bool)
        self.eps = eps
        self.count = int(self.mask.sum())
        rows = np.arange(probs.shape[0])
        picked = probs[rows, self.targets]
        self.picked = picked
        nll = -np.log(np.maximum(picked, eps))
        return np.sum(nll * self.mask) / self.count

    def backward(self, grad):
        probs = self.inputs[0].data
        out = np.zeros_like(probs)
        active = self.mask & (self.picked > self.eps)
        rows = np.nonzero(active)[0]
        out[rows, self.targets[rows]] = -grad / (self.count * self.picked[rows])
        return (out,)


class SquaredError(Function):
    """
    Per-frame squared error reduced over feature dimensions (``sum`` or
    ``mean``), then averaged over unmasked frames.
    """

    def forward(self, pred, target, reduction="sum", mask=None):
        self.diff = pred - target
        self.feature_axes = tuple(range(1, pred.ndim))
        self.scale = 1.0
        if reduction == "mean" and self.feature_axes:
            self.scale = 1.0 / np.prod([pred.shape[i] for i in self.feature_axes])
        self.mask = (
            np.ones(pred.shape[0], dtype=bool)
            if mask is None
            else np.asarray(mask, dtype=bool)
        )
        self.count = int(self.mask.sum())
        per_frame = np.sum(self.diff**2, axis=self.feature_axes) * self.scale
        return np.sum(per_frame * self.mask) / self.count

    def backward(self, grad):
        frame_weight = self.mask.astype(DTYPE).reshape(
            (-1,) + (1,) * len(self.feature_axes)
        )
        g = grad * 2.0 * self.scale * self.diff * frame_weight / self.count
        return g, -g


class BinaryCrossEntropy(Function):
    def forward(self, probs, targets, eps=1e-7, mask=None):
        self.eps = eps
        self.clipped = np.clip(probs, eps, 1.0 - eps)
        self.mask = (
            np.ones(probs.shape, dtype=bool)
            if mask is None
            else np.asarray(mask, dtype=bool)
        )
        self.count = int(self.mask.sum())
        b = targets
        terms = b * np.log(self.clipped) + (1.0 - b) * np.log(1.0 - self.clipped)
        return -np.sum(terms * self.mask) / self.count

    def backward(self, grad):
        probs = self.inputs[0].data
        b = self.inputs[1].data
        q = self.clipped
        inside = (probs >= self.eps) & (probs <= 1.0 - self.eps) & self.mask
        gq = -(b / q - (1.0 - b) / (1.0 - q)) * grad / self.count
        return gq * inside, None


class LSTMCell(Function):
    """
    One step of a gated recurrent cell.

    Inputs are ``x (D,)``, ``h (H,)``, ``c (H,)``, ``W (D+H, 4H)`` and
    ``b (4H,)``; gates are ordered input, forget, candidate, output. The output
    is the stacked next state ``[h', c']`` of shape ``(2, H)``.
    """

    def forward(self, x, h, c, weight, bias):
        hidden = h.shape[0]
        if weight.shape != (x.shape[0] + hidden, 4 * hidden):
            raise ShapeError(
                "recurrent weight does not match input and state",
                x.shape,
                h.shape,
                weight.shape,
            )
        if c.shape != h.shape or bias.shape != (4 * hidden,):
            raise ShapeError("recurrent state or bias mismatch", h.shape, c.shape)
        self.xh = np.concatenate([x, h])
        z = self.xh @ weight + bias
        i = 0.5 * (1.0 + np.tanh(0.5 * z[:hidden]))
        f = 0.5 * (1.0 + np.tanh(0.5 * z[hidden : 2 * hidden]))
        g = np.tanh(z[2 * hidden : 3 * hidden])
        o = 0.5 * (1.0 + np.tanh(0.5 * z[3 * hidden :]))
        c_next = f * c + i * g
        tanh_c = np.tanh(c_next)
        self.gates = (i, f, g, o, tanh_c)
        return np.stack([o * tanh_c, c_next])

    def backward(self, grad):
        x, _, c, weight, _ = (t.data for t in self.inputs)
        i, f, g, o, tanh_c = self.gates
        grad_h, grad_c = grad[0], grad[1]

        grad_o = grad_h * tanh_c
        grad_c = grad_c + grad_h * o * (1.0 - tanh_c**2)
        dz = np.concatenate(
            [
                grad_c * g * i * (1.0 - i),
                grad_c * c * f * (1.0 - f),
                grad_c * i * (1.0 - g**2),
                grad_o * o * (1.0 - o),
            ]
        )
        grad_xh = weight @ dz
        split = x.shape[0]
        return (
            grad_xh[:split],
            grad_xh[split:],
            grad_c * f,
            np.outer(self.xh, dz),
            dz,
        )


class CustomBackward(Function):
    """
    A node whose forward is ``forward_fn(x)`` and whose backward is
    ``backward_rule(grad, x, out)`` instead of the true derivative.
    """

    def forward(self, a, forward_fn=None, backward_rule=None):
        self.backward_rule = backward_rule
        self.out = np.asarray(forward_fn(a), dtype=DTYPE)
        return self.out

    def backward(self, grad):
        return (self.backward_rule(grad, self.inputs[0].data, self.out),)


def _check_finite(array, what):
    if not np.all(np.isfinite(array)):
        raise NumericInputError("{} contains NaN or Inf".format(what))


def add(a, b):
    return Add.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def matmul(a, b):
    return MatMul.apply(a, b)


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def stack(tensors):
    return Stack.apply(*tensors)


def sigmoid(x):
    return Sigmoid.apply(x)


def tanh(x):
    return Tanh.apply(x)


def relu(x):
    return ReLU.apply(x)


def leaky_relu(x, slope=0.01):
    return LeakyReLU.apply(x, slope=slope)


def temperature_softmax(logits, tau=1.0, mask=None):
    """
    Softmax of ``logits / tau`` over the last axis.

    :param logits: Unnormalized scores.
    :type logits: Tensor
    :param tau: Temperature; larger values give a smoother distribution.
    :type tau: float
    :param mask: Optional boolean array; False entries receive zero mass.
    :rtype: Tensor
    """
    if not tau > 0:
        raise InvalidArgumentError("temperature must be positive, got {}".format(tau))
    logits = as_tensor(logits)
    _check_finite(logits.data, "logits")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != logits.shape:
            raise ShapeError("softmax mask shape differs", mask.shape, logits.shape)
        if not np.all(mask.any(axis=-1)):
            raise InvalidArgumentError("softmax mask hides every entry of a row")
    return Softmax.apply(logits, tau=float(tau), mask=mask)


softmax = temperature_softmax


def masked_cross_entropy(probs, targets, mask=None, eps=1e-12):
    probs = as_tensor(probs)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim != 2 or targets.shape != (probs.shape[0],):
        raise ShapeError(
            "cross-entropy expects (T, C) and (T,)", probs.shape, targets.shape
        )
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    if not np.any(mask):
        raise InvalidArgumentError("cross-entropy mask excludes every position")
    return MaskedCrossEntropy.apply(probs, targets=targets, mask=mask, eps=eps)


def squared_error(pred, target, reduction="sum", mask=None):
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("squared error operands differ", pred.shape, target.shape)
    if reduction not in ("sum", "mean"):
        raise InvalidArgumentError("unknown reduction '{}'".format(reduction))
    if pred.ndim == 0:
        raise ShapeError("squared error needs a frame axis", pred.shape)
    return SquaredError.apply(pred, target, reduction=reduction, mask=mask)


def binary_cross_entropy(probs, targets, eps=1e-7, mask=None):
    probs, targets = as_tensor(probs), as_tensor(targets)
    if probs.shape != targets.shape:
        raise ShapeError(
            "binary cross-entropy operands differ", probs.shape, targets.shape
        )
    return BinaryCrossEntropy.apply(probs, targets, eps=eps, mask=mask)


def lstm_cell(x, h, c, weight, bias):
    """
    Advance a gated recurrent cell by one step.

    :rtype: tuple
    :returns: ``(h_next, c_next)``
    """
    state = LSTMCell.apply(x, h, c, weight, bias)
    return state[0], state[1]


def custom_backward_op(x, forward_fn, backward_rule):
    """
    Create a graph node with a hand-written backward rule.

    ``backward_rule(grad, x, out)`` must return an array shaped like ``x``;
    a violation surfaces as a :class:`ShapeError` during :func:`backward`.

    :param x: The node's input.
    :type x: Tensor
    :param forward_fn: Maps the input array to the output array.
    :type forward_fn: callable
    :param backward_rule: Maps the output gradient to the input gradient.
    :type backward_rule: callable
    :rtype: Tensor
    """
    return CustomBackward.apply(
        x, forward_fn=forward_fn, backward_rule=backward_rule
    )


def identity_rule(grad, x, out):
    return grad


# ============================================
# Checkpoint arrays
# ============================================


def save_arrays(path, arrays):
    """
    Write named arrays in the checkpoint binary format.

    :param path: Destination file.
    :type path: str
    :param arrays: Ordered mapping of name to array (or Tensor).
    :type arrays: dict
    """
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        for name, value in arrays.items():
            array = value.data if isinstance(value, Tensor) else np.asarray(value)
            array = np.ascontiguousarray(array, dtype="<f8")
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<Q", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<Q", array.ndim))
            handle.write(struct.pack("<{}Q".format(array.ndim), *array.shape))
            handle.write(array.tobytes())


def load_arrays(path):
    """
    Read a checkpoint written by :func:`save_arrays`.

    :rtype: dict
    :returns: Name to float64 array, in file order.
    """
    with open(path, "rb") as handle:
        payload = handle.read()

    if not payload.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("{} is not a chainflow checkpoint".format(path))

    arrays = {}
    offset = len(CHECKPOINT_MAGIC)
    try:
        while offset < len(payload):
            (name_len,) = struct.unpack_from("<Q", payload, offset)
            offset += 8
            name = payload[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<Q", payload, offset)
            offset += 8
            shape = struct.unpack_from("<{}Q".format(rank), payload, offset)
            offset += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            if offset + 8 * count > len(payload):
                raise CheckpointError("{} is truncated at '{}'".format(path, name))
            data = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
            arrays[name] = data.astype(DTYPE).reshape(shape)
    except (struct.error, UnicodeDecodeError):
        raise CheckpointError("{} is corrupt".format(path))
    return arrays
