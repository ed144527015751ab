# -*- coding: utf-8 -*-
import numpy as np
from exceptions import CheckpointError, ShapeError
from tensor import Tensor, concat, lstm_cell, stack


class Module:
    """
    Owner of named parameters and child modules.

    Parameter names are dotted paths (``encoder.0.fwd.weight``) so a whole
    model flattens into the checkpoint format.
    """

    def __init__(self):
        self._params = {}
        self._children = {}

    def param(self, name, shape, rng, fan_in=None, value=None):
        """
        Register a trainable tensor initialised uniformly in
        ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``.
        """
        if value is None:
            fan_in = fan_in or shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        tensor = Tensor(value, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        named = {}
        for name, tensor in self._params.items():
            named[prefix + name] = tensor
        for name, module in self._children.items():
            named.update(module.named_parameters(prefix + name + "."))
        return named

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for tensor in self.parameters():
            tensor.zero_grad()

    def state_dict(self, prefix=""):
        return {
            name: tensor.data.copy()
            for name, tensor in self.named_parameters(prefix).items()
        }

    def load_state_dict(self, arrays, prefix=""):
        for name, tensor in self.named_parameters(prefix).items():
            if name not in arrays:
                raise CheckpointError(
                    "checkpoint is missing parameter '{}'".format(name)
                )
            if arrays[name].shape != tensor.shape:
                raise CheckpointError(
                    "parameter '{}' has shape {} in checkpoint, "
                    "model expects {}".format(
                        name, arrays[name].shape, tensor.shape
                    )
                )
            tensor.data = np.array(arrays[name], dtype=tensor.data.dtype)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = self.param("weight", (in_dim, out_dim), rng)
        self.bias = self.param("bias", (out_dim,), rng, fan_in=in_dim) if bias else None

    def __call__(self, x):
        if x.shape[-1] != self.in_dim:
            raise ShapeError(
                "linear input has the wrong width", x.shape, self.weight.shape
            )
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class LSTM(Module):
    """
    Unidirectional gated recurrent layer.
    """

    def __init__(self, input_dim, hidden, rng):
        super().__init__()
        self.input_dim = input_dim
        self.hidden = hidden
        fan_in = input_dim + hidden
        self.weight = self.param("weight", (fan_in, 4 * hidden), rng, fan_in=fan_in)
        self.bias = self.param("bias", (4 * hidden,), rng, fan_in=fan_in)

    def initial_state(self):
        zeros = np.zeros(self.hidden)
        return Tensor(zeros), Tensor(zeros)

    def step(self, x, h, c):
        return lstm_cell(x, h, c, self.weight, self.bias)

    def run(self, rows, reverse=False):
        h, c = self.initial_state()
        order = range(len(rows) - 1, -1, -1) if reverse else range(len(rows))
        outputs = [None] * len(rows)
        for index in order:
            h, c = self.step(rows[index], h, c)
            outputs[index] = h
        return outputs


class BiLSTM(Module):
    """
    Bidirectional recurrent layer over a ``(S, D)`` sequence, returning the
    ``(S, 2H)`` concatenation of forward and backward states.
    """

    def __init__(self, input_dim, hidden, rng):
        super().__init__()
        self.input_dim = input_dim
        self.hidden = hidden
        self.fwd = self.child("fwd", LSTM(input_dim, hidden, rng))
        self.bwd = self.child("bwd", LSTM(input_dim, hidden, rng))

    def __call__(self, x):
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(
                "recurrent layer expects (frames, {})".format(self.input_dim), x.shape
            )
        rows = [x[s] for s in range(x.shape[0])]
        forward = stack(self.fwd.run(rows))
        backward = stack(self.bwd.run(rows, reverse=True))
        return concat([forward, backward], axis=1)


def subsample(x):
    """Keep every second frame, starting with the first."""
    return x[::2]
