# -*- coding: utf-8 -*-
import numpy as np
from exceptions import CheckpointError


def grad_norm(params):
    total = 0.0
    for tensor in params:
        if tensor.grad is not None:
            total += float(np.sum(tensor.grad**2))
    return float(np.sqrt(total))


def clip_grad_norm(params, max_norm):
    """
    Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    :rtype: float
    :returns: The norm before clipping.
    """
    norm = grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for tensor in params:
            if tensor.grad is not None:
                tensor.grad = tensor.grad * scale
    return norm


class Adam:
    """
    Adaptive-moment optimizer over a name to parameter mapping.

    Parameters without a gradient are skipped for that step.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        self.steps += 1
        correction1 = 1.0 - self.beta1**self.steps
        correction2 = 1.0 - self.beta2**self.steps
        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue
            grad = tensor.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad**2
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            tensor.data = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.zero_grad()

    def state_dict(self):
        arrays = {"optim.steps": np.array([float(self.steps)])}
        for name in self.params:
            arrays["optim.m." + name] = self.m[name].copy()
            arrays["optim.v." + name] = self.v[name].copy()
        return arrays

    def load_state_dict(self, arrays):
        if "optim.steps" not in arrays:
            raise CheckpointError("checkpoint has no optimizer state")
        self.steps = int(arrays["optim.steps"][0])
        for name, tensor in self.params.items():
            for slot, store in (("m", self.m), ("v", self.v)):
                key = "optim.{}.{}".format(slot, name)
                if key not in arrays or arrays[key].shape != tensor.shape:
                    raise CheckpointError(
                        "optimizer state for '{}' is missing".format(name)
                    )
                store[name] = np.array(arrays[key])
