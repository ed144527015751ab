# -*- coding: utf-8 -*-
"""
Discretization with straight-through gradients.

Both estimators emit a one-hot vector in the forward pass and hand the
upstream gradient to the probability vector unchanged in the backward pass.
"""
from dataclasses import dataclass

import numpy as np
from exceptions import InvalidArgumentError
from tensor import (
    Tensor,
    as_tensor,
    custom_backward_op,
    identity_rule,
    temperature_softmax,
)

UNIFORM_EPS = 2.0**-52
ST_MODES = ("none", "argmax", "gumbel")


@dataclass
class OneHotToken:
    vector: Tensor
    class_index: int


@dataclass
class GumbelNoise:
    values: np.ndarray
    seed: object = None


def make_rng(seed):
    return np.random.default_rng(seed)


def split_rngs(seed, count):
    """
    Derive ``count`` independent generators from one seed, so parallel work
    never shares a stream.
    """
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def onehot(index, size):
    vector = np.zeros(size)
    vector[index] = 1.0
    return vector


def onehot_argmax(array):
    """One-hot of the argmax along the last axis; ties go to the lowest index."""
    array = np.asarray(array)
    out = np.zeros_like(array, dtype=np.float64)
    index = np.argmax(array, axis=-1)
    np.put_along_axis(out, np.expand_dims(index, -1), 1.0, axis=-1)
    return out


def constant_token(index, size):
    """A one-hot token with no gradient path."""
    return OneHotToken(Tensor(onehot(index, size)), int(index))


def _check_probs(p):
    if p.size == 0:
        raise InvalidArgumentError("cannot discretize an empty vector")
    if not np.all(np.isfinite(p.data)):
        raise InvalidArgumentError("probability vector contains NaN or Inf")


def st_argmax_onehot(p):
    """
    Straight-through argmax.

    Forward: ``onehot(argmax p)``. Backward: the upstream gradient is passed
    to ``p`` unchanged. Works along the last axis of any shape; ``class_index``
    is only meaningful for a single vector.

    :param p: Probability vector(s).
    :type p: Tensor
    :rtype: OneHotToken
    """
    p = as_tensor(p)
    _check_probs(p)
    vector = custom_backward_op(p, onehot_argmax, identity_rule)
    index = int(np.argmax(p.data)) if p.ndim == 1 else -1
    return OneHotToken(vector, index)


def gumbel_from_uniform(u):
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


def sample_gumbel(count, rng):
    """
    Draw ``count`` i.i.d. standard Gumbel values.

    :rtype: GumbelNoise
    """
    if count < 1:
        raise InvalidArgumentError(
            "need at least one Gumbel sample, got {}".format(count)
        )
    return GumbelNoise(gumbel_from_uniform(rng.random(count)))


def gumbel_softmax_probs(logits, tau, rng, noise=None):
    """
    Temperature softmax of ``logits + g`` for fresh Gumbel noise ``g``.

    The noise is a constant of the graph: gradients flow to ``logits`` only.

    :param noise: Optional fixed noise (GumbelNoise or array) instead of a draw.
    :rtype: Tensor
    """
    if not tau > 0:
        raise InvalidArgumentError("temperature must be positive, got {}".format(tau))
    logits = as_tensor(logits)
    if noise is None:
        noise = sample_gumbel(logits.shape[-1], rng)
    values = noise.values if isinstance(noise, GumbelNoise) else np.asarray(noise)
    return temperature_softmax(logits + Tensor(values), tau)


def categorical_from_uniform(p, u):
    """
    Inverse-CDF categorical draw(s) for uniform value(s) ``u`` in [0, 1).
    """
    cdf = np.cumsum(np.asarray(p, dtype=np.float64))
    index = np.searchsorted(cdf, np.asarray(u) * cdf[-1], side="right")
    return np.minimum(index, len(cdf) - 1)


def st_gumbel_sample(p, rng):
    """
    Straight-through categorical sample.

    Forward: ``z ~ Categorical(p)`` from one uniform draw, emitted as
    ``onehot(z)``. Backward: identity to ``p``.

    :param p: A probability vector, typically from :func:`gumbel_softmax_probs`.
    :type p: Tensor
    :rtype: OneHotToken
    """
    p = as_tensor(p)
    _check_probs(p)
    if p.ndim != 1:
        raise InvalidArgumentError("categorical sampling expects a single vector")
    total = float(np.sum(p.data))
    if abs(total - 1.0) > 1e-6 or np.any(p.data < 0):
        raise InvalidArgumentError(
            "probability mass must sum to 1, got {:.8f}".format(total)
        )
    index = int(categorical_from_uniform(p.data, rng.random()))
    size = p.shape[0]
    vector = custom_backward_op(p, lambda a: onehot(index, size), identity_rule)
    return OneHotToken(vector, index)


def discretize(logits, probs, st_mode, tau, rng):
    """
    Turn one decoder step into a one-hot token for the chain.

    ``none`` gives a detached argmax token, ``argmax`` the straight-through
    argmax of ``probs`` and ``gumbel`` a straight-through sample from the
    Gumbel-perturbed softmax of ``logits``.

    :rtype: tuple
    :returns: ``(OneHotToken, probabilities the token was drawn from)``
    """
    if st_mode == "none":
        return constant_token(int(np.argmax(probs.data)), probs.shape[0]), probs
    if st_mode == "argmax":
        return st_argmax_onehot(probs), probs
    if st_mode == "gumbel":
        perturbed = gumbel_softmax_probs(logits, tau, rng)
        return st_gumbel_sample(perturbed, rng), perturbed
    raise InvalidArgumentError("unknown st_mode '{}'".format(st_mode))
