# -*- coding: utf-8 -*-
"""
Finite-difference and straight-through checks behind ``chainflow gradcheck``.
"""
import logging
from dataclasses import dataclass

import numpy as np
from asr import attend
from chain import SpeechChain, chain_step
from estimators import (
    gumbel_from_uniform,
    make_rng,
    onehot,
    st_argmax_onehot,
    st_gumbel_sample,
)
from exceptions import InvalidArgumentError
from layers import BiLSTM
from records import ChainConfig, FeatureSequence, Utterance
from tensor import (
    Tensor,
    backward,
    binary_cross_entropy,
    concat,
    leaky_relu,
    lstm_cell,
    masked_cross_entropy,
    no_grad,
    relu,
    sigmoid,
    squared_error,
    stack,
    tanh,
    temperature_softmax,
)
from tts import tts_recon_loss

logger = logging.getLogger("chainflow")

EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.error <= self.tolerance)


def relative_error(analytic, numeric):
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-6)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_entry(fn, tensor, index, eps=EPS):
    """Central difference of ``fn()`` with respect to one entry of ``tensor``."""
    flat = tensor.data.reshape(-1)
    original = flat[index]
    flat[index] = original + eps
    plus = fn()
    flat[index] = original - eps
    minus = fn()
    flat[index] = original
    return (plus - minus) / (2.0 * eps)


def gradient_error(fn, inputs, eps=EPS):
    """
    Compare backpropagated gradients of the scalar ``fn(*inputs)`` against
    central differences over every entry of every input.
    """
    for tensor in inputs:
        tensor.zero_grad()
    backward(fn(*inputs))
    analytic = np.concatenate([t.grad.ravel() for t in inputs])

    def value():
        with no_grad():
            return fn(*inputs).item()

    numeric = [
        numeric_entry(value, tensor, index, eps)
        for tensor in inputs
        for index in range(tensor.size)
    ]
    return relative_error(analytic, numeric)


# ============================================
# Primitive cases
# ============================================


def _leaf(array):
    return Tensor(array, requires_grad=True)


def _away_from_zero(rng, shape):
    raw = rng.standard_normal(shape)
    return np.sign(raw) * (0.1 + np.abs(raw))


def _case_matmul(rng):
    w = rng.standard_normal((3, 2))
    return [_leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((4, 2)))], (
        lambda a, b: (a @ b * Tensor(w)).sum()
    )


def _case_matvec(rng):
    w = rng.standard_normal(3)
    return [_leaf(rng.standard_normal(4)), _leaf(rng.standard_normal((4, 3)))], (
        lambda a, b: (a @ b * Tensor(w)).sum()
    )


def _elementwise(op, rng, shape=(3, 4), data=None):
    """``op`` applied to a ``(3, 4)`` input; ``shape`` is the output shape."""
    w = rng.standard_normal(shape)
    x = _leaf(rng.standard_normal((3, 4)) if data is None else data)
    return [x], lambda a: (op(a) * Tensor(w)).sum()


def _case_add(rng):
    w = rng.standard_normal((3, 4))
    return [_leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal(4))], (
        lambda a, b: ((a + b) * Tensor(w)).sum()
    )


def _case_mul(rng):
    w = rng.standard_normal((3, 4))
    return [_leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((3, 4)))], (
        lambda a, b: (a * b * Tensor(w)).sum()
    )


def _case_concat(rng):
    w = rng.standard_normal((5, 4))
    return [_leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((2, 4)))], (
        lambda a, b: (concat([a, b], axis=0) * Tensor(w)).sum()
    )


def _case_stack(rng):
    w = rng.standard_normal((2, 4))
    return [_leaf(rng.standard_normal(4)), _leaf(rng.standard_normal(4))], (
        lambda a, b: (stack([a, b]) * Tensor(w)).sum()
    )


def _case_slice(rng):
    w = rng.standard_normal((2, 2))
    return [_leaf(rng.standard_normal((3, 4)))], (
        lambda a: (a[1:3, ::2] * Tensor(w)).sum()
    )


def _case_softmax(rng):
    mask = np.array([[True, True, False, True]] * 3)
    w = rng.standard_normal((3, 4))
    return [_leaf(rng.standard_normal((3, 4)))], (
        lambda a: (temperature_softmax(a, 0.7, mask) * Tensor(w)).sum()
    )


def _case_cross_entropy(rng):
    targets = rng.integers(0, 4, size=3)
    mask = np.array([True, False, True])
    probs = rng.uniform(0.1, 1.0, size=(3, 4))
    return [_leaf(probs)], lambda p: masked_cross_entropy(p, targets, mask)


def _case_squared_error(reduction):
    def case(rng):
        mask = np.array([True, True, False])
        x, y = _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((3, 4)))
        return [x, y], lambda a, b: squared_error(a, b, reduction, mask)

    return case


def _case_binary_cross_entropy(rng):
    targets = Tensor((rng.random(6) > 0.5).astype(float))
    return [_leaf(rng.uniform(0.1, 0.9, size=6))], (
        lambda p: binary_cross_entropy(p, targets)
    )


def _case_lstm_cell(rng):
    w_h, w_c = rng.standard_normal(3), rng.standard_normal(3)
    inputs = [
        _leaf(rng.standard_normal(4)),
        _leaf(rng.standard_normal(3)),
        _leaf(rng.standard_normal(3)),
        _leaf(0.5 * rng.standard_normal((7, 12))),
        _leaf(0.5 * rng.standard_normal(12)),
    ]

    def loss(x, h, c, weight, bias):
        h_next, c_next = lstm_cell(x, h, c, weight, bias)
        return (h_next * Tensor(w_h)).sum() + (c_next * Tensor(w_c)).sum()

    return inputs, loss


def _case_bilstm(rng):
    layer = BiLSTM(4, 3, rng)
    w = rng.standard_normal((3, 6))
    x = _leaf(rng.standard_normal((3, 4)))
    return [x] + layer.parameters(), lambda a, *_: (layer(a) * Tensor(w)).sum()


def _case_attention(kind):
    def case(rng):
        states = _leaf(rng.standard_normal((3, 4)))
        query = _leaf(rng.standard_normal(5 if kind != "dot" else 4))
        weights = {}
        if kind == "bilinear":
            weights["weight"] = _leaf(rng.standard_normal((4, 5)))
        elif kind == "mlp":
            weights = {
                "enc": _leaf(rng.standard_normal((4, 6))),
                "query": _leaf(rng.standard_normal((5, 6))),
                "bias": _leaf(rng.standard_normal(6)),
                "v": _leaf(rng.standard_normal(6)),
            }
        w = rng.standard_normal(4)
        w_align = rng.standard_normal(3)

        def loss(*_):
            context, alignment = attend(states, query, kind, weights)
            return (context * Tensor(w)).sum() + (alignment * Tensor(w_align)).sum()

        return [states, query] + list(weights.values()), loss

    return case


PRIMITIVE_CASES = {
    "matmul": _case_matmul,
    "matvec": _case_matvec,
    "add": _case_add,
    "mul": _case_mul,
    "concat": _case_concat,
    "stack": _case_stack,
    "slice": _case_slice,
    "sum": lambda rng: _elementwise(lambda a: a.sum(axis=1), rng, shape=(3,)),
    "reshape": lambda rng: _elementwise(lambda a: a.reshape(4, 3).reshape(3, 4), rng),
    "sigmoid": lambda rng: _elementwise(sigmoid, rng),
    "tanh": lambda rng: _elementwise(tanh, rng),
    "relu": lambda rng: _elementwise(relu, rng, data=_away_from_zero(rng, (3, 4))),
    "leaky_relu": lambda rng: _elementwise(
        leaky_relu, rng, data=_away_from_zero(rng, (3, 4))
    ),
    "softmax": _case_softmax,
    "masked_cross_entropy": _case_cross_entropy,
    "squared_error_sum": _case_squared_error("sum"),
    "squared_error_mean": _case_squared_error("mean"),
    "binary_cross_entropy": _case_binary_cross_entropy,
    "lstm_cell": _case_lstm_cell,
    "bilstm": _case_bilstm,
    "attention_dot": _case_attention("dot"),
    "attention_bilinear": _case_attention("bilinear"),
    "attention_mlp": _case_attention("mlp"),
}


def check_primitives(seed=0, trials=20, tolerance=1e-4):
    rng = make_rng(seed)
    results = []
    for name, case in PRIMITIVE_CASES.items():
        worst = 0.0
        for _ in range(trials):
            inputs, fn = case(rng)
            worst = max(worst, gradient_error(fn, inputs))
        results.append(CheckResult(name, worst, tolerance))
    return results


# ============================================
# Straight-through checks
# ============================================


def _identity_gap(make_token, rng, trials):
    worst = 0.0
    for _ in range(trials):
        size = int(rng.integers(2, 9))
        p = _leaf(rng.dirichlet(np.ones(size)))
        upstream = rng.standard_normal(size)
        token = make_token(p, rng)
        backward((token.vector * Tensor(upstream)).sum())
        worst = max(worst, float(np.max(np.abs(p.grad - upstream))))
    return worst


def gumbel_max_distance(logits, draws, rng):
    """L1 distance between argmax(h + g) frequencies and softmax(h)."""
    logits = np.asarray(logits, dtype=np.float64)
    noise = gumbel_from_uniform(rng.random((draws, logits.size)))
    counts = np.bincount(np.argmax(logits + noise, axis=1), minlength=logits.size)
    expected = temperature_softmax(logits).data
    return float(np.sum(np.abs(counts / draws - expected)))


def check_st(seed=0, trials=100, draws=100000):
    rng = make_rng(seed)
    results = [
        CheckResult(
            "st_argmax.identity",
            _identity_gap(lambda p, _: st_argmax_onehot(p), rng, trials),
            0.0,
        ),
        CheckResult(
            "st_gumbel.identity", _identity_gap(st_gumbel_sample, rng, trials), 0.0
        ),
    ]

    matrix = _leaf(rng.random((3, 5)))
    upstream = rng.standard_normal((3, 5))
    backward((st_argmax_onehot(matrix).vector * Tensor(upstream)).sum())
    results.append(
        CheckResult(
            "st_argmax.batched_identity",
            float(np.max(np.abs(matrix.grad - upstream))),
            0.0,
        )
    )

    logits = _leaf(rng.standard_normal(3))
    w = rng.standard_normal(3)
    probs = temperature_softmax(logits)
    backward((st_argmax_onehot(probs).vector * Tensor(w)).sum())
    s = probs.data
    expected = s * (w - np.dot(s, w))
    results.append(
        CheckResult(
            "st_argmax.composition", relative_error(logits.grad, expected), 1e-12
        )
    )

    results.append(
        CheckResult(
            "gumbel_max.distribution",
            gumbel_max_distance(rng.standard_normal(5), draws, rng),
            0.02,
        )
    )
    return results


# ============================================
# Chain checks
# ============================================


def micro_config(st_mode="argmax", **overrides):
    """Vocabulary of 4 and recurrent widths of 8."""
    values = dict(
        st_mode=st_mode,
        vocab_size=4,
        mel_dim=4,
        lin_dim=6,
        enc_hidden=4,
        dec_hidden=8,
        emb_dim=8,
        att_dim=8,
        tts_emb_dim=8,
        tts_enc_hidden=4,
        tts_dec_hidden=8,
        tts_att_dim=8,
        prenet_dim=8,
        speaker_dim=4,
    )
    values.update(overrides)
    return ChainConfig(**values).validate()


def micro_utterance(cfg, rng, frames=8, targets=(0, 2, 1)):
    mel = rng.standard_normal((frames, cfg.mel_dim))
    stop = np.zeros(frames)
    stop[-1] = 1.0
    features = FeatureSequence(mel, rng.standard_normal((frames, cfg.lin_dim)), stop)
    tokens = list(targets) + [cfg.vocab_size - 1]
    return Utterance("micro", "", tokens, features)


def reconstruction_gradient_error(st_mode, seed=0, samples=12, eps=EPS):
    """
    Check the recognizer gradient of the reconstruction loss.

    The token realization of the unperturbed pass is held fixed: the
    synthesizer input becomes ``onehot + p(theta) - p(theta_0)``, whose true
    derivative is the straight-through gradient, and the Gumbel stream is
    reseeded identically for every evaluation.
    """
    cfg = micro_config(st_mode)
    model = SpeechChain(cfg, make_rng(seed))
    rng = make_rng(seed + 1)
    utt = micro_utterance(cfg, rng)
    mel = utt.features.mel

    def generate():
        return model.asr.generate(
            utt.features,
            "teacher_forcing",
            cfg.tau,
            st_mode,
            utt.tokens,
            make_rng(seed + 2),
        )

    def reconstruct(tokens):
        out = model.tts.decode(model.tts.encode_text(tokens), model.tts.speaker(0), mel)
        return tts_recon_loss(out.mel, mel)

    first = generate()
    fixed = [onehot(t.class_index, cfg.vocab_size) for t in first.tokens]
    base = [p.data.copy() for p in first.st_probs]
    model.zero_grad()
    backward(reconstruct(first.tokens))

    def surrogate():
        with no_grad():
            again = generate()
            rows = [
                Tensor(f + p.data - b)
                for f, p, b in zip(fixed, again.st_probs, base)
            ]
            return reconstruct(rows).item()

    params = list(model.asr.named_parameters().values())
    analytic, numeric = [], []
    for _ in range(samples):
        tensor = params[int(rng.integers(len(params)))]
        index = int(rng.integers(tensor.size))
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        analytic.append(grad.reshape(-1)[index])
        numeric.append(numeric_entry(surrogate, tensor, index, eps))
    return relative_error(analytic, numeric)


def check_chain(seed=0, tolerance=1e-3):
    results = [
        CheckResult(
            "chain.reconstruction_{}".format(mode),
            reconstruction_gradient_error(mode, seed),
            tolerance,
        )
        for mode in ("argmax", "gumbel")
    ]

    rng = make_rng(seed + 3)
    detached = micro_config("none")
    model = SpeechChain(detached, make_rng(seed))
    step = chain_step(model, micro_utterance(detached, rng), detached, rng)
    results.append(CheckResult("chain.detached_norm", step.grad_norm_asr_from_rec, 0.0))
    results.append(
        CheckResult(
            "chain.decomposition",
            abs(step.l_total - (step.l_asr + step.l_rec)),
            1e-12,
        )
    )
    return results


SCOPES = {"primitives": check_primitives, "st": check_st, "chain": check_chain}


def run_checks(scope, seed=0):
    """
    :param scope: ``primitives``, ``st`` or ``chain``.
    :rtype: list
    """
    if scope not in SCOPES:
        raise InvalidArgumentError("unknown gradcheck scope '{}'".format(scope))
    results = SCOPES[scope](seed)
    for result in results:
        log = logger.info if result.passed else logger.error
        log(
            "{}: max relative error {:.3e} (tolerance {:.0e})".format(
                result.name, result.error, result.tolerance
            )
        )
    return results
