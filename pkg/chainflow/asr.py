# -*- coding: utf-8 -*-
"""
Attention-based sequence-to-sequence recognizer.

Three bidirectional recurrent layers, each followed by dropping every second
frame, encode the mel stream; a gated recurrent decoder with content-based
attention emits one logit vector per output character.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from estimators import (
    categorical_from_uniform,
    constant_token,
    discretize,
    st_gumbel_sample,
)
from exceptions import (
    InvalidArgumentError,
    SequenceTooShortError,
    ShapeError,
)
from layers import BiLSTM, LSTM, Linear, Module, subsample
from records import FeatureSequence
from tensor import (
    Tensor,
    concat,
    masked_cross_entropy,
    no_grad,
    stack,
    tanh,
    temperature_softmax,
)

logger = logging.getLogger("chainflow")

ENCODER_LAYERS = 3
MIN_FRAMES = 2**ENCODER_LAYERS
GENERATION_MODES = ("teacher_forcing", "greedy", "sample", "beam")


@dataclass
class EncodedSpeech:
    states: Tensor
    original_length: int
    subsampled_length: int
    mask: np.ndarray = None


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor
    context: Tensor
    step: int = 0
    alignment: Tensor = None


@dataclass
class Hypothesis:
    tokens: list
    log_likelihood: float
    truncated: bool = False

    @property
    def score(self):
        """Log-likelihood normalized by the hypothesis length."""
        return self.log_likelihood / max(len(self.tokens), 1)


@dataclass
class Generation:
    probs: list = field(default_factory=list)
    tokens: list = field(default_factory=list)
    st_probs: list = field(default_factory=list)
    indices: list = field(default_factory=list)
    alignments: list = field(default_factory=list)
    truncated: bool = False


def subsampled_length(frames):
    for _ in range(ENCODER_LAYERS):
        frames = (frames + 1) // 2
    return frames


def log_softmax(logits):
    shifted = logits - np.max(logits)
    return shifted - np.log(np.sum(np.exp(shifted)))


def attend(states, query, score_kind, weights=None, mask=None):
    """
    Content-based attention.

    :param states: Encoder states ``(S', M)``.
    :type states: Tensor
    :param query: Decoder state ``(N,)``.
    :type query: Tensor
    :param score_kind: ``dot``, ``bilinear`` or ``mlp``.
    :type score_kind: str
    :param weights: Score parameters: ``weight (M, N)`` for bilinear;
        ``enc (M, A)``, ``query (N, A)``, ``bias (A,)`` and ``v (A,)`` for mlp.
    :type weights: dict
    :param mask: Optional boolean ``(S',)``; False frames get zero weight.
    :rtype: tuple
    :returns: ``(context (M,), alignment (S',))``
    """
    if score_kind == "dot":
        if states.shape[1] != query.shape[0]:
            raise ShapeError(
                "dot attention needs equal widths", states.shape, query.shape
            )
        scores = states @ query
    elif score_kind == "bilinear":
        scores = states @ (weights["weight"] @ query)
    elif score_kind == "mlp":
        projected = query @ weights["query"] + weights["bias"]
        hidden = tanh(states @ weights["enc"] + projected)
        scores = hidden @ weights["v"]
    else:
        raise InvalidArgumentError("unknown score kind '{}'".format(score_kind))

    alignment = temperature_softmax(scores, 1.0, mask)
    return alignment @ states, alignment


class Attention(Module):
    def __init__(self, score_kind, enc_dim, query_dim, att_dim, rng):
        super().__init__()
        if score_kind == "dot" and enc_dim != query_dim:
            raise ShapeError(
                "dot attention needs equal encoder and decoder widths",
                (enc_dim,),
                (query_dim,),
            )
        self.score_kind = score_kind
        self.weights = {}
        if score_kind == "bilinear":
            self.weights["weight"] = self.param("weight", (enc_dim, query_dim), rng)
        elif score_kind == "mlp":
            self.weights["enc"] = self.param("enc", (enc_dim, att_dim), rng)
            self.weights["query"] = self.param("query", (query_dim, att_dim), rng)
            self.weights["bias"] = self.param("bias", (att_dim,), rng, fan_in=att_dim)
            self.weights["v"] = self.param("v", (att_dim,), rng)

    def __call__(self, states, query, mask=None):
        return attend(states, query, self.score_kind, self.weights, mask)


def beam_search(step_fn, initial_state, k, max_length, eos):
    """
    Length-normalized beam search over an arbitrary step function.

    ``step_fn(state, token)`` returns ``(log_probs, next_state)``; ``token`` is
    ``None`` on the first step. Each live hypothesis is extended by its best
    ``min(k, C)`` tokens, the best ``k`` candidates by accumulated
    log-likelihood survive, and candidates ending in ``eos`` retire. The final
    winner maximizes log-likelihood divided by length.

    :rtype: Hypothesis
    """
    if k < 1:
        raise InvalidArgumentError("beam size must be at least 1, got {}".format(k))

    live = [(Hypothesis([], 0.0), initial_state)]
    completed = []
    for _ in range(max_length):
        candidates = []
        for rank, (hyp, state) in enumerate(live):
            last = hyp.tokens[-1] if hyp.tokens else None
            log_probs, next_state = step_fn(state, last)
            best = np.argsort(-log_probs, kind="stable")[: min(k, len(log_probs))]
            for token in best:
                score = hyp.log_likelihood + float(log_probs[token])
                candidates.append((score, rank, int(token), hyp, next_state))

        candidates.sort(key=lambda item: (-item[0], item[1], item[2]))
        live = []
        for score, _, token, hyp, next_state in candidates[:k]:
            extended = Hypothesis(hyp.tokens + [token], score)
            if token == eos:
                completed.append(extended)
            else:
                live.append((extended, next_state))
        if not live:
            break

    for hyp, _ in live:
        hyp.truncated = True
        completed.append(hyp)
    return max(completed, key=lambda hyp: hyp.score)


def asr_nll_loss(probs, targets, mask=None):
    """
    Mean negative log-likelihood of the targets (padding excluded).

    :param probs: Per-step probability vectors, as a list or a ``(T, C)`` tensor.
    :param targets: Target ids, length ``T``.
    :type targets: list
    :rtype: Tensor
    """
    if isinstance(probs, (list, tuple)):
        if len(probs) != len(targets):
            raise InvalidArgumentError(
                "got {} probability vectors for {} targets".format(
                    len(probs), len(targets)
                )
            )
        probs = stack(probs)
    elif probs.shape[0] != len(targets):
        raise InvalidArgumentError(
            "got {} probability vectors for {} targets".format(
                probs.shape[0], len(targets)
            )
        )
    return masked_cross_entropy(probs, targets, mask=mask, eps=1e-12)


class ASR(Module):
    """
    The recognizer.

    :param cfg: Model dimensions and attention kind.
    :type cfg: ChainConfig
    :param rng: Generator used for parameter initialization.
    """

    def __init__(self, cfg, rng):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.eos = cfg.vocab_size - 1
        self.mel_dim = cfg.mel_dim
        enc_dim = 2 * cfg.enc_hidden

        self.encoder = []
        input_dim = cfg.mel_dim
        for index in range(ENCODER_LAYERS):
            layer = BiLSTM(input_dim, cfg.enc_hidden, rng)
            self.encoder.append(self.child("encoder.{}".format(index), layer))
            input_dim = enc_dim

        self.embedding = self.param(
            "embedding", (cfg.vocab_size, cfg.emb_dim), rng, fan_in=cfg.emb_dim
        )
        self.decoder = self.child(
            "decoder", LSTM(cfg.emb_dim + enc_dim, cfg.dec_hidden, rng)
        )
        self.attention = self.child(
            "attention",
            Attention(cfg.score_kind, enc_dim, cfg.dec_hidden, cfg.att_dim, rng),
        )
        self.output = self.child(
            "output", Linear(cfg.dec_hidden + enc_dim, cfg.vocab_size, rng)
        )
        self.enc_dim = enc_dim

    def encode(self, features):
        """
        :param features: An utterance's features, or its ``(S, D_M)`` mel array.
        :rtype: EncodedSpeech
        """
        mel = features.mel if isinstance(features, FeatureSequence) else features
        mel = mel.data if isinstance(mel, Tensor) else np.asarray(mel, dtype=np.float64)
        if mel.ndim != 2 or mel.shape[1] != self.mel_dim:
            raise ShapeError(
                "features do not match the configured mel width", mel.shape
            )
        if mel.shape[0] < MIN_FRAMES:
            raise SequenceTooShortError(
                "need at least {} frames, got {}".format(MIN_FRAMES, mel.shape[0])
            )

        states = Tensor(mel)
        for layer in self.encoder:
            states = subsample(layer(states))
        return EncodedSpeech(states, mel.shape[0], states.shape[0])

    def initial_state(self):
        h, c = self.decoder.initial_state()
        return DecoderState(h, c, Tensor(np.zeros(self.enc_dim)))

    def decode_step(self, prev, state, encoded):
        """
        One decoder step.

        The previous token enters as ``onehot @ embedding`` so gradients can
        reach the one-hot vector.

        :param prev: The previous token.
        :type prev: OneHotToken
        :rtype: tuple
        :returns: ``(logits (C,), DecoderState)``
        """
        vector = prev.vector
        if vector.shape != (self.vocab_size,):
            raise ShapeError(
                "token does not match the vocabulary", vector.shape, (self.vocab_size,)
            )
        embedded = vector @ self.embedding
        h, c = self.decoder.step(concat([embedded, state.context]), state.h, state.c)
        context, alignment = self.attention(encoded.states, h, encoded.mask)
        logits = self.output(concat([h, context]))
        return logits, DecoderState(h, c, context, state.step + 1, alignment)

    def max_length(self, encoded):
        return 2 * encoded.subsampled_length

    def generate(
        self,
        features,
        mode="teacher_forcing",
        tau=1.0,
        st_mode="none",
        targets=None,
        rng=None,
        beam_size=5,
    ):
        """
        Run the decoder and discretize every step for the chain.

        ``teacher_forcing`` conditions on ``targets`` and emits exactly
        ``len(targets)`` steps. ``greedy`` feeds back the argmax and ``sample``
        a categorical draw; both stop at eos or ``2 * S'`` steps. ``beam``
        returns the best hypothesis as detached tokens with no probabilities.

        :rtype: Generation
        """
        if mode not in GENERATION_MODES:
            raise InvalidArgumentError("unknown generation mode '{}'".format(mode))
        if mode == "teacher_forcing" and targets is None:
            raise InvalidArgumentError("teacher forcing requires ground-truth targets")
        if rng is None and (st_mode == "gumbel" or mode == "sample"):
            raise InvalidArgumentError(
                "{} generation needs a random generator".format(mode)
            )

        if mode == "beam":
            hyp = self.beam_search(features, beam_size)
            return Generation(
                tokens=[constant_token(t, self.vocab_size) for t in hyp.tokens],
                indices=list(hyp.tokens),
                truncated=hyp.truncated,
            )

        encoded = self.encode(features)
        state = self.initial_state()
        prev = constant_token(self.eos, self.vocab_size)
        limit = len(targets) if mode == "teacher_forcing" else self.max_length(encoded)
        out = Generation()
        for t in range(limit):
            logits, state = self.decode_step(prev, state, encoded)
            probs = temperature_softmax(logits, tau)

            if mode == "sample":
                if st_mode == "none":
                    index = int(categorical_from_uniform(probs.data, rng.random()))
                    token, drawn_from = constant_token(index, self.vocab_size), probs
                else:
                    token, drawn_from = st_gumbel_sample(probs, rng), probs
                index = token.class_index
            else:
                token, drawn_from = discretize(logits, probs, st_mode, tau, rng)
                index = int(np.argmax(probs.data))

            out.probs.append(probs)
            out.tokens.append(token)
            out.st_probs.append(drawn_from)
            out.alignments.append(state.alignment)

            if mode == "teacher_forcing":
                out.indices.append(token.class_index)
                prev = constant_token(targets[t], self.vocab_size)
                continue
            out.indices.append(index)
            if index == self.eos:
                break
            prev = constant_token(index, self.vocab_size)
        else:
            if mode != "teacher_forcing":
                out.truncated = True
                logger.warning(
                    "Decoding stopped at the {}-step limit without eos.".format(limit)
                )
        return out

    def beam_search(self, features, k):
        """
        :param features: The utterance to decode.
        :param k: Beam size; ``k=1`` reproduces greedy decoding.
        :type k: int
        :rtype: Hypothesis
        """
        if k < 1:
            raise InvalidArgumentError("beam size must be at least 1, got {}".format(k))
        with no_grad():
            encoded = self.encode(features)

            def step(state, token):
                prev = self.eos if token is None else token
                logits, next_state = self.decode_step(
                    constant_token(prev, self.vocab_size), state, encoded
                )
                return log_softmax(logits.data), next_state

            return beam_search(
                step, self.initial_state(), k, self.max_length(encoded), self.eos
            )
