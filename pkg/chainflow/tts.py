# -*- coding: utf-8 -*-
"""
Attention-based synthesizer.

Consumes one-hot token vectors (so a straight-through estimator upstream keeps
its gradient path) and emits mel frames, linear frames and end-of-utterance
probabilities, four frames per decoder step.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from asr import Attention
from estimators import OneHotToken
from exceptions import InvalidArgumentError, ShapeError
from layers import BiLSTM, LSTM, Linear, Module
from tensor import (
    Tensor,
    as_tensor,
    binary_cross_entropy,
    concat,
    leaky_relu,
    sigmoid,
    squared_error,
    stack,
)

logger = logging.getLogger("chainflow")

REDUCTION = 4


@dataclass
class SpeakerEmbedding:
    vector: Tensor
    speaker_id: int = 0


@dataclass
class TtsOutput:
    mel: Tensor
    linear: Tensor
    stop: Tensor
    alignments: list = field(default_factory=list)

    @property
    def n_frames(self):
        return self.mel.shape[0]

    @property
    def n_steps(self):
        return self.n_frames // REDUCTION


class Prenet(Module):
    def __init__(self, input_dim, size, rng, slope=0.01):
        super().__init__()
        self.slope = slope
        self.first = self.child("0", Linear(input_dim, size, rng))
        self.second = self.child("1", Linear(size, size, rng))

    def __call__(self, frame):
        hidden = leaky_relu(self.first(frame), self.slope)
        return leaky_relu(self.second(hidden), self.slope)


class TTS(Module):
    """
    The synthesizer.

    :param cfg: Model dimensions and speaker count.
    :type cfg: ChainConfig
    :param rng: Generator used for parameter initialization.
    """

    def __init__(self, cfg, rng):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.mel_dim = cfg.mel_dim
        self.lin_dim = cfg.lin_dim
        self.n_speakers = cfg.n_speakers
        text_dim = 2 * cfg.tts_enc_hidden
        self.text_dim = text_dim

        self.embedding = self.param(
            "embedding", (cfg.vocab_size, cfg.tts_emb_dim), rng, fan_in=cfg.tts_emb_dim
        )
        self.encoder = self.child(
            "encoder", BiLSTM(cfg.tts_emb_dim, cfg.tts_enc_hidden, rng)
        )
        self.speakers = self.param(
            "speakers", (cfg.n_speakers, cfg.speaker_dim), rng, fan_in=cfg.speaker_dim
        )
        self.prenet = self.child(
            "prenet", Prenet(cfg.mel_dim, cfg.prenet_dim, rng, cfg.lrelu_slope)
        )
        self.attention_rnn = self.child(
            "attention_rnn",
            LSTM(cfg.prenet_dim + text_dim + cfg.speaker_dim, cfg.tts_dec_hidden, rng),
        )
        self.decoder_rnn = self.child(
            "decoder_rnn", LSTM(cfg.tts_dec_hidden, cfg.tts_dec_hidden, rng)
        )
        self.attention = self.child(
            "attention",
            Attention("mlp", text_dim, cfg.tts_dec_hidden, cfg.tts_att_dim, rng),
        )
        head_dim = cfg.tts_dec_hidden + text_dim
        self.mel_head = self.child(
            "mel_head", Linear(head_dim, REDUCTION * cfg.mel_dim, rng)
        )
        self.lin_head = self.child(
            "lin_head", Linear(head_dim, REDUCTION * cfg.lin_dim, rng)
        )
        self.stop_head = self.child("stop_head", Linear(head_dim, REDUCTION, rng))

    def speaker(self, speaker_id=0):
        if not 0 <= speaker_id < self.n_speakers:
            raise InvalidArgumentError(
                "speaker {} is outside 0..{}".format(speaker_id, self.n_speakers - 1)
            )
        return SpeakerEmbedding(self.speakers[speaker_id], speaker_id)

    def encode_text(self, tokens):
        """
        Encode a token sequence.

        :param tokens: One-hot tokens (or ``(C,)`` tensors, or a ``(T, C)``
            tensor). Their rows multiply the embedding matrix, so gradients
            reach every input vector.
        :type tokens: list
        :rtype: Tensor
        :returns: Text states ``(T, 2H)``.
        """
        if isinstance(tokens, Tensor):
            matrix = tokens
        else:
            if len(tokens) == 0:
                raise InvalidArgumentError("cannot synthesize an empty token sequence")
            rows = [
                t.vector if isinstance(t, OneHotToken) else as_tensor(t)
                for t in tokens
            ]
            matrix = stack(rows)
        if matrix.ndim != 2 or matrix.shape[0] == 0:
            raise InvalidArgumentError("cannot synthesize an empty token sequence")
        if matrix.shape[1] != self.vocab_size:
            raise ShapeError(
                "tokens do not match the vocabulary", matrix.shape, (self.vocab_size,)
            )
        return self.encoder(matrix @ self.embedding)

    def decode(self, text_states, speaker, target):
        """
        Teacher-forced decoding against ``target``.

        Step ``k`` consumes the last ground-truth frame of group ``k - 1``
        (a zero frame at ``k = 0``) and emits frames ``4k .. 4k + 3``.

        :param text_states: Output of :meth:`encode_text`.
        :type text_states: Tensor
        :param speaker: Speaker vector concatenated into every decoder input.
        :type speaker: SpeakerEmbedding
        :param target: Ground-truth mel frames ``(S, D_M)``; ``S`` a positive
            multiple of 4.
        :rtype: TtsOutput
        """
        if isinstance(target, Tensor):
            target = target.data
        target = np.asarray(target, dtype=np.float64)
        if target.ndim != 2 or target.shape[1] != self.mel_dim:
            raise ShapeError(
                "target does not match the configured mel width", target.shape
            )
        frames = target.shape[0]
        if frames == 0 or frames % REDUCTION:
            raise InvalidArgumentError(
                "target length {} is not a positive multiple of {}".format(
                    frames, REDUCTION
                )
            )

        h1, c1 = self.attention_rnn.initial_state()
        h2, c2 = self.decoder_rnn.initial_state()
        context = Tensor(np.zeros(self.text_dim))
        previous = np.zeros(self.mel_dim)

        mel, linear, stop, alignments = [], [], [], []
        for step in range(frames // REDUCTION):
            inputs = concat([self.prenet(Tensor(previous)), context, speaker.vector])
            h1, c1 = self.attention_rnn.step(inputs, h1, c1)
            h2, c2 = self.decoder_rnn.step(h1, h2, c2)
            context, alignment = self.attention(text_states, h2)
            features = concat([h2, context])

            mel.append(self.mel_head(features).reshape(REDUCTION, self.mel_dim))
            linear.append(self.lin_head(features).reshape(REDUCTION, self.lin_dim))
            stop.append(self.stop_head(features))
            alignments.append(alignment)
            previous = target[REDUCTION * step + REDUCTION - 1]

        return TtsOutput(
            concat(mel, axis=0),
            concat(linear, axis=0),
            sigmoid(concat(stop)),
            alignments,
        )

    def synthesize(self, tokens, target, speaker_id=0):
        return self.decode(self.encode_text(tokens), self.speaker(speaker_id), target)


def tts_full_loss(out, mel, linear, stop):
    """
    Synthesizer training loss: per-frame mean squared error on both feature
    streams plus binary cross-entropy on the stop flags, averaged over frames.

    :rtype: Tensor
    """
    mel, linear, stop = as_tensor(mel), as_tensor(linear), as_tensor(stop)
    for predicted, expected in ((out.mel, mel), (out.linear, linear), (out.stop, stop)):
        if predicted.shape != expected.shape:
            raise ShapeError(
                "synthesizer output differs from target",
                predicted.shape,
                expected.shape,
            )
    return (
        squared_error(out.mel, mel, reduction="mean")
        + squared_error(out.linear, linear, reduction="mean")
        + binary_cross_entropy(out.stop, stop, eps=1e-7)
    )


def tts_recon_loss(predicted, target):
    """
    Reconstruction loss: squared error summed over feature dimensions, averaged
    over frames.

    :param predicted: Reconstructed mel frames ``(S, D_M)``.
    :param target: Ground-truth mel frames ``(S, D_M)``.
    :rtype: Tensor
    """
    predicted, target = as_tensor(predicted), as_tensor(target)
    if predicted.ndim == 0 or target.ndim == 0 or predicted.shape[0] != target.shape[0]:
        raise InvalidArgumentError(
            "reconstruction has {} frames, target has {}".format(
                predicted.shape[:1], target.shape[:1]
            )
        )
    return squared_error(predicted, target, reduction="sum")
