# -*- coding: utf-8 -*-
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from exceptions import ConfigError

TRUE_WORDS = ("true", "yes", "1")
FALSE_WORDS = ("false", "no", "0")


def _coerce(value, kind):
    if kind is bool:
        lowered = value.lower()
        if lowered in TRUE_WORDS:
            return True
        if lowered in FALSE_WORDS:
            return False
        raise ValueError(value)
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    return value


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_key_values(text, cls):
    """
    Build a dataclass instance from ``key = value`` lines.

    Every field of ``cls`` must have a default; its type decides how the value
    is parsed. ``#`` starts a comment.

    :param text: The file contents.
    :type text: str
    :param cls: Dataclass to instantiate.
    :type cls: type
    :raises ConfigError: On malformed lines, unknown keys or bad values.
    """
    defaults = cls()
    known = {f.name for f in fields(cls)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value', got '{}'".format(line), lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError("unknown key '{}'".format(key), lineno)
        try:
            values[key] = _coerce(value, type(getattr(defaults, key)))
        except ValueError:
            raise ConfigError("bad value for '{}': '{}'".format(key, value), lineno)
    return cls(**values)


def format_key_values(instance):
    return "".join(
        "{} = {}\n".format(f.name, _format(getattr(instance, f.name)))
        for f in fields(instance)
    )


@dataclass
class ChainConfig:
    # discretization and generation
    st_mode: str = "gumbel"
    generation_mode: str = "teacher_forcing"
    tau: float = 1.0
    score_kind: str = "mlp"
    # shared dimensions
    vocab_size: int = 14
    mel_dim: int = 8
    lin_dim: int = 20
    n_speakers: int = 1
    # asr
    enc_hidden: int = 32
    dec_hidden: int = 64
    emb_dim: int = 32
    att_dim: int = 32
    # tts
    tts_emb_dim: int = 32
    tts_enc_hidden: int = 32
    tts_dec_hidden: int = 64
    tts_att_dim: int = 32
    prenet_dim: int = 32
    speaker_dim: int = 8
    lrelu_slope: float = 0.01
    # optimisation
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    epochs: int = 30
    batch_size: int = 8
    asr_weight: float = 1.0
    rec_weight: float = 1.0
    tts_weight: float = 1.0
    freeze_tts: bool = False
    beam_size: int = 5

    def validate(self):
        if self.st_mode not in ("none", "argmax", "gumbel"):
            raise ConfigError("st_mode must be none, argmax or gumbel")
        if self.generation_mode not in ("teacher_forcing", "greedy"):
            raise ConfigError("generation_mode must be teacher_forcing or greedy")
        if self.score_kind not in ("dot", "bilinear", "mlp"):
            raise ConfigError("score_kind must be dot, bilinear or mlp")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.beam_size < 1:
            raise ConfigError("epochs, batch_size and beam_size are out of range")
        if self.vocab_size < 2 or self.n_speakers < 1:
            raise ConfigError("vocab_size and n_speakers are out of range")
        return self

    @classmethod
    def from_text(cls, text):
        return parse_key_values(text, cls).validate()

    @classmethod
    def from_file(cls, path):
        with open(path) as handle:
            return cls.from_text(handle.read())

    def to_text(self):
        return format_key_values(self)


@dataclass
class FeatureSequence:
    """
    Time-major features of one utterance: ``mel (S, D_M)``, ``linear
    (S, D_R)`` and per-frame stop labels ``stop (S,)``.
    """

    mel: np.ndarray
    linear: np.ndarray
    stop: np.ndarray

    @property
    def n_frames(self):
        return self.mel.shape[0]


@dataclass
class Utterance:
    id: str
    text: str
    tokens: list
    features: FeatureSequence
    speaker: int = 0


@dataclass
class EpochRecord:
    epoch: int
    l_asr: float
    l_rec: float
    l_tts: float
    l_total: float
    val_cer: float
    grad_norm_asr_from_rec: float

    def metrics(self, cfg):
        record = asdict(self)
        record.update(
            seed=cfg.seed,
            st_mode=cfg.st_mode,
            gen_mode=cfg.generation_mode,
            tau=cfg.tau,
        )
        return record


@dataclass
class TrainReport:
    config: ChainConfig
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_cer: float = float("inf")
    model: object = field(default=None, repr=False, compare=False)

    def metrics_lines(self):
        return [json.dumps(e.metrics(self.config), sort_keys=True) for e in self.epochs]


@dataclass
class RunManifest:
    config_text: str
    seed: int
    corpus_hash: str
    artifacts: dict
    version: str

    def write(self, path):
        with open(path, "w") as handle:
            json.dump(asdict(self), handle, indent=2, sort_keys=True)
            handle.write("\n")

    @classmethod
    def read(cls, path):
        with open(path) as handle:
            return cls(**json.load(handle))
