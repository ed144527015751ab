# -*- coding: utf-8 -*-
"""
Synthetic paired corpus: text drawn as random pseudo-words, features built
from one prototype vector per symbol plus Gaussian noise.
"""
import json
import logging
import os
import string
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from exceptions import (
    CheckpointError,
    ConfigError,
    InvalidArgumentError,
    VocabularyError,
)
from records import FeatureSequence, Utterance, format_key_values, parse_key_values
from tensor import load_arrays, save_arrays

logger = logging.getLogger("chainflow")

EOS = "<eos>"
NOISE = "~"
FULL_SYMBOLS = tuple(string.ascii_lowercase) + ("'", ".", "-", " ", NOISE, EOS)
SPLITS = ("train", "dev", "test")
REDUCTION = 4
MIN_FRAMES = 8
MANIFEST = "manifest.jsonl"
SPEC_FILE = "spec.txt"
STATS_FILE = "stats.ckpt"
FEATURE_DIR = "features"


class Vocabulary:
    """
    Bijective symbol/id map whose last id is the end-of-sequence symbol.

    :param symbols: Symbols in id order; the last must be ``<eos>``.
    :type symbols: tuple
    """

    def __init__(self, symbols):
        symbols = tuple(symbols)
        if len(set(symbols)) != len(symbols):
            raise VocabularyError("vocabulary symbols must be unique")
        if not symbols or symbols[-1] != EOS:
            raise VocabularyError("the last vocabulary symbol must be {}".format(EOS))
        self.symbols = symbols
        self.ids = {symbol: index for index, symbol in enumerate(symbols)}

    @classmethod
    def full(cls):
        return cls(FULL_SYMBOLS)

    @classmethod
    def restricted(cls, n_letters=12):
        if not 1 <= n_letters <= 26:
            raise InvalidArgumentError(
                "n_letters must be in 1..26, got {}".format(n_letters)
            )
        return cls(tuple(string.ascii_lowercase[:n_letters]) + (" ", EOS))

    @property
    def size(self):
        return len(self.symbols)

    def __len__(self):
        return self.size

    @property
    def eos(self):
        return self.size - 1

    @property
    def letters(self):
        return [s for s in self.symbols if s in string.ascii_lowercase]

    def encode(self, text):
        ids = []
        for char in text:
            if char not in self.ids or char == EOS:
                raise VocabularyError(
                    "symbol {!r} is not in the vocabulary".format(char)
                )
            ids.append(self.ids[char])
        return ids

    def targets(self, text):
        """Token ids of ``text`` followed by eos."""
        return self.encode(text) + [self.eos]

    def decode(self, ids):
        """Text for ``ids``, stopping at the first eos."""
        chars = []
        for index in ids:
            index = int(index)
            if not 0 <= index < self.size:
                raise VocabularyError("id {} is not in the vocabulary".format(index))
            if index == self.eos:
                break
            chars.append(self.symbols[index])
        return "".join(chars)


@dataclass(frozen=True)
class SynthSpec:
    mel_dim: int = 8
    lin_dim: int = 20
    frames_per_token: int = 4
    sigma: float = 0.1
    seed: int = 0
    n_letters: int = 12
    min_words: int = 1
    max_words: int = 3
    min_word_len: int = 2
    max_word_len: int = 4
    n_speakers: int = 1
    speaker_scale: float = 0.5

    def validate(self):
        if self.frames_per_token < 1:
            raise ConfigError("frames_per_token must be at least 1")
        if self.sigma < 0 or self.speaker_scale < 0:
            raise ConfigError("sigma and speaker_scale must be non-negative")
        if self.mel_dim < 1 or self.lin_dim < 1 or self.n_speakers < 1:
            raise ConfigError("mel_dim, lin_dim and n_speakers must be positive")
        if not 1 <= self.n_letters <= 26:
            raise ConfigError("n_letters must be in 1..26")
        if not 1 <= self.min_words <= self.max_words:
            raise ConfigError("word count range is empty")
        if not 1 <= self.min_word_len <= self.max_word_len:
            raise ConfigError("word length range is empty")
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

    def vocabulary(self):
        return Vocabulary.restricted(self.n_letters)


@dataclass(frozen=True)
class SynthTables:
    prototypes: np.ndarray
    expansion: np.ndarray
    speaker_offsets: np.ndarray


def smooth_expansion(mel_dim, lin_dim):
    """
    Fixed ``(mel_dim, lin_dim)`` matrix of Gaussian bumps mapping each mel
    dimension onto a neighbourhood of linear dimensions.
    """
    centers = np.linspace(0.0, 1.0, mel_dim)[:, None]
    positions = np.linspace(0.0, 1.0, lin_dim)[None, :]
    width = 1.0 / max(mel_dim, 2)
    return np.exp(-((positions - centers) ** 2) / (2.0 * width**2))


def min_pairwise_distance(vectors):
    diff = vectors[:, None, :] - vectors[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    np.fill_diagonal(dist, np.inf)
    return float(dist.min())


@lru_cache(maxsize=16)
def synth_tables(spec, max_attempts=100):
    """
    Prototypes, linear expansion and speaker offsets for ``spec``.

    Prototypes are redrawn until every pair is more than ``4 * sigma`` apart.
    """
    rng = np.random.default_rng(spec.seed)
    size = spec.vocabulary().size
    for _ in range(max_attempts):
        prototypes = rng.standard_normal((size, spec.mel_dim))
        if min_pairwise_distance(prototypes) > 4.0 * spec.sigma:
            break
    else:
        raise InvalidArgumentError(
            "could not draw prototypes more than {} apart".format(4.0 * spec.sigma)
        )
    offsets = spec.speaker_scale * rng.standard_normal((spec.n_speakers, spec.mel_dim))
    offsets[0] = 0.0
    expansion = smooth_expansion(spec.mel_dim, spec.lin_dim)
    return SynthTables(prototypes, expansion, offsets)


def padded_length(frames):
    return max(MIN_FRAMES, -(-frames // REDUCTION) * REDUCTION)


def synth_utterance(text, spec, rng, speaker=0, noiseless=False):
    """
    Synthesize the features of one utterance.

    Every token contributes ``frames_per_token`` frames of its prototype plus
    ``N(0, sigma^2)`` noise. The sequence is zero-padded to a multiple of 4
    (and to at least 8 frames, the encoder's minimum), the linear stream is
    the mel stream times :func:`smooth_expansion`, and the stop flag is set
    on the final frame only.

    :param text: A string or a list of token ids (without eos).
    :param spec: Corpus parameters.
    :type spec: SynthSpec
    :param rng: Noise generator.
    :param speaker: Speaker id, offsetting every frame.
    :type speaker: int
    :param noiseless: Skip the noise even when ``spec.sigma`` is positive.
    :type noiseless: bool
    :rtype: FeatureSequence
    """
    vocab = spec.vocabulary()
    tokens = vocab.encode(text) if isinstance(text, str) else [int(t) for t in text]
    if not tokens:
        raise InvalidArgumentError("cannot synthesize an empty utterance")
    for token in tokens:
        if not 0 <= token < vocab.eos:
            raise VocabularyError("token id {} is not a text symbol".format(token))
    if not 0 <= speaker < spec.n_speakers:
        raise InvalidArgumentError("speaker {} is out of range".format(speaker))

    tables = synth_tables(spec)
    frames = np.repeat(tables.prototypes[tokens], spec.frames_per_token, axis=0)
    frames = frames + tables.speaker_offsets[speaker]
    if spec.sigma > 0 and not noiseless:
        frames = frames + spec.sigma * rng.standard_normal(frames.shape)

    mel = np.zeros((padded_length(frames.shape[0]), spec.mel_dim))
    mel[: frames.shape[0]] = frames
    stop = np.zeros(mel.shape[0])
    stop[-1] = 1.0
    return FeatureSequence(mel, mel @ tables.expansion, stop)


def split_sizes(n_utterances):
    held_out = max(1, int(round(0.1 * n_utterances)))
    return n_utterances - 2 * held_out, held_out, held_out


def random_text(rng, spec, letters):
    words = []
    for _ in range(int(rng.integers(spec.min_words, spec.max_words + 1))):
        length = int(rng.integers(spec.min_word_len, spec.max_word_len + 1))
        picks = rng.integers(0, len(letters), size=length)
        words.append("".join(letters[i] for i in picks))
    return " ".join(words)


@dataclass
class Corpus:
    train: list
    dev: list
    test: list
    spec: SynthSpec
    stats: object = None

    @property
    def vocabulary(self):
        return self.spec.vocabulary()

    def split(self, name):
        if name not in SPLITS:
            raise InvalidArgumentError("unknown split '{}'".format(name))
        return getattr(self, name)

    def sizes(self):
        return {name: len(self.split(name)) for name in SPLITS}

    def utterances(self):
        return self.train + self.dev + self.test


def gen_corpus(n_utterances, spec=None, seed=0):
    """
    Generate a corpus and split it 80/10/10 (at least one utterance in each
    held-out split).

    Texts, split assignment and each utterance's noise come from independent
    streams spawned from ``seed``.

    :rtype: Corpus
    """
    if n_utterances < 3:
        raise InvalidArgumentError(
            "need at least 3 utterances for three splits, got {}".format(n_utterances)
        )
    spec = (spec or SynthSpec()).validate()
    vocab = spec.vocabulary()
    text_seed, split_seed, *utterance_seeds = np.random.SeedSequence(seed).spawn(
        n_utterances + 2
    )
    text_rng = np.random.default_rng(text_seed)

    utterances = []
    for index in range(n_utterances):
        text = random_text(text_rng, spec, vocab.letters)
        speaker = index % spec.n_speakers
        features = synth_utterance(
            text, spec, np.random.default_rng(utterance_seeds[index]), speaker
        )
        utterances.append(
            Utterance(
                "utt{:05d}".format(index), text, vocab.targets(text), features, speaker
            )
        )

    order = np.random.default_rng(split_seed).permutation(n_utterances)
    n_train, n_dev, _ = split_sizes(n_utterances)
    n_held = n_train + n_dev
    bounds = (order[:n_train], order[n_train:n_held], order[n_held:])
    train, dev, test = ([utterances[i] for i in sorted(part)] for part in bounds)
    logger.info(
        "Generated {} utterances ({}/{}/{}).".format(
            n_utterances, len(train), len(dev), len(test)
        )
    )
    return Corpus(train, dev, test, spec)


# ============================================
# Normalization
# ============================================


def _moments(frames, stream):
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    flat = np.nonzero(std == 0)[0]
    if flat.size:
        logger.warning(
            "Dimension(s) {} of the {} stream have zero variance; "
            "using a unit divisor.".format(flat.tolist(), stream)
        )
        std[flat] = 1.0
    return mean, std


@dataclass
class NormStats:
    mel_mean: np.ndarray
    mel_std: np.ndarray
    lin_mean: np.ndarray
    lin_std: np.ndarray

    @classmethod
    def estimate(cls, utterances):
        """Per-dimension mean and (population) standard deviation."""
        if not utterances:
            raise InvalidArgumentError("cannot estimate statistics of an empty split")
        mel = np.concatenate([u.features.mel for u in utterances])
        lin = np.concatenate([u.features.linear for u in utterances])
        if mel.shape[0] < 2:
            raise InvalidArgumentError("need at least 2 frames to estimate statistics")
        return cls(*_moments(mel, "mel"), *_moments(lin, "linear"))

    def apply(self, features):
        return FeatureSequence(
            (features.mel - self.mel_mean) / self.mel_std,
            (features.linear - self.lin_mean) / self.lin_std,
            features.stop,
        )

    def invert(self, features):
        return FeatureSequence(
            features.mel * self.mel_std + self.mel_mean,
            features.linear * self.lin_std + self.lin_mean,
            features.stop,
        )

    def save(self, path):
        save_arrays(
            path,
            {
                "mel_mean": self.mel_mean,
                "mel_std": self.mel_std,
                "lin_mean": self.lin_mean,
                "lin_std": self.lin_std,
            },
        )

    @classmethod
    def load(cls, path):
        arrays = load_arrays(path)
        try:
            return cls(
                arrays["mel_mean"],
                arrays["mel_std"],
                arrays["lin_mean"],
                arrays["lin_std"],
            )
        except KeyError as err:
            raise CheckpointError("{} is missing {}".format(path, err))


def normalize_corpus(corpus, stats=None):
    """
    Standardize every split with statistics of the training split.

    :param stats: Previously saved statistics to re-apply instead of
        estimating new ones.
    :rtype: tuple
    :returns: ``(normalized Corpus, NormStats)``
    """
    stats = stats or NormStats.estimate(corpus.train)

    def apply(utterances):
        return [replace(u, features=stats.apply(u.features)) for u in utterances]

    normalized = Corpus(
        apply(corpus.train), apply(corpus.dev), apply(corpus.test), corpus.spec, stats
    )
    return normalized, stats


def denormalize(features, stats):
    return stats.invert(features)


def noiseless_split(corpus, name):
    """
    Re-synthesize a split from its texts without noise, using the corpus
    prototypes and speakers and, when the corpus is normalized, its stats.

    :rtype: list
    """
    clean = []
    for utt in corpus.split(name):
        features = synth_utterance(
            utt.text, corpus.spec, None, utt.speaker, noiseless=True
        )
        if corpus.stats is not None:
            features = corpus.stats.apply(features)
        clean.append(replace(utt, features=features))
    return clean


# ============================================
# Corpus on disk
# ============================================


def write_corpus(corpus, out_dir):
    """
    Write raw features, the manifest, the synthesis parameters and the
    training-split statistics under ``out_dir``.

    :rtype: str
    :returns: Path of the manifest.
    """
    os.makedirs(os.path.join(out_dir, FEATURE_DIR), exist_ok=True)
    lines = []
    for name in SPLITS:
        for utt in corpus.split(name):
            mel_path = os.path.join(FEATURE_DIR, utt.id + ".mel.ckpt")
            lin_path = os.path.join(FEATURE_DIR, utt.id + ".lin.ckpt")
            save_arrays(
                os.path.join(out_dir, mel_path),
                {"mel": utt.features.mel, "stop": utt.features.stop},
            )
            save_arrays(
                os.path.join(out_dir, lin_path), {"linear": utt.features.linear}
            )
            entry = {
                "id": utt.id,
                "text": utt.text,
                "mel_path": mel_path,
                "lin_path": lin_path,
                "n_frames": utt.features.n_frames,
                "split": name,
                "speaker": utt.speaker,
            }
            lines.append(json.dumps(entry, sort_keys=True))

    manifest = os.path.join(out_dir, MANIFEST)
    with open(manifest, "w") as handle:
        handle.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, SPEC_FILE), "w") as handle:
        handle.write(corpus.spec.to_text())
    NormStats.estimate(corpus.train).save(os.path.join(out_dir, STATS_FILE))
    logger.info("Wrote {} utterances to {}.".format(len(lines), out_dir))
    return manifest


def read_manifest(data_dir):
    with open(os.path.join(data_dir, MANIFEST)) as handle:
        return [json.loads(line) for line in handle if line.strip()]


def load_corpus(data_dir, normalize=True):
    """
    Load a corpus written by :func:`write_corpus`.

    :param normalize: Apply the saved training-split statistics.
    :rtype: Corpus
    """
    spec = SynthSpec.from_file(os.path.join(data_dir, SPEC_FILE))
    vocab = spec.vocabulary()
    splits = {name: [] for name in SPLITS}
    for entry in read_manifest(data_dir):
        mel = load_arrays(os.path.join(data_dir, entry["mel_path"]))
        lin = load_arrays(os.path.join(data_dir, entry["lin_path"]))
        try:
            features = FeatureSequence(mel["mel"], lin["linear"], mel["stop"])
        except KeyError as err:
            raise CheckpointError(
                "feature file for {} is missing {}".format(entry["id"], err)
            )
        if features.n_frames != entry["n_frames"]:
            raise CheckpointError(
                "feature file for {} has the wrong length".format(entry["id"])
            )
        utt = Utterance(
            entry["id"],
            entry["text"],
            vocab.targets(entry["text"]),
            features,
            entry.get("speaker", 0),
        )
        splits[entry["split"]].append(utt)

    corpus = Corpus(splits["train"], splits["dev"], splits["test"], spec)
    if normalize:
        stats = NormStats.load(os.path.join(data_dir, STATS_FILE))
        corpus, _ = normalize_corpus(corpus, stats)
    return corpus
