# -*- coding: utf-8 -*-
"""
The speech chain: recognizer output is discretized, synthesized back into
features, and the reconstruction error trains both modules.
"""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from asr import ASR, asr_nll_loss
from data import noiseless_split
from estimators import constant_token, make_rng
from exceptions import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    InvalidArgumentError,
    NumericInputError,
)
from layers import Module
from optim import Adam, clip_grad_norm
from records import ChainConfig, EpochRecord, TrainReport
from tensor import backward, load_arrays, save_arrays
from tts import TTS, tts_full_loss, tts_recon_loss
from utils import array_to_text, character_error_rate, text_to_array

logger = logging.getLogger("chainflow")

METRICS_FILE = "metrics.jsonl"
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"
DIVERGENCE_FILE = "divergence.json"


class SpeechChain(Module):
    """
    Recognizer and synthesizer sharing one parameter namespace
    (``asr.*`` and ``tts.*``).
    """

    def __init__(self, cfg, rng=None):
        super().__init__()
        self.cfg = cfg
        rng = rng if rng is not None else make_rng(cfg.seed)
        self.asr = self.child("asr", ASR(cfg, rng))
        self.tts = self.child("tts", TTS(cfg, rng))

    def trainable_parameters(self):
        named = self.asr.named_parameters("asr.")
        if not self.cfg.freeze_tts:
            named.update(self.tts.named_parameters("tts."))
        return named


@dataclass
class StepResult:
    l_asr: float
    l_rec: float
    l_tts: float
    l_total: float
    grad_norm_asr_from_rec: float = 0.0
    indices: list = field(default_factory=list)
    truncated: bool = False


def chain_step(model, utterance, cfg, rng, train=True):
    """
    One pass of the chain over a paired utterance.

    The recognizer generates (teacher-forced or greedy) and every step is
    discretized per ``cfg.st_mode``; the synthesizer reconstructs the
    ground-truth mel frames from those tokens. ``L^F = asr_weight * L_ASR +
    rec_weight * L_rec``. When ``train`` is set, gradients of ``L^F`` plus
    ``tts_weight * L_TTS`` (the synthesizer's own loss on the true text,
    unless frozen) are accumulated into the parameters, and the norm of the
    recognizer gradient owed to ``L_rec`` alone is measured.

    :param utterance: Features plus target ids ending in eos.
    :type utterance: Utterance
    :param cfg: Modes, temperature and loss weights.
    :type cfg: ChainConfig
    :param rng: Generator for Gumbel noise and sampling.
    :rtype: StepResult
    """
    asr, tts = model.asr, model.tts
    features, targets = utterance.features, utterance.tokens

    if cfg.generation_mode == "teacher_forcing":
        generated = asr.generate(
            features, "teacher_forcing", cfg.tau, cfg.st_mode, targets=targets, rng=rng
        )
        l_asr = asr_nll_loss(generated.probs, targets)
    else:
        generated = asr.generate(features, "greedy", cfg.tau, cfg.st_mode, rng=rng)
        forced = asr.generate(
            features, "teacher_forcing", cfg.tau, "none", targets=targets
        )
        l_asr = asr_nll_loss(forced.probs, targets)

    speaker = tts.speaker(utterance.speaker)
    text_states = tts.encode_text(generated.tokens)
    reconstruction = tts.decode(text_states, speaker, features.mel)
    l_rec = tts_recon_loss(reconstruction.mel, features.mel)
    l_total = cfg.asr_weight * l_asr + cfg.rec_weight * l_rec

    truth = [constant_token(t, cfg.vocab_size) for t in targets]
    synthesized = tts.synthesize(truth, features.mel, utterance.speaker)
    l_tts = tts_full_loss(synthesized, features.mel, features.linear, features.stop)

    result = StepResult(
        l_asr.item(),
        l_rec.item(),
        l_tts.item(),
        l_total.item(),
        indices=generated.indices,
        truncated=generated.truncated,
    )
    if not all(math.isfinite(v) for v in (result.l_asr, result.l_rec, result.l_tts)):
        raise DivergenceError("non-finite loss on utterance {}".format(utterance.id))
    if not train:
        return result

    params = model.parameters()
    saved = [p.grad for p in params]
    contributions = backward(l_rec)
    for tensor, grad in zip(params, saved):
        tensor.grad = grad
    result.grad_norm_asr_from_rec = math.sqrt(
        sum(
            float(np.sum(contributions[p] ** 2))
            for p in asr.parameters()
            if p in contributions
        )
    )

    objective = l_total
    if cfg.tts_weight > 0 and not cfg.freeze_tts:
        objective = objective + cfg.tts_weight * l_tts
    backward(objective)
    return result


# ============================================
# Evaluation
# ============================================


@dataclass
class Evaluation:
    cer: float
    ids: list
    references: list
    hypotheses: list


def evaluate_cer(asr, utterances, vocabulary, beam_size=5):
    """
    Beam-decode every utterance and score the transcripts.

    :rtype: Evaluation
    """
    if not utterances:
        raise InvalidArgumentError("cannot evaluate an empty dataset")
    references, hypotheses = [], []
    for utt in utterances:
        best = asr.beam_search(utt.features, beam_size)
        references.append(utt.text)
        hypotheses.append(vocabulary.decode(best.tokens))
    return Evaluation(
        character_error_rate(references, hypotheses),
        [u.id for u in utterances],
        references,
        hypotheses,
    )


# ============================================
# Checkpoints
# ============================================


def save_checkpoint(path, model, optimizer=None, epoch=0, report=None):
    arrays = model.state_dict()
    if optimizer is not None:
        arrays.update(optimizer.state_dict())
    arrays["meta.config"] = text_to_array(model.cfg.to_text())
    arrays["meta.epoch"] = np.array([float(epoch)])
    if report is not None:
        arrays["meta.best_epoch"] = np.array([float(report.best_epoch)])
        arrays["meta.best_cer"] = np.array([report.best_cer])
    save_arrays(path, arrays)
    logger.debug("Wrote checkpoint {} (epoch {}).".format(path, epoch))


def load_checkpoint(path):
    """
    Rebuild a model from a checkpoint.

    :rtype: tuple
    :returns: ``(SpeechChain, all stored arrays)``
    """
    arrays = load_arrays(path)
    if "meta.config" not in arrays:
        raise CheckpointError("{} has no stored configuration".format(path))
    try:
        cfg = ChainConfig.from_text(array_to_text(arrays["meta.config"]))
    except (ConfigError, UnicodeDecodeError) as err:
        raise CheckpointError(
            "{} has an unreadable configuration: {}".format(path, err)
        )
    model = SpeechChain(cfg)
    model.load_state_dict(arrays)
    return model, arrays


# ============================================
# Training
# ============================================


def check_compatible(corpus, cfg):
    spec = corpus.spec
    if cfg.vocab_size != corpus.vocabulary.size:
        raise ConfigError(
            "vocab_size is {} but the corpus has {} symbols".format(
                cfg.vocab_size, corpus.vocabulary.size
            )
        )
    if cfg.mel_dim != spec.mel_dim or cfg.lin_dim != spec.lin_dim:
        raise ConfigError("feature widths differ from the corpus")
    if cfg.n_speakers < spec.n_speakers:
        raise ConfigError("corpus has {} speakers".format(spec.n_speakers))
    if not corpus.train or not corpus.dev:
        raise InvalidArgumentError("training needs non-empty train and dev splits")


def run_epoch(model, optimizer, corpus, cfg, epoch):
    """
    One pass over the training split in an order drawn from ``(seed, epoch)``.

    Gradients are summed over each batch, clipped, then applied.

    :rtype: EpochRecord
    """
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(corpus.train))
    params = list(optimizer.params.values())
    totals = np.zeros(5)

    for start in range(0, len(order), cfg.batch_size):
        model.zero_grad()
        for index in order[start : start + cfg.batch_size]:
            step = chain_step(model, corpus.train[index], cfg, rng)
            totals += (
                step.l_asr,
                step.l_rec,
                step.l_tts,
                step.l_total,
                step.grad_norm_asr_from_rec,
            )
        clip_grad_norm(params, cfg.clip_norm)
        optimizer.step()
    model.zero_grad()

    val = evaluate_cer(model.asr, corpus.dev, corpus.vocabulary, cfg.beam_size)
    means = totals / len(order)
    return EpochRecord(
        epoch,
        float(means[0]),
        float(means[1]),
        float(means[2]),
        float(means[3]),
        float(val.cer),
        float(means[4]),
    )


def _dump_divergence(out_dir, record, err):
    logger.error("Training diverged: {}".format(err))
    if out_dir is None:
        return
    payload = {"error": str(err), "last_good": asdict(record) if record else None}
    with open(os.path.join(out_dir, DIVERGENCE_FILE), "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)


def train(corpus, cfg, out_dir=None, resume=None):
    """
    Train the chain on ``corpus.train``, validating on ``corpus.dev``.

    With ``out_dir`` set, writes ``metrics.jsonl`` (one JSON object per
    epoch), ``last.ckpt`` after every epoch and ``best.ckpt`` whenever the
    validation CER improves. Both checkpoints are written before the first
    epoch, so a zero-epoch run still leaves the initial model behind.

    :param resume: Checkpoint to continue from; restores parameters, optimizer
        moments, epoch and best score.
    :type resume: str
    :raises DivergenceError: On a non-finite loss, carrying the last good
        epoch record.
    :rtype: TrainReport
    """
    cfg.validate()
    check_compatible(corpus, cfg)
    model = SpeechChain(cfg, make_rng(cfg.seed))
    optimizer = Adam(
        model.trainable_parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps
    )
    report = TrainReport(cfg, model=model)

    start = 0
    if resume:
        arrays = load_arrays(resume)
        model.load_state_dict(arrays)
        optimizer.load_state_dict(arrays)
        start = int(arrays["meta.epoch"][0])
        if "meta.best_cer" in arrays:
            report.best_epoch = int(arrays["meta.best_epoch"][0])
            report.best_cer = float(arrays["meta.best_cer"][0])
        logger.info("Resuming from {} after epoch {}.".format(resume, start))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, METRICS_FILE)
        if not resume:
            open(metrics_path, "w").close()
            for name in (LAST_CHECKPOINT, BEST_CHECKPOINT):
                path = os.path.join(out_dir, name)
                save_checkpoint(path, model, optimizer, 0, report)

    last_good = None
    for epoch in range(start, cfg.epochs):
        try:
            record = run_epoch(model, optimizer, corpus, cfg, epoch)
        except (DivergenceError, NumericInputError) as err:
            _dump_divergence(out_dir, last_good, err)
            raise DivergenceError("epoch {}: {}".format(epoch, err), last_good)
        if not all(math.isfinite(v) for v in (record.l_total, record.l_tts)):
            _dump_divergence(out_dir, last_good, "non-finite epoch loss")
            raise DivergenceError(
                "epoch {}: non-finite epoch loss".format(epoch), last_good
            )

        report.epochs.append(record)
        last_good = record
        improved = record.val_cer < report.best_cer
        if improved:
            report.best_epoch, report.best_cer = epoch, record.val_cer
        logger.info(
            "Epoch {}: L_ASR={:.5f} L_rec={:.5f} L_TTS={:.5f} L_F={:.5f} "
            "CER={:.4f}".format(
                epoch,
                record.l_asr,
                record.l_rec,
                record.l_tts,
                record.l_total,
                record.val_cer,
            )
        )

        if out_dir is not None:
            with open(metrics_path, "a") as handle:
                handle.write(json.dumps(record.metrics(cfg), sort_keys=True) + "\n")
            last = os.path.join(out_dir, LAST_CHECKPOINT)
            save_checkpoint(last, model, optimizer, epoch + 1, report)
            if improved:
                best = os.path.join(out_dir, BEST_CHECKPOINT)
                save_checkpoint(best, model, optimizer, epoch + 1, report)
    return report


# ============================================
# Ablation
# ============================================


def arm_configs(base_cfg, seed):
    """
    The two arms compared by the ablation: a detached baseline and
    teacher-forced straight-through Gumbel generation.

    :rtype: tuple
    """
    baseline = replace(base_cfg, st_mode="none", seed=seed)
    proposed = replace(
        base_cfg, st_mode="gumbel", generation_mode="teacher_forcing", seed=seed
    )
    return baseline, proposed


@dataclass
class AblationRow:
    seed: int
    baseline_cer: float
    proposed_cer: float
    baseline_clean_cer: float = float("nan")
    proposed_clean_cer: float = float("nan")

    @property
    def delta(self):
        return self.proposed_cer - self.baseline_cer


@dataclass
class AblationReport:
    rows: list

    @property
    def mean_baseline(self):
        return float(np.mean([r.baseline_cer for r in self.rows]))

    @property
    def mean_proposed(self):
        return float(np.mean([r.proposed_cer for r in self.rows]))

    @property
    def relative_change(self):
        if self.mean_baseline == 0:
            return float("nan")
        return (self.mean_proposed - self.mean_baseline) / self.mean_baseline

    @property
    def wins(self):
        """Seeds where the proposed arm is no worse than the baseline."""
        return sum(1 for r in self.rows if r.proposed_cer <= r.baseline_cer)

    @property
    def worst_clean_cer(self):
        """Highest noiseless dev CER of either arm over all seeds."""
        return float(
            max(max(r.baseline_clean_cer, r.proposed_clean_cer) for r in self.rows)
        )

    def table(self):
        header = "{:>6}  {:>10}  {:>10}  {:>8}  {:>10}  {:>10}"
        row_format = "{:>6}  {:>10.4f}  {:>10.4f}  {:>+8.4f}  {:>10.4f}  {:>10.4f}"
        lines = [
            header.format(
                "seed", "baseline", "proposed", "delta", "base_clean", "prop_clean"
            )
        ]
        for row in self.rows:
            lines.append(
                row_format.format(
                    row.seed,
                    row.baseline_cer,
                    row.proposed_cer,
                    row.delta,
                    row.baseline_clean_cer,
                    row.proposed_clean_cer,
                )
            )
        lines.append(
            "{:>6}  {:>10.4f}  {:>10.4f}  {:>+8.4f}".format(
                "mean",
                self.mean_baseline,
                self.mean_proposed,
                self.mean_proposed - self.mean_baseline,
            )
        )
        lines.append(
            "proposed <= baseline on {}/{} seeds; relative change {:+.1%}".format(
                self.wins, len(self.rows), self.relative_change
            )
        )
        lines.append("worst noiseless CER {:.4f}".format(self.worst_clean_cer))
        return "\n".join(lines)


def arm_cer(corpus, cfg):
    """
    Train one arm and score it on the dev split.

    :rtype: tuple
    :returns: ``(dev CER, noiseless dev CER)``. The first is the best
        validation CER seen during training; the second re-evaluates the
        trained model on the dev texts synthesized without noise.
    """
    report = train(corpus, cfg)
    asr = report.model.asr
    if report.epochs:
        cer = report.best_cer
    else:
        cer = evaluate_cer(asr, corpus.dev, corpus.vocabulary, cfg.beam_size).cer
    clean = evaluate_cer(
        asr, noiseless_split(corpus, "dev"), corpus.vocabulary, cfg.beam_size
    )
    return cer, clean.cer


def compare_arms(corpus, baseline_cfg, proposed_cfg):
    """
    Train both arms on the same data and initialization seed.

    :rtype: AblationRow
    """
    if baseline_cfg.seed != proposed_cfg.seed:
        raise InvalidArgumentError(
            "arms use different seeds ({} vs {})".format(
                baseline_cfg.seed, proposed_cfg.seed
            )
        )
    baseline_cer, baseline_clean = arm_cer(corpus, baseline_cfg)
    proposed_cer, proposed_clean = arm_cer(corpus, proposed_cfg)
    return AblationRow(
        baseline_cfg.seed, baseline_cer, proposed_cer, baseline_clean, proposed_clean
    )


def ablation_compare(corpus, base_cfg, seeds):
    """
    Run :func:`compare_arms` for every seed in order.

    :rtype: AblationReport
    """
    rows = []
    for seed in seeds:
        rows.append(compare_arms(corpus, *arm_configs(base_cfg, seed)))
        logger.info("Seed {} done.".format(seed))
    return AblationReport(rows)
