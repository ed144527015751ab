# -*- coding: utf-8 -*-
"""
Command-line entry point.

Exit codes: 0 success, 1 failed check or I/O error, 2 usage or
configuration error, 3 numeric abort.
"""
import functools
import logging
import os
from dataclasses import replace

import click
import config
from chain import (
    BEST_CHECKPOINT,
    LAST_CHECKPOINT,
    METRICS_FILE,
    evaluate_cer,
    load_checkpoint,
    train,
)
from data import SPLITS, SynthSpec, gen_corpus, load_corpus, write_corpus
from exceptions import (
    ChainflowException,
    CheckpointError,
    ConfigError,
    DivergenceError,
    InvalidArgumentError,
    NumericInputError,
    SequenceTooShortError,
    ShapeError,
    VocabularyError,
)
from gradcheck import run_checks
from jobs import run_ablation
from records import ChainConfig, RunManifest
from utils import corpus_hash

logger = logging.getLogger("chainflow")

EXIT_CHECK = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

USAGE_ERRORS = (
    ConfigError,
    InvalidArgumentError,
    SequenceTooShortError,
    ShapeError,
    VocabularyError,
)


def handle_errors(func):
    """Map package exceptions onto the exit-code contract."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return func(*args, **kwargs)
        except USAGE_ERRORS as err:
            click.echo("Error: {}".format(err), err=True)
            ctx.exit(EXIT_USAGE)
        except (DivergenceError, NumericInputError) as err:
            click.echo("Numeric abort: {}".format(err), err=True)
            ctx.exit(EXIT_NUMERIC)
        except (ChainflowException, OSError) as err:
            click.echo("Error: {}".format(err), err=True)
            ctx.exit(EXIT_CHECK)

    return wrapper


def load_config(path):
    if path is None:
        return ChainConfig().validate()
    return ChainConfig.from_file(path)


def parse_tau_grid(value):
    try:
        taus = [float(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(
            "expected comma-separated numbers", param_hint="--tau-grid"
        )
    if not taus or any(tau <= 0 for tau in taus):
        raise click.BadParameter(
            "temperatures must be positive", param_hint="--tau-grid"
        )
    return taus


@click.group()
@click.version_option(config.VERSION, prog_name="chainflow")
def cli():
    """Speech chain experiments on synthetic paired data."""


@cli.command("gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--n", "n_utterances", default=200, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False))
@handle_errors
def gen_data(out_dir, n_utterances, seed, spec_path):
    """Generate a synthetic corpus and its manifest."""
    if n_utterances < 3:
        raise click.BadParameter("need at least 3 utterances", param_hint="--n")
    spec = SynthSpec.from_file(spec_path) if spec_path else SynthSpec()
    corpus = gen_corpus(n_utterances, spec, seed)
    write_corpus(corpus, out_dir)
    sizes = corpus.sizes()
    click.echo(" ".join("{}={}".format(name, sizes[name]) for name in SPLITS))


def _train_run(corpus, cfg, data_dir, out_dir, resume=None):
    report = train(corpus, cfg, out_dir, resume)
    manifest = RunManifest(
        config_text=cfg.to_text(),
        seed=cfg.seed,
        corpus_hash=corpus_hash(data_dir),
        artifacts={
            "metrics": os.path.join(out_dir, METRICS_FILE),
            "best": os.path.join(out_dir, BEST_CHECKPOINT),
            "last": os.path.join(out_dir, LAST_CHECKPOINT),
        },
        version=config.VERSION,
    )
    manifest.write(os.path.join(out_dir, "manifest.json"))
    click.echo(
        "tau={} epochs={} best_epoch={} best_cer={:.4f}".format(
            cfg.tau, len(report.epochs), report.best_epoch, report.best_cer
        )
    )
    return report


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--resume", type=click.Path(exists=True, dir_okay=False))
@click.option("--tau-grid", help="Comma-separated temperatures, one run each.")
@handle_errors
def train_command(config_path, data_dir, out_dir, resume, tau_grid):
    """Train the chain and write metrics, checkpoints and a run manifest."""
    cfg = load_config(config_path)
    corpus = load_corpus(data_dir)
    if tau_grid is None:
        _train_run(corpus, cfg, data_dir, out_dir, resume)
        return
    if resume:
        raise click.UsageError("--resume cannot be combined with --tau-grid")
    for tau in parse_tau_grid(tau_grid):
        run_dir = os.path.join(out_dir, "tau-{:g}".format(tau))
        _train_run(corpus, replace(cfg, tau=tau), data_dir, run_dir)


@cli.command("ablate")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--seeds", default=5, show_default=True, type=click.IntRange(min=1))
@handle_errors
def ablate(config_path, data_dir, seeds):
    """Compare detached and straight-through Gumbel arms over several seeds."""
    cfg = load_config(config_path)
    queue = None
    if config.REDIS_URL:
        from redis import Redis
        from rq import Queue

        queue = Queue(config.QUEUE_NAME, connection=Redis.from_url(config.REDIS_URL))
    report = run_ablation(data_dir, cfg, [cfg.seed + i for i in range(seeds)], queue)
    click.echo(report.table())


@cli.command("gradcheck")
@click.option(
    "--scope",
    type=click.Choice(["primitives", "st", "chain"]),
    default="primitives",
    show_default=True,
)
@click.option("--seed", default=0, show_default=True, type=int)
@handle_errors
def gradcheck(scope, seed):
    """Run finite-difference and straight-through checks."""
    results = run_checks(scope, seed)
    for result in results:
        click.echo(
            "{:<32} {:.3e}  {}".format(
                result.name, result.error, "ok" if result.passed else "FAIL"
            )
        )
    failed = [r.name for r in results if not r.passed]
    if failed:
        click.echo("Failed: {}".format(", ".join(failed)), err=True)
        click.get_current_context().exit(EXIT_CHECK)


@cli.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--beam", default=5, show_default=True, type=click.IntRange(min=1))
@click.option("--split", type=click.Choice(SPLITS), default="dev", show_default=True)
@handle_errors
def evaluate(ckpt, data_dir, beam, split):
    """Beam-decode a split and report its character error rate."""
    model, _ = load_checkpoint(ckpt)
    corpus = load_corpus(data_dir)
    spec = corpus.spec
    expected = (corpus.vocabulary.size, spec.mel_dim)
    if (model.cfg.vocab_size, model.cfg.mel_dim) != expected:
        raise CheckpointError("checkpoint dimensions do not match the corpus")

    result = evaluate_cer(model.asr, corpus.split(split), corpus.vocabulary, beam)
    for utt_id, ref, hyp in zip(result.ids, result.references, result.hypotheses):
        click.echo("{}\t{}\t{}".format(utt_id, ref, hyp))
    click.echo("CER: {:.4f}".format(result.cer))


if __name__ == "__main__":
    cli()
