# -*- coding: utf-8 -*-

import logging
import time
from concurrent.futures import ProcessPoolExecutor

import config
from chain import (
    AblationReport,
    AblationRow,
    ablation_compare,
    arm_cer,
    arm_configs,
)
from data import load_corpus
from exceptions import ChainflowException, DivergenceError
from records import ChainConfig
from rq import get_current_job
from utils import update_job

logger = logging.getLogger("chainflow")


def ablate_seed_background(corpus_dir, config_text, seed):
    """
    Train both ablation arms for one seed.

    :param corpus_dir: Directory written by ``gen-data``.
    :type corpus_dir: str
    :param config_text: The base configuration, as ``key = value`` text.
    :type config_text: str
    :param seed: Initialization and data-order seed shared by both arms.
    :type seed: int
    :rtype: dict
    :returns: The job meta, plus ``seed``, ``baseline_cer``,
        ``proposed_cer`` and their noiseless counterparts on success, or
        ``exception`` on failure.
    """
    job = get_current_job()

    update_job(job, 0, "Starting...", "started")

    try:
        corpus = load_corpus(corpus_dir)
        baseline, proposed = arm_configs(ChainConfig.from_text(config_text), seed)

        update_job(job, 5, "Training baseline arm", "processing")
        baseline_cer, baseline_clean = arm_cer(corpus, baseline)

        update_job(job, 50, "Training proposed arm", "processing")
        proposed_cer, proposed_clean = arm_cer(corpus, proposed)
    except ChainflowException as err:
        logger.exception("Ablation seed {} failed.".format(seed))
        meta = update_job(job, 0, "Failed: {}".format(err), "failed", error=True)
        meta["seed"] = seed
        meta["exception"] = type(err).__name__
        return meta

    meta = update_job(job, 100, "Complete", "complete")
    meta["seed"] = seed
    meta["baseline_cer"] = baseline_cer
    meta["proposed_cer"] = proposed_cer
    meta["baseline_clean_cer"] = baseline_clean
    meta["proposed_clean_cer"] = proposed_clean
    return meta


def _row(result):
    if result["error"]:
        if result.get("exception") == "DivergenceError":
            raise DivergenceError(result["status_msg"])
        raise ChainflowException(result["status_msg"])
    return AblationRow(
        result["seed"],
        result["baseline_cer"],
        result["proposed_cer"],
        result["baseline_clean_cer"],
        result["proposed_clean_cer"],
    )


def _wait(jobs):
    while not all(job.is_finished or job.is_failed for job in jobs):
        time.sleep(config.POLL_INTERVAL)

    results = []
    for job in jobs:
        if job.is_failed:
            logger.error("Job {} failed.".format(job.id))
            raise ChainflowException("ablation job {} failed".format(job.id))
        result = job.return_value()
        if result is None:
            logger.warning("Job {} finished without a result.".format(job.id))
            raise ChainflowException("ablation job {} returned nothing".format(job.id))
        results.append(result)
    return results


def run_ablation(corpus_dir, cfg, seeds, queue=None):
    """
    Run the paired ablation for every seed.

    With a queue, one job per seed is enqueued and polled. Otherwise seeds
    run in a process pool of at most ``config.THREADS`` workers, or through
    :func:`chain.ablation_compare` in this process when only one worker is
    allowed. Rows come back in seed order every way.

    :param queue: An rq queue, or None to run locally.
    :rtype: AblationReport
    """
    seeds = list(seeds)
    text = cfg.to_text()
    if queue is not None:
        jobs = [
            queue.enqueue_call(
                func=ablate_seed_background, args=(corpus_dir, text, seed), timeout=-1
            )
            for seed in seeds
        ]
        logger.info("Enqueued {} ablation jobs on '{}'.".format(len(jobs), queue.name))
        results = _wait(jobs)
    elif config.THREADS > 1 and len(seeds) > 1:
        workers = min(config.THREADS, len(seeds))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(
                    ablate_seed_background,
                    [corpus_dir] * len(seeds),
                    [text] * len(seeds),
                    seeds,
                )
            )
    else:
        return ablation_compare(load_corpus(corpus_dir), cfg, seeds)

    return AblationReport([_row(result) for result in results])
