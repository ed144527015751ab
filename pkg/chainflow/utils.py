# -*- coding: utf-8 -*-

import hashlib
import logging
import os
from logging.config import dictConfig

import config
import editdistance
import numpy as np
from exceptions import InvalidArgumentError

dictConfig(config.LOGGING_CONFIG)
logger = logging.getLogger("chainflow")


def character_error_rate(references, hypotheses):
    """
    Micro-averaged character error rate: total edit distance over total
    reference length.

    Pairs with an empty reference are skipped with a warning.

    :param references: Reference strings.
    :type references: list
    :param hypotheses: Hypothesis strings, one per reference.
    :type hypotheses: list
    :rtype: float
    :raises InvalidArgumentError: When the lists differ in length or every
        reference is empty.
    """
    if len(references) != len(hypotheses):
        raise InvalidArgumentError(
            "got {} references and {} hypotheses".format(
                len(references), len(hypotheses)
            )
        )
    errors = 0
    total = 0
    for index, (ref, hyp) in enumerate(zip(references, hypotheses)):
        if not ref:
            logger.warning("Skipping pair #{} with an empty reference.".format(index))
            continue
        errors += editdistance.eval(ref, hyp)
        total += len(ref)
    if total == 0:
        raise InvalidArgumentError("every reference is empty")
    return errors / total


def text_to_array(text):
    """Encode text as one float64 per UTF-8 byte, for storage in a checkpoint."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def array_to_text(array):
    return bytes(np.asarray(array).astype(np.uint8).tolist()).decode("utf-8")


def corpus_hash(data_dir):
    """
    SHA-256 over the manifest and every file it references, in manifest order.

    :rtype: str
    """
    from data import MANIFEST, read_manifest

    digest = hashlib.sha256()
    with open(os.path.join(data_dir, MANIFEST), "rb") as handle:
        digest.update(handle.read())
    for entry in read_manifest(data_dir):
        for key in ("mel_path", "lin_path"):
            with open(os.path.join(data_dir, entry[key]), "rb") as handle:
                digest.update(handle.read())
    return digest.hexdigest()


def update_job(job, percent, status_msg, status, error=False):
    """
    Record progress in ``job.meta``.

    :param job: The running rq job, or None when running outside a worker.
    :rtype: dict
    :returns: The updated meta dictionary.
    """
    meta = job.meta if job is not None else {}
    meta["percent"] = percent
    meta["status"] = status
    meta["status_msg"] = status_msg
    meta["error"] = error

    if job is not None:
        job.save()
    return meta
