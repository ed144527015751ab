import json
import logging
import math
import os
import shutil
import tempfile
import unittest
from contextlib import contextmanager
from dataclasses import replace
from functools import lru_cache
from unittest.mock import patch

import config
import fakeredis
import numpy as np
from click.testing import CliRunner
from rq import Queue

# class TensorTests: autodiff engine, primitives and checkpoint arrays
# class EstimatorTests: straight-through discretization and Gumbel sampling
# class AsrTests / TtsTests: the two halves of the chain
# class ChainTests: chain step, training, evaluation and ablation
# class LearningTests: loss decrease, convergence and ablation direction
# class DataTests: vocabulary, synthetic corpus and normalization
# class ConfigTests: key = value files and run manifests
# class JobTests: rq background jobs
# class GradcheckTests / CliTests: command surface

# Test Category Headers (search these)
# [TENSOR TESTS]
# [ESTIMATOR TESTS]
# [ASR TESTS]
# [TTS TESTS]
# [CHAIN TESTS]
# [TRAIN TESTS]
# [CER TESTS]
# [LEARNING TESTS]
# [DATA TESTS]
# [NORMALIZATION TESTS]
# [CONFIG TESTS]
# [JOB TESTS]
# [GRADCHECK TESTS]
# [CLI TESTS]


@contextmanager
def logging_enabled():
    logging.disable(logging.NOTSET)
    try:
        yield
    finally:
        logging.disable(logging.CRITICAL)


def micro_spec(**overrides):
    from data import SynthSpec

    values = dict(mel_dim=4, lin_dim=6, n_letters=2, max_words=1, max_word_len=2)
    values.update(overrides)
    return SynthSpec(**values)


def micro_corpus(n=6, seed=0, **overrides):
    from data import gen_corpus, normalize_corpus

    corpus, _ = normalize_corpus(gen_corpus(n, micro_spec(**overrides), seed))
    return corpus


class QuietTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        logging.disable(logging.CRITICAL)

    @classmethod
    def tearDownClass(cls):
        logging.disable(logging.NOTSET)

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.tmp_dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()


class TensorTests(QuietTestCase):
    # [TENSOR TESTS]

    def test_softmax_uniform(self):
        from tensor import temperature_softmax

        out = temperature_softmax([0.0, 0.0, 0.0], 1.0)
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_softmax_argmax_invariant_to_tau_and_shift(self):
        from tensor import temperature_softmax

        for a in (-3.0, 0.0, 7.5):
            for k in (1e-3, 1.0, 20.0):
                for tau in (0.25, 0.5, 1.0, 2.0, 100.0):
                    out = temperature_softmax([a, a + k, a], tau)
                    self.assertEqual(int(np.argmax(out.data)), 1)

    def test_softmax_matches_formula(self):
        from tensor import temperature_softmax

        z = np.array([1.0, 2.0, 3.0])
        expected = np.exp(2 * z) / np.sum(np.exp(2 * z))
        softened = temperature_softmax(z, 0.5).data
        np.testing.assert_allclose(softened, expected, rtol=1e-14)

    def test_softmax_sums_to_one(self):
        from tensor import temperature_softmax

        rng = np.random.default_rng(0)
        for tau in (1e-3, 0.1, 1.0, 10.0, 1e3):
            logits = 50 * rng.standard_normal(7)
            total = temperature_softmax(logits, tau).data.sum()
            self.assertAlmostEqual(total, 1.0, delta=1e-9)

    def test_softmax_rejects_bad_input(self):
        from exceptions import InvalidArgumentError, NumericInputError
        from tensor import temperature_softmax

        with self.assertRaises(InvalidArgumentError):
            temperature_softmax([1.0, 2.0], 0.0)
        with self.assertRaises(InvalidArgumentError):
            temperature_softmax([1.0, 2.0], -1.0)
        with self.assertRaises(NumericInputError):
            temperature_softmax([1.0, np.nan], 1.0)
        with self.assertRaises(NumericInputError):
            temperature_softmax([np.inf, 0.0], 1.0)

    def test_softmax_mask(self):
        from tensor import temperature_softmax

        out = temperature_softmax([1.0, 5.0, 2.0], 1.0, mask=[True, False, True])
        self.assertEqual(out.data[1], 0.0)
        self.assertAlmostEqual(out.data.sum(), 1.0, delta=1e-12)

    def test_backward_dot_product(self):
        from tensor import Tensor, backward

        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0, 4.0])
        backward(x @ y)
        np.testing.assert_array_equal(x.grad, [3.0, 4.0])
        self.assertIsNone(y.grad)

    def test_backward_softmax_sum_is_zero(self):
        from tensor import Tensor, backward, temperature_softmax

        z = Tensor([0.3, -1.2, 2.0, 0.7], requires_grad=True)
        backward(temperature_softmax(z, 1.3).sum())
        np.testing.assert_allclose(z.grad, np.zeros(4), atol=1e-12)

    def test_backward_accumulates_across_consumers(self):
        from tensor import Tensor, backward

        x = Tensor([1.5, -2.0, 0.25], requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_backward_accumulates_across_calls(self):
        from tensor import Tensor, backward, zero_grad

        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(x.sum())
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])
        zero_grad([x])
        self.assertIsNone(x.grad)

    def test_backward_returns_contributions(self):
        from tensor import Tensor, backward

        x = Tensor([1.0, 2.0], requires_grad=True)
        x.grad = np.array([10.0, 10.0])
        contributions = backward((x * 3.0).sum())
        np.testing.assert_array_equal(contributions[x], [3.0, 3.0])
        np.testing.assert_array_equal(x.grad, [13.0, 13.0])

    def test_backward_rejects_non_scalar(self):
        from exceptions import InvalidArgumentError
        from tensor import Tensor, backward

        with self.assertRaises(InvalidArgumentError):
            backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)

    def test_no_grad(self):
        from tensor import Tensor, no_grad

        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        self.assertFalse(y.requires_grad)
        self.assertTrue((x * 2.0).requires_grad)

    def test_lstm_cell_zero_weights(self):
        from tensor import Tensor, lstm_cell

        h, c = lstm_cell(
            Tensor([0.4, -1.0, 2.0]),
            Tensor(np.zeros(2)),
            Tensor(np.zeros(2)),
            Tensor(np.zeros((5, 8))),
            Tensor(np.zeros(8)),
        )
        np.testing.assert_array_equal(h.data, [0.0, 0.0])
        np.testing.assert_array_equal(c.data, [0.0, 0.0])

    def test_lstm_cell_preserves_state_shape(self):
        from layers import LSTM

        layer = LSTM(3, 5, np.random.default_rng(0))
        h, c = layer.initial_state()
        for _ in range(3):
            h, c = layer.step(np.ones(3), h, c)
            self.assertEqual(h.shape, (5,))
            self.assertEqual(c.shape, (5,))

    def test_matmul_identity(self):
        from tensor import Tensor

        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal((a @ Tensor(np.eye(2))).data, a.data)

    def test_shape_error_names_both_shapes(self):
        from exceptions import ShapeError
        from tensor import Tensor, concat

        with self.assertRaises(ShapeError) as ctx:
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
        self.assertEqual(str(ctx.exception).count("(2, 3)"), 2)
        with self.assertRaises(ShapeError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))
        with self.assertRaises(ShapeError):
            concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)

    def test_bilstm_shape(self):
        from layers import BiLSTM
        from tensor import Tensor

        layer = BiLSTM(4, 3, np.random.default_rng(0))
        self.assertEqual(layer(Tensor(np.ones((5, 4)))).shape, (5, 6))

    def test_custom_backward_round_identity(self):
        from tensor import Tensor, backward, custom_backward_op, identity_rule

        x = Tensor([0.7], requires_grad=True)
        out = custom_backward_op(x, np.round, identity_rule)
        self.assertEqual(out.data[0], 1.0)
        backward((out * Tensor([2.0])).sum())
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_custom_backward_identity_matches_plain(self):
        from tensor import Tensor, backward, custom_backward_op, identity_rule

        w = np.array([0.5, -1.0, 2.0])
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        y = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward((custom_backward_op(x, lambda a: a, identity_rule) * Tensor(w)).sum())
        backward((y * Tensor(w)).sum())
        np.testing.assert_array_equal(x.grad, y.grad)

    def test_custom_backward_onehot_argmax(self):
        from estimators import onehot_argmax
        from tensor import Tensor, backward, custom_backward_op, identity_rule

        p = Tensor([0.2, 0.5, 0.3], requires_grad=True)
        out = custom_backward_op(p, onehot_argmax, identity_rule)
        np.testing.assert_array_equal(out.data, [0.0, 1.0, 0.0])
        backward(out.sum())
        np.testing.assert_array_equal(p.grad, [1.0, 1.0, 1.0])

    def test_custom_backward_shape_violation(self):
        from exceptions import ShapeError
        from tensor import Tensor, backward, custom_backward_op

        x = Tensor([1.0, 2.0], requires_grad=True)
        out = custom_backward_op(x, lambda a: a, lambda grad, a, o: np.ones(3))
        with self.assertRaises(ShapeError):
            backward(out.sum())

    def test_checkpoint_arrays_round_trip(self):
        from tensor import load_arrays, save_arrays

        path = os.path.join(self.tmp_dir, "a.ckpt")
        arrays = {"weight": np.arange(6.0).reshape(2, 3), "scalar": np.array(3.5)}
        save_arrays(path, arrays)
        loaded = load_arrays(path)
        self.assertEqual(list(loaded), ["weight", "scalar"])
        np.testing.assert_array_equal(loaded["weight"], arrays["weight"])
        self.assertEqual(loaded["scalar"].shape, ())
        with open(path, "rb") as handle:
            self.assertTrue(handle.read().startswith(b"CHAINCKPT1"))

    def test_checkpoint_rejects_bad_files(self):
        from exceptions import CheckpointError
        from tensor import load_arrays, save_arrays

        bad = os.path.join(self.tmp_dir, "bad.ckpt")
        with open(bad, "wb") as handle:
            handle.write(b"NOTACKPT00" + b"\x00" * 16)
        with self.assertRaises(CheckpointError):
            load_arrays(bad)

        good = os.path.join(self.tmp_dir, "good.ckpt")
        save_arrays(good, {"w": np.ones((4, 4))})
        with open(good, "rb") as handle:
            payload = handle.read()
        with open(good, "wb") as handle:
            handle.write(payload[:-8])
        with self.assertRaises(CheckpointError):
            load_arrays(good)


class EstimatorTests(QuietTestCase):
    # [ESTIMATOR TESTS]

    def test_st_argmax_forward(self):
        from estimators import st_argmax_onehot

        token = st_argmax_onehot([0.1, 0.7, 0.2])
        self.assertEqual(token.class_index, 1)
        np.testing.assert_array_equal(token.vector.data, [0.0, 1.0, 0.0])

    def test_st_argmax_tie_goes_to_lowest_index(self):
        from estimators import st_argmax_onehot

        self.assertEqual(st_argmax_onehot([0.5, 0.5]).class_index, 0)

    def test_st_argmax_identity_backward(self):
        from estimators import st_argmax_onehot
        from tensor import Tensor, backward

        upstream = np.array([0.3, -1.7, 4.25])
        p = Tensor([0.1, 0.7, 0.2], requires_grad=True)
        backward((st_argmax_onehot(p).vector * Tensor(upstream)).sum())
        np.testing.assert_array_equal(p.grad, upstream)

    def test_st_argmax_rejects_bad_input(self):
        from estimators import st_argmax_onehot
        from exceptions import InvalidArgumentError

        with self.assertRaises(InvalidArgumentError):
            st_argmax_onehot(np.zeros(0))
        with self.assertRaises(InvalidArgumentError):
            st_argmax_onehot([0.5, np.nan])

    def test_sample_gumbel(self):
        from estimators import GumbelNoise, sample_gumbel
        from exceptions import InvalidArgumentError

        noise = sample_gumbel(4, np.random.default_rng(0))
        self.assertIsInstance(noise, GumbelNoise)
        self.assertEqual(noise.values.shape, (4,))
        with self.assertRaises(InvalidArgumentError):
            sample_gumbel(0, np.random.default_rng(0))

    def test_gumbel_from_uniform_values(self):
        from estimators import gumbel_from_uniform

        value = float(gumbel_from_uniform(0.5))
        self.assertAlmostEqual(value, 0.36651292058166435, places=12)
        self.assertAlmostEqual(float(gumbel_from_uniform(math.exp(-1))), 0.0, places=12)
        self.assertTrue(np.all(np.isfinite(gumbel_from_uniform([0.0, 1.0]))))

    def test_gumbel_mean(self):
        from estimators import sample_gumbel

        values = sample_gumbel(10**6, np.random.default_rng(1)).values
        self.assertAlmostEqual(values.mean(), 0.5772156649, delta=0.01)

    def test_gumbel_softmax_zero_noise(self):
        from estimators import gumbel_softmax_probs
        from tensor import temperature_softmax

        logits = np.array([0.2, -1.0, 1.5])
        out = gumbel_softmax_probs(logits, 0.7, None, noise=np.zeros(3))
        np.testing.assert_array_equal(out.data, temperature_softmax(logits, 0.7).data)

    def test_gumbel_softmax_sharpens(self):
        from estimators import gumbel_softmax_probs

        logits = np.array([0.0, 1.0, 0.5])
        noise = np.array([0.3, 0.0, 0.0])
        out = gumbel_softmax_probs(logits, 0.01, None, noise=noise)
        np.testing.assert_allclose(out.data, [0.0, 1.0, 0.0], atol=1e-6)

    def test_gumbel_softmax_noise_is_constant(self):
        from estimators import gumbel_softmax_probs
        from tensor import Tensor, backward, temperature_softmax

        noise = np.array([0.4, -0.2, 1.1])
        a = Tensor([0.1, 0.2, 0.3], requires_grad=True)
        b = Tensor(a.data + noise, requires_grad=True)
        w = Tensor([1.0, -2.0, 0.5])
        backward((gumbel_softmax_probs(a, 1.0, None, noise=noise) * w).sum())
        backward((temperature_softmax(b, 1.0) * w).sum())
        np.testing.assert_allclose(a.grad, b.grad, atol=1e-15)

    def test_st_gumbel_degenerate(self):
        from estimators import st_gumbel_sample

        rng = np.random.default_rng(0)
        for _ in range(50):
            self.assertEqual(st_gumbel_sample([1.0, 0.0, 0.0], rng).class_index, 0)

    def test_categorical_frequency(self):
        from estimators import categorical_from_uniform

        uniforms = np.random.default_rng(2).random(10**5)
        draws = categorical_from_uniform([0.3, 0.7], uniforms)
        self.assertAlmostEqual(np.mean(draws == 1), 0.7, delta=0.01)

    def test_st_gumbel_identity_backward(self):
        from estimators import st_gumbel_sample
        from tensor import Tensor, backward

        upstream = np.array([1.25, -0.5, 3.0, 0.0])
        p = Tensor([0.1, 0.2, 0.3, 0.4], requires_grad=True)
        token = st_gumbel_sample(p, np.random.default_rng(3))
        self.assertEqual(token.vector.data.sum(), 1.0)
        self.assertEqual(token.vector.data[token.class_index], 1.0)
        backward((token.vector * Tensor(upstream)).sum())
        np.testing.assert_array_equal(p.grad, upstream)

    def test_st_gumbel_rejects_bad_mass(self):
        from estimators import st_gumbel_sample
        from exceptions import InvalidArgumentError

        with self.assertRaises(InvalidArgumentError):
            st_gumbel_sample([0.5, 0.6], np.random.default_rng(0))
        with self.assertRaises(InvalidArgumentError):
            st_gumbel_sample([1.5, -0.5], np.random.default_rng(0))

    def test_gumbel_max_trick(self):
        from gradcheck import gumbel_max_distance

        rng = np.random.default_rng(4)
        distance = gumbel_max_distance([0.5, -1.0, 2.0, 0.0, 1.0], 10**5, rng)
        self.assertLess(distance, 0.02)

    def test_discretize_modes(self):
        from estimators import discretize
        from exceptions import InvalidArgumentError
        from tensor import Tensor, temperature_softmax

        logits = Tensor([0.1, 2.0, -0.3], requires_grad=True)
        probs = temperature_softmax(logits)
        token, _ = discretize(logits, probs, "none", 1.0, None)
        self.assertFalse(token.vector.requires_grad)
        self.assertEqual(token.class_index, 1)
        token, used = discretize(logits, probs, "argmax", 1.0, None)
        self.assertTrue(token.vector.requires_grad)
        self.assertIs(used, probs)
        token, used = discretize(logits, probs, "gumbel", 1.0, np.random.default_rng(0))
        self.assertTrue(token.vector.requires_grad)
        self.assertIsNot(used, probs)
        with self.assertRaises(InvalidArgumentError):
            discretize(logits, probs, "soft", 1.0, None)

    def test_split_rngs(self):
        from estimators import split_rngs

        first = [r.random() for r in split_rngs(3, 2)]
        again = [r.random() for r in split_rngs(3, 2)]
        self.assertEqual(first, again)
        self.assertNotEqual(first[0], first[1])


class AsrTests(QuietTestCase):
    def setUp(self):
        super().setUp()
        from asr import ASR
        from gradcheck import micro_config

        self.cfg = micro_config("none")
        self.asr = ASR(self.cfg, np.random.default_rng(0))
        self.rng = np.random.default_rng(1)

    def mel(self, frames=16):
        return self.rng.standard_normal((frames, self.cfg.mel_dim))

    # [ASR TESTS]

    def test_encode_lengths(self):
        encoded = self.asr.encode(self.mel(16))
        self.assertEqual(encoded.subsampled_length, 2)
        encoded = self.asr.encode(self.mel(17))
        self.assertEqual(encoded.subsampled_length, 3)
        self.assertEqual(encoded.states.shape, (3, 2 * self.cfg.enc_hidden))
        self.assertEqual(encoded.original_length, 17)

    def test_subsampling_law(self):
        from asr import subsampled_length

        for frames in range(8, 201):
            expected = math.ceil(math.ceil(math.ceil(frames / 2) / 2) / 2)
            self.assertEqual(subsampled_length(frames), expected)

    def test_encode_errors(self):
        from exceptions import SequenceTooShortError, ShapeError

        with self.assertRaises(SequenceTooShortError):
            self.asr.encode(self.mel(7))
        with self.assertRaises(ShapeError):
            self.asr.encode(np.zeros((16, self.cfg.mel_dim + 1)))

    def test_encode_zero_input_is_finite(self):
        for frames in (8, 13, 24):
            encoded = self.asr.encode(np.zeros((frames, self.cfg.mel_dim)))
            self.assertTrue(np.all(np.isfinite(encoded.states.data)))

    def test_attend_single_frame(self):
        from asr import attend
        from tensor import Tensor

        states = Tensor(self.rng.standard_normal((1, 4)))
        context, alignment = attend(states, Tensor(self.rng.standard_normal(4)), "dot")
        np.testing.assert_array_equal(alignment.data, [1.0])
        np.testing.assert_allclose(context.data, states.data[0])

    def test_attend_identical_states_uniform(self):
        from asr import Attention
        from tensor import Tensor

        attention = Attention("mlp", 4, 6, 5, self.rng)
        states = Tensor(np.tile(self.rng.standard_normal(4), (5, 1)))
        _, alignment = attention(states, Tensor(self.rng.standard_normal(6)))
        np.testing.assert_allclose(alignment.data, np.full(5, 0.2), atol=1e-15)

    def test_bilinear_identity_equals_dot(self):
        from asr import attend
        from tensor import Tensor

        states = Tensor(self.rng.standard_normal((4, 3)))
        query = Tensor(self.rng.standard_normal(3))
        dot = attend(states, query, "dot")
        bilinear = attend(states, query, "bilinear", {"weight": Tensor(np.eye(3))})
        np.testing.assert_allclose(dot[1].data, bilinear[1].data, rtol=1e-14)
        np.testing.assert_allclose(dot[0].data, bilinear[0].data, rtol=1e-14)

    def test_dot_dimension_mismatch(self):
        from asr import Attention, attend
        from exceptions import ShapeError
        from tensor import Tensor

        with self.assertRaises(ShapeError):
            attend(Tensor(np.ones((3, 4))), Tensor(np.ones(5)), "dot")
        with self.assertRaises(ShapeError):
            Attention("dot", 8, 6, 4, self.rng)

    def test_alignment_normalized_for_every_score(self):
        from asr import Attention
        from tensor import Tensor

        states = Tensor(self.rng.standard_normal((6, 4)))
        for kind in ("dot", "bilinear", "mlp"):
            attention = Attention(kind, 4, 4, 5, self.rng)
            _, alignment = attention(states, Tensor(self.rng.standard_normal(4)))
            self.assertAlmostEqual(alignment.data.sum(), 1.0, delta=1e-9)
            self.assertTrue(np.all(alignment.data > 0))

    def test_decode_step_is_pure(self):
        from estimators import constant_token

        encoded = self.asr.encode(self.mel())
        state = self.asr.initial_state()
        prev = constant_token(self.asr.eos, self.cfg.vocab_size)
        first, new_state = self.asr.decode_step(prev, state, encoded)
        second, _ = self.asr.decode_step(prev, state, encoded)
        np.testing.assert_array_equal(first.data, second.data)
        self.assertEqual(first.shape, (self.cfg.vocab_size,))
        self.assertEqual(new_state.step, state.step + 1)

    def test_onehot_embedding_selects_row(self):
        from estimators import constant_token

        row = constant_token(2, self.cfg.vocab_size).vector @ self.asr.embedding
        np.testing.assert_array_equal(row.data, self.asr.embedding.data[2])

    def test_decode_step_vocabulary_mismatch(self):
        from estimators import constant_token
        from exceptions import ShapeError

        encoded = self.asr.encode(self.mel())
        with self.assertRaises(ShapeError):
            state = self.asr.initial_state()
            self.asr.decode_step(constant_token(0, 5), state, encoded)

    def test_decode_step_gradient_reaches_onehot(self):
        from estimators import OneHotToken, onehot
        from gradcheck import numeric_entry
        from tensor import Tensor, backward, no_grad

        encoded = self.asr.encode(self.mel())
        vector = Tensor(onehot(1, self.cfg.vocab_size), requires_grad=True)
        token = OneHotToken(vector, 1)
        w = Tensor(self.rng.standard_normal(self.cfg.vocab_size))

        def loss():
            logits, _ = self.asr.decode_step(token, self.asr.initial_state(), encoded)
            return (logits * w).sum()

        backward(loss())
        self.assertGreater(np.linalg.norm(vector.grad), 0.0)

        def value():
            with no_grad():
                return loss().item()

        numeric = numeric_entry(value, vector, 0)
        self.assertAlmostEqual(numeric, vector.grad[0], delta=1e-6)

    def test_teacher_forcing_length(self):
        targets = [0, 1, 2, 0, 3]
        out = self.asr.generate(self.mel(), "teacher_forcing", targets=targets)
        self.assertEqual(len(out.probs), 5)
        self.assertEqual(len(out.tokens), 5)
        self.assertEqual(len(out.alignments), 5)
        self.assertFalse(out.truncated)

    def test_teacher_forcing_requires_targets(self):
        from exceptions import InvalidArgumentError

        with self.assertRaises(InvalidArgumentError):
            self.asr.generate(self.mel(), "teacher_forcing")
        with self.assertRaises(InvalidArgumentError):
            self.asr.generate(self.mel(), "sample")
        with self.assertRaises(InvalidArgumentError):
            self.asr.generate(self.mel(), "nucleus")

    def test_greedy_argmax_invariant_to_tau(self):
        mel = self.mel(24)
        sharp = self.asr.generate(mel, "greedy", 0.25, "argmax")
        smooth = self.asr.generate(mel, "greedy", 2.0, "argmax")
        self.assertEqual(sharp.indices, smooth.indices)
        self.assertEqual(
            [t.class_index for t in sharp.tokens],
            [t.class_index for t in smooth.tokens],
        )
        self.assertGreater(sharp.probs[0].data.max(), smooth.probs[0].data.max())

    def test_greedy_respects_max_length(self):
        from asr import subsampled_length

        for frames in (8, 16, 40):
            out = self.asr.generate(self.mel(frames), "greedy")
            limit = 2 * subsampled_length(frames)
            self.assertLessEqual(len(out.indices), limit)
            if out.truncated:
                self.assertEqual(len(out.indices), limit)
            else:
                self.assertEqual(out.indices[-1], self.asr.eos)

    def test_sample_mode_reproducible(self):
        mel = self.mel(32)
        first = self.asr.generate(mel, "sample", rng=np.random.default_rng(5))
        second = self.asr.generate(mel, "sample", rng=np.random.default_rng(5))
        self.assertEqual(first.indices, second.indices)

    def test_beam_mode_has_no_probabilities(self):
        out = self.asr.generate(self.mel(), "beam", beam_size=3)
        self.assertEqual(out.probs, [])
        self.assertTrue(out.tokens)
        self.assertFalse(any(t.vector.requires_grad for t in out.tokens))

    def test_nll_perfect_prediction(self):
        from asr import asr_nll_loss
        from estimators import onehot

        targets = [0, 2, 3]
        probs = [onehot(t, 4) for t in targets]
        self.assertLessEqual(asr_nll_loss(probs, targets).item(), 1e-12)

    def test_nll_uniform(self):
        from asr import asr_nll_loss

        probs = [np.full(4, 0.25)] * 3
        loss = asr_nll_loss(probs, [1, 3, 0]).item()
        self.assertAlmostEqual(loss, math.log(4), places=12)

    def test_nll_matches_direct_sum(self):
        from asr import asr_nll_loss

        probs = self.rng.dirichlet(np.ones(4), size=6)
        targets = self.rng.integers(0, 4, size=6)
        expected = -np.mean(np.log(probs[np.arange(6), targets]))
        loss = asr_nll_loss(list(probs), list(targets)).item()
        self.assertAlmostEqual(loss, expected, places=12)

    def test_nll_mask_excludes_padding(self):
        from asr import asr_nll_loss

        probs = self.rng.dirichlet(np.ones(4), size=4)
        targets = [1, 2, 0, 0]
        mask = np.array([True, True, False, False])
        expected = -np.mean(np.log(probs[[0, 1], [1, 2]]))
        loss = asr_nll_loss(list(probs), targets, mask).item()
        self.assertAlmostEqual(loss, expected, places=12)

    def test_nll_length_mismatch(self):
        from asr import asr_nll_loss
        from exceptions import InvalidArgumentError

        with self.assertRaises(InvalidArgumentError):
            asr_nll_loss([np.full(4, 0.25)] * 2, [0, 1, 2])

    def test_beam_rejects_zero_width(self):
        from exceptions import InvalidArgumentError

        with self.assertRaises(InvalidArgumentError):
            self.asr.beam_search(self.mel(), 0)

    def test_beam_one_equals_greedy(self):
        for _ in range(50):
            mel = self.mel(int(self.rng.integers(8, 33)))
            greedy = self.asr.generate(mel, "greedy")
            best = self.asr.beam_search(mel, 1)
            self.assertEqual(best.tokens, greedy.indices)
            self.assertEqual(best.truncated, greedy.truncated)

    def test_hypothesis_score(self):
        from asr import Hypothesis

        self.assertEqual(Hypothesis([1, 2, 3, 0], -2.0).score, -0.5)


def _lattice_step(table):
    def step(prefix, token):
        prefix = prefix + ((token,) if token is not None else ())
        return np.log(table(prefix)), prefix

    return step


def _brute_force(table, classes, eos, max_length):
    best = None
    frontier = [((), 0.0)]
    for _ in range(max_length):
        extended = []
        for prefix, loglik in frontier:
            probs = table(prefix)
            for token in range(classes):
                path = (prefix + (token,), loglik + math.log(probs[token]))
                if token == eos:
                    score = path[1] / len(path[0])
                    best = max(best, (score, path[0])) if best else (score, path[0])
                else:
                    extended.append(path)
        frontier = extended
    for prefix, loglik in frontier:
        score = loglik / len(prefix)
        best = max(best, (score, prefix)) if best else (score, prefix)
    return list(best[1])


class BeamSearchTests(QuietTestCase):
    # [ASR TESTS]

    def test_normalized_winner_beats_raw_winner(self):
        from asr import beam_search

        def table(prefix):
            if prefix == ():
                return np.array([0.5, 0.005, 0.005, 0.49])
            if prefix == (0,):
                return np.array([0.97, 0.01, 0.01, 0.01])
            if prefix == (0, 0):
                return np.array([0.01, 0.01, 0.01, 0.97])
            return np.array([0.25, 0.25, 0.25, 0.25])

        raw_eos = math.log(0.49)
        raw_long = math.log(0.5) + 2 * math.log(0.97)
        self.assertGreater(raw_eos, raw_long)

        best = beam_search(_lattice_step(table), (), 2, 3, eos=3)
        self.assertEqual(best.tokens, [0, 0, 3])
        self.assertEqual(best.tokens, _brute_force(table, 4, 3, 3))

    def test_exhaustive_beam_finds_global_optimum(self):
        from asr import beam_search

        for trial in range(3):

            @lru_cache(maxsize=None)
            def table(prefix, trial=trial):
                rng = np.random.default_rng([99, trial] + list(prefix))
                return rng.dirichlet(np.ones(4))

            best = beam_search(_lattice_step(table), (), 4**3, 3, eos=3)
            self.assertEqual(best.tokens, _brute_force(table, 4, 3, 3))

    def test_truncated_hypotheses(self):
        from asr import beam_search

        def table(prefix):
            return np.array([0.7, 0.2, 0.1])

        best = beam_search(_lattice_step(table), (), 2, 4, eos=2)
        self.assertTrue(best.truncated)
        self.assertEqual(best.tokens, [0, 0, 0, 0])


class TtsTests(QuietTestCase):
    def setUp(self):
        super().setUp()
        from gradcheck import micro_config
        from tts import TTS

        self.cfg = micro_config()
        self.tts = TTS(self.cfg, np.random.default_rng(0))
        self.rng = np.random.default_rng(1)

    def tokens(self, ids):
        from estimators import constant_token

        return [constant_token(i, self.cfg.vocab_size) for i in ids]

    def target(self, frames=12):
        return self.rng.standard_normal((frames, self.cfg.mel_dim))

    # [TTS TESTS]

    def test_decode_groups_of_four(self):
        out = self.tts.synthesize(self.tokens([0, 1, 3]), self.target(12))
        self.assertEqual(out.n_frames, 12)
        self.assertEqual(out.n_steps, 3)
        self.assertEqual(len(out.alignments), 3)
        self.assertEqual(out.linear.shape, (12, self.cfg.lin_dim))
        self.assertEqual(out.stop.shape, (12,))
        self.assertTrue(np.all((out.stop.data > 0) & (out.stop.data < 1)))

    def test_decode_rejects_unpadded_target(self):
        from exceptions import InvalidArgumentError

        with self.assertRaises(InvalidArgumentError):
            self.tts.synthesize(self.tokens([0, 1]), self.target(10))

    def test_encode_rejects_empty_sequence(self):
        from exceptions import InvalidArgumentError

        with self.assertRaises(InvalidArgumentError):
            self.tts.encode_text([])

    def test_deterministic(self):
        target = self.target(8)
        first = self.tts.synthesize(self.tokens([0, 2, 3]), target)
        second = self.tts.synthesize(self.tokens([0, 2, 3]), target)
        np.testing.assert_array_equal(first.mel.data, second.mel.data)

    def test_order_sensitive(self):
        forward = self.tts.encode_text(self.tokens([0, 1]))
        backward = self.tts.encode_text(self.tokens([1, 0]))
        self.assertFalse(np.allclose(forward.data, backward.data))

    def test_gradient_reaches_onehot_inputs(self):
        from estimators import onehot
        from gradcheck import numeric_entry
        from tensor import Tensor, backward, no_grad
        from tts import tts_recon_loss

        target = self.target(8)
        rows = [
            Tensor(onehot(i, self.cfg.vocab_size), requires_grad=True) for i in (0, 2)
        ]

        def loss():
            return tts_recon_loss(self.tts.synthesize(rows, target).mel, target)

        backward(loss())
        self.assertGreater(sum(np.linalg.norm(r.grad) for r in rows), 0.0)

        def value():
            with no_grad():
                return loss().item()

        numeric = numeric_entry(value, rows[0], 1)
        tolerance = 1e-6 * max(1.0, abs(numeric))
        self.assertAlmostEqual(numeric, rows[0].grad[1], delta=tolerance)

    def test_gradient_wrt_parameters(self):
        from gradcheck import numeric_entry, relative_error
        from tensor import backward, no_grad
        from tts import tts_full_loss

        target = self.target(8)
        linear = self.rng.standard_normal((8, self.cfg.lin_dim))
        stop = np.zeros(8)
        stop[-1] = 1.0
        tokens = self.tokens([1, 0, 3])

        def loss():
            out = self.tts.synthesize(tokens, target)
            return tts_full_loss(out, target, linear, stop)

        self.tts.zero_grad()
        backward(loss())

        def value():
            with no_grad():
                return loss().item()

        params = self.tts.parameters()
        analytic, numeric = [], []
        for _ in range(10):
            tensor = params[int(self.rng.integers(len(params)))]
            index = int(self.rng.integers(tensor.size))
            analytic.append(tensor.grad.reshape(-1)[index])
            numeric.append(numeric_entry(value, tensor, index))
        self.assertLess(relative_error(analytic, numeric), 1e-4)

    def test_speakers_change_output(self):
        from gradcheck import micro_config
        from tts import TTS

        tts = TTS(micro_config(n_speakers=2), np.random.default_rng(0))
        target = self.target(8)
        first = tts.synthesize(self.tokens([0, 1]), target, speaker_id=0)
        second = tts.synthesize(self.tokens([0, 1]), target, speaker_id=1)
        self.assertFalse(np.allclose(first.mel.data, second.mel.data))
        self.assertEqual(tts.speaker(1).vector.shape, (self.cfg.speaker_dim,))

    def test_speaker_out_of_range(self):
        from exceptions import InvalidArgumentError

        with self.assertRaises(InvalidArgumentError):
            self.tts.speaker(1)

    def test_full_loss_perfect_prediction(self):
        from tensor import Tensor
        from tts import TtsOutput, tts_full_loss

        mel = self.target(8)
        linear = self.rng.standard_normal((8, self.cfg.lin_dim))
        stop = np.zeros(8)
        stop[-1] = 1.0
        predicted = np.where(stop == 1.0, 1 - 1e-7, 1e-7)
        out = TtsOutput(Tensor(mel), Tensor(linear), Tensor(predicted))
        self.assertLessEqual(tts_full_loss(out, mel, linear, stop).item(), 1e-6)

    def test_full_loss_uniform_stop(self):
        from tensor import Tensor
        from tts import TtsOutput, tts_full_loss

        mel = self.target(8)
        linear = self.rng.standard_normal((8, self.cfg.lin_dim))
        stop = np.zeros(8)
        stop[-1] = 1.0
        out = TtsOutput(Tensor(mel), Tensor(linear), Tensor(np.full(8, 0.5)))
        loss = tts_full_loss(out, mel, linear, stop).item()
        self.assertAlmostEqual(loss, math.log(2))

    def test_full_loss_matches_direct_sum(self):
        from tensor import Tensor
        from tts import TtsOutput, tts_full_loss

        mel, mel_hat = self.target(8), self.target(8)
        lin = self.rng.standard_normal((8, 6))
        lin_hat = self.rng.standard_normal((8, 6))
        stop = (self.rng.random(8) > 0.5).astype(float)
        stop_hat = self.rng.uniform(0.1, 0.9, size=8)
        expected = np.mean(
            np.mean((mel - mel_hat) ** 2, axis=1)
            + np.mean((lin - lin_hat) ** 2, axis=1)
            - (stop * np.log(stop_hat) + (1 - stop) * np.log(1 - stop_hat))
        )
        out = TtsOutput(Tensor(mel_hat), Tensor(lin_hat), Tensor(stop_hat))
        loss = tts_full_loss(out, mel, lin, stop).item()
        self.assertAlmostEqual(loss, expected, places=12)

    def test_full_loss_shape_mismatch(self):
        from exceptions import ShapeError
        from tensor import Tensor
        from tts import TtsOutput, tts_full_loss

        out = TtsOutput(
            Tensor(np.zeros((8, 4))), Tensor(np.zeros((8, 6))), Tensor(np.zeros(8))
        )
        with self.assertRaises(ShapeError):
            tts_full_loss(out, np.zeros((8, 5)), np.zeros((8, 6)), np.zeros(8))

    def test_recon_loss(self):
        from tts import tts_recon_loss

        x = self.target(8)
        self.assertEqual(tts_recon_loss(x, x).item(), 0.0)
        self.assertEqual(tts_recon_loss(x + 1.0, x).item(), float(self.cfg.mel_dim))
        y = self.target(8)
        expected = np.mean(np.sum((x - y) ** 2, axis=1))
        self.assertAlmostEqual(tts_recon_loss(y, x).item(), expected, places=12)
        self.assertEqual(tts_recon_loss(x, y).item(), tts_recon_loss(y, x).item())
        self.assertGreater(tts_recon_loss(x, y).item(), 0.0)

    def test_recon_loss_length_mismatch(self):
        from exceptions import InvalidArgumentError
        from tts import tts_recon_loss

        with self.assertRaises(InvalidArgumentError):
            tts_recon_loss(self.target(8), self.target(12))


class ChainTests(QuietTestCase):
    # [CHAIN TESTS]

    def step(self, st_mode, seed, **overrides):
        from chain import SpeechChain, chain_step
        from gradcheck import micro_config, micro_utterance

        cfg = micro_config(st_mode, **overrides)
        model = SpeechChain(cfg, np.random.default_rng(seed))
        utt = micro_utterance(cfg, np.random.default_rng(100 + seed))
        return model, chain_step(model, utt, cfg, np.random.default_rng(seed))

    def test_detached_tokens_give_zero_norm(self):
        for seed in range(10):
            _, result = self.step("none", seed)
            self.assertEqual(result.grad_norm_asr_from_rec, 0.0)

    def test_straight_through_gives_nonzero_norm(self):
        for st_mode in ("argmax", "gumbel"):
            for seed in range(10):
                _, result = self.step(st_mode, seed)
                self.assertGreater(result.grad_norm_asr_from_rec, 0.0)

    def test_loss_decomposition(self):
        for st_mode in ("none", "argmax", "gumbel"):
            _, result = self.step(st_mode, 0)
            total = result.l_asr + result.l_rec
            self.assertAlmostEqual(result.l_total, total, delta=1e-12)

    def test_weighted_objective(self):
        _, result = self.step("argmax", 0, asr_weight=0.5, rec_weight=2.0)
        expected = 0.5 * result.l_asr + 2.0 * result.l_rec
        self.assertAlmostEqual(result.l_total, expected, delta=1e-12)

    def test_step_populates_both_modules(self):
        model, _ = self.step("gumbel", 1)
        self.assertTrue(all(p.grad is not None for p in model.asr.parameters()))
        self.assertTrue(all(p.grad is not None for p in model.tts.parameters()))

    def test_greedy_mode_scores_teacher_forced_pass(self):
        from chain import SpeechChain, chain_step
        from gradcheck import micro_config, micro_utterance

        forced = micro_config("none")
        greedy = micro_config("none", generation_mode="greedy")
        model = SpeechChain(forced, np.random.default_rng(0))
        utt = micro_utterance(forced, np.random.default_rng(1))
        a = chain_step(model, utt, forced, np.random.default_rng(2), train=False)
        b = chain_step(model, utt, greedy, np.random.default_rng(2), train=False)
        self.assertEqual(a.l_asr, b.l_asr)
        self.assertTrue(all(p.grad is None for p in model.parameters()))

    def test_freeze_tts(self):
        from chain import SpeechChain
        from gradcheck import micro_config

        model = SpeechChain(micro_config(freeze_tts=True), np.random.default_rng(0))
        names = list(model.trainable_parameters())
        self.assertTrue(names)
        self.assertTrue(all(name.startswith("asr.") for name in names))

    def test_chain_gradient_matches_finite_differences(self):
        from gradcheck import reconstruction_gradient_error

        self.assertLess(reconstruction_gradient_error("argmax", seed=1), 1e-3)

    def test_evaluate_cer(self):
        from chain import SpeechChain, evaluate_cer
        from exceptions import InvalidArgumentError
        from gradcheck import micro_config

        corpus = micro_corpus()
        model = SpeechChain(micro_config(), np.random.default_rng(0))
        result = evaluate_cer(model.asr, corpus.dev, corpus.vocabulary, 2)
        self.assertEqual(len(result.hypotheses), len(corpus.dev))
        self.assertGreaterEqual(result.cer, 0.0)
        with self.assertRaises(InvalidArgumentError):
            evaluate_cer(model.asr, [], corpus.vocabulary)

    def test_checkpoint_round_trip(self):
        from chain import SpeechChain, load_checkpoint, save_checkpoint
        from gradcheck import micro_config

        cfg = micro_config(score_kind="bilinear")
        model = SpeechChain(cfg, np.random.default_rng(3))
        path = os.path.join(self.tmp_dir, "model.ckpt")
        save_checkpoint(path, model, epoch=4)
        loaded, arrays = load_checkpoint(path)
        self.assertEqual(loaded.cfg, cfg)
        self.assertEqual(arrays["meta.epoch"][0], 4.0)
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(loaded.state_dict()[name], value)

    def test_checkpoint_errors(self):
        from chain import SpeechChain, load_checkpoint
        from exceptions import CheckpointError
        from gradcheck import micro_config
        from tensor import save_arrays
        from utils import text_to_array

        model = SpeechChain(micro_config(), np.random.default_rng(0))
        no_meta = os.path.join(self.tmp_dir, "no_meta.ckpt")
        save_arrays(no_meta, model.state_dict())
        with self.assertRaises(CheckpointError):
            load_checkpoint(no_meta)

        wrong = os.path.join(self.tmp_dir, "wrong.ckpt")
        arrays = model.state_dict()
        arrays["meta.config"] = text_to_array(micro_config(enc_hidden=2).to_text())
        save_arrays(wrong, arrays)
        with self.assertRaises(CheckpointError):
            load_checkpoint(wrong)

    # [TRAIN TESTS]

    def test_train_zero_epochs(self):
        from chain import load_checkpoint, train
        from gradcheck import micro_config

        out = os.path.join(self.tmp_dir, "run")
        report = train(micro_corpus(), micro_config(epochs=0), out)
        self.assertEqual(report.epochs, [])
        for name in ("best.ckpt", "last.ckpt"):
            model, arrays = load_checkpoint(os.path.join(out, name))
            self.assertEqual(arrays["meta.epoch"][0], 0.0)
        with open(os.path.join(out, "metrics.jsonl")) as handle:
            self.assertEqual(handle.read(), "")

    def test_train_deterministic(self):
        from chain import train
        from gradcheck import micro_config

        corpus = micro_corpus()
        cfg = micro_config("gumbel", epochs=2, batch_size=2, beam_size=2)
        first = train(corpus, cfg)
        second = train(corpus, cfg)
        self.assertEqual(len(first.epochs), 2)
        self.assertEqual(first.metrics_lines(), second.metrics_lines())

    def test_train_writes_metrics(self):
        from chain import train
        from gradcheck import micro_config

        out = os.path.join(self.tmp_dir, "run")
        cfg = micro_config("none", epochs=2, batch_size=3, beam_size=2)
        report = train(micro_corpus(), cfg, out)
        with open(os.path.join(out, "metrics.jsonl")) as handle:
            lines = [json.loads(line) for line in handle]
        self.assertEqual(len(lines), 2)
        for record in lines:
            for key in (
                "epoch",
                "l_asr",
                "l_rec",
                "l_total",
                "val_cer",
                "grad_norm_asr_from_rec",
                "seed",
                "st_mode",
                "gen_mode",
                "tau",
            ):
                self.assertIn(key, record)
            self.assertEqual(record["grad_norm_asr_from_rec"], 0.0)
            self.assertAlmostEqual(record["l_total"], record["l_asr"] + record["l_rec"])
        self.assertEqual(report.best_cer, min(e.val_cer for e in report.epochs))

    def test_resume_replays_uninterrupted_run(self):
        from chain import train
        from gradcheck import micro_config

        corpus = micro_corpus()
        cfg = micro_config("gumbel", epochs=2, batch_size=2, beam_size=2)
        full = train(corpus, cfg, os.path.join(self.tmp_dir, "full"))

        part_dir = os.path.join(self.tmp_dir, "part")
        train(corpus, replace(cfg, epochs=1), part_dir)
        last = os.path.join(part_dir, "last.ckpt")
        resumed = train(corpus, cfg, part_dir, resume=last)
        self.assertEqual(len(resumed.epochs), 1)
        self.assertEqual(resumed.epochs[0], full.epochs[1])
        with open(os.path.join(part_dir, "metrics.jsonl")) as handle:
            self.assertEqual(len(handle.readlines()), 2)

    def test_train_divergence(self):
        from chain import train
        from exceptions import DivergenceError, NumericInputError
        from gradcheck import micro_config

        out = os.path.join(self.tmp_dir, "run")
        error = NumericInputError("logits contain NaN")
        with patch("chain.run_epoch", side_effect=error):
            with self.assertRaises(DivergenceError) as ctx:
                train(micro_corpus(), micro_config(epochs=1), out)
        self.assertIsNone(ctx.exception.last_good)
        with open(os.path.join(out, "divergence.json")) as handle:
            self.assertIn("NaN", json.load(handle)["error"])

    def test_train_rejects_incompatible_config(self):
        from chain import train
        from exceptions import ConfigError
        from gradcheck import micro_config

        with self.assertRaises(ConfigError):
            train(micro_corpus(), micro_config(vocab_size=6))
        with self.assertRaises(ConfigError):
            train(micro_corpus(), micro_config(mel_dim=8))

    def test_arm_configs(self):
        from chain import arm_configs
        from gradcheck import micro_config

        baseline, proposed = arm_configs(micro_config(generation_mode="greedy"), 7)
        self.assertEqual((baseline.st_mode, baseline.seed), ("none", 7))
        self.assertEqual(proposed.st_mode, "gumbel")
        self.assertEqual(proposed.generation_mode, "teacher_forcing")
        self.assertEqual(proposed.seed, 7)

    def test_compare_arms(self):
        from chain import compare_arms
        from exceptions import InvalidArgumentError
        from gradcheck import micro_config

        corpus = micro_corpus()
        cfg = micro_config("none", epochs=1, beam_size=1)
        row = compare_arms(corpus, cfg, cfg)
        self.assertEqual(row.baseline_cer, row.proposed_cer)
        with self.assertRaises(InvalidArgumentError):
            compare_arms(corpus, cfg, replace(cfg, seed=1))

    def test_ablation_report(self):
        from chain import AblationReport, AblationRow

        report = AblationReport(
            [
                AblationRow(0, 0.5, 0.4),
                AblationRow(1, 0.3, 0.3),
                AblationRow(2, 0.2, 0.35),
            ]
        )
        self.assertEqual(report.wins, 2)
        self.assertAlmostEqual(report.mean_baseline, 1 / 3)
        self.assertAlmostEqual(report.relative_change, (0.35 - 1 / 3) / (1 / 3))
        self.assertIn("2/3 seeds", report.table())

    def test_ablation_compare(self):
        from chain import ablation_compare
        from gradcheck import micro_config

        cfg = micro_config(epochs=0, beam_size=1)
        report = ablation_compare(micro_corpus(), cfg, [0, 1])
        self.assertEqual([row.seed for row in report.rows], [0, 1])
        for row in report.rows:
            self.assertGreaterEqual(row.baseline_clean_cer, 0.0)
            self.assertGreaterEqual(row.proposed_clean_cer, 0.0)

    def test_ablation_report_noiseless_columns(self):
        from chain import AblationReport, AblationRow

        report = AblationReport(
            [AblationRow(0, 0.5, 0.4, 0.1, 0.2), AblationRow(1, 0.3, 0.3, 0.0, 0.05)]
        )
        self.assertAlmostEqual(report.worst_clean_cer, 0.2)
        self.assertIn("worst noiseless CER 0.2000", report.table())
        self.assertIn("prop_clean", report.table())

    # [CER TESTS]

    def test_cer_examples(self):
        from utils import character_error_rate

        self.assertEqual(character_error_rate(["abc ab"], ["abc ab"]), 0.0)
        self.assertAlmostEqual(character_error_rate(["abc"], ["axc"]), 1 / 3)
        self.assertEqual(character_error_rate(["abc"], ["xyz"]), 1.0)
        self.assertEqual(character_error_rate(["ab"], ["abxyz"]), 1.5)

    def test_cer_is_micro_averaged(self):
        from utils import character_error_rate

        cer = character_error_rate(["a", "abcd"], ["b", "abcd"])
        self.assertAlmostEqual(cer, 1 / 5)

    def test_cer_skips_empty_references(self):
        from utils import character_error_rate

        with logging_enabled():
            with self.assertLogs("chainflow", level="WARNING"):
                cer = character_error_rate(["", "abc"], ["zzz", "abd"])
        self.assertAlmostEqual(cer, 1 / 3)

    def test_cer_rejects_all_empty_references(self):
        from exceptions import InvalidArgumentError
        from utils import character_error_rate

        with self.assertRaises(InvalidArgumentError):
            character_error_rate(["", ""], ["a", "b"])
        with self.assertRaises(InvalidArgumentError):
            character_error_rate(["abc"], [])

    def test_cer_matches_recursive_edit_distance(self):
        from utils import character_error_rate

        def edit_distance(a, b):
            @lru_cache(maxsize=None)
            def dist(i, j):
                if i == 0 or j == 0:
                    return i + j
                return min(
                    dist(i - 1, j) + 1,
                    dist(i, j - 1) + 1,
                    dist(i - 1, j - 1) + (a[i - 1] != b[j - 1]),
                )

            return dist(len(a), len(b))

        rng = np.random.default_rng(0)
        references, hypotheses = [], []
        for _ in range(100):
            a = "".join(rng.choice(list("abc "), size=int(rng.integers(1, 9))))
            b = "".join(rng.choice(list("abc "), size=int(rng.integers(0, 9))))
            cer = character_error_rate([a], [b])
            self.assertAlmostEqual(cer, edit_distance(a, b) / len(a), places=12)
            references.append(a)
            hypotheses.append(b)

        errors = sum(edit_distance(a, b) for a, b in zip(references, hypotheses))
        total = sum(len(a) for a in references)
        cer = character_error_rate(references, hypotheses)
        self.assertAlmostEqual(cer, errors / total, places=12)


class LearningTests(QuietTestCase):
    # [LEARNING TESTS]

    def test_chain_loss_decreases_over_windows(self):
        from chain import train
        from gradcheck import micro_config

        corpus = micro_corpus(20, sigma=0.0)
        cfg = micro_config("gumbel", epochs=30, lr=1e-2)
        report = train(corpus, cfg)

        losses = [record.l_total for record in report.epochs]
        self.assertEqual(len(losses), 30)
        windows = [np.mean(losses[i : i + 5]) for i in range(0, 30, 5)]
        for earlier, later in zip(windows, windows[1:]):
            self.assertLess(later, earlier)

    def test_converged_checkpoint_transcribes_training_data(self):
        from chain import LAST_CHECKPOINT, evaluate_cer, load_checkpoint, train
        from gradcheck import micro_config

        corpus = micro_corpus(20, sigma=0.0)
        cfg = micro_config("gumbel", epochs=40, lr=1e-2, batch_size=1, beam_size=1)
        train(corpus, cfg, self.tmp_dir)

        model, _ = load_checkpoint(os.path.join(self.tmp_dir, LAST_CHECKPOINT))
        result = evaluate_cer(model.asr, corpus.train, corpus.vocabulary, 5)
        self.assertLess(result.cer, 0.05)

    def test_ablation_direction(self):
        from chain import ablation_compare
        from gradcheck import micro_config

        corpus = micro_corpus(20, sigma=0.0)
        cfg = micro_config(epochs=20, lr=1e-2, batch_size=1, beam_size=1)
        report = ablation_compare(corpus, cfg, range(5))

        self.assertEqual(len(report.rows), 5)
        self.assertGreaterEqual(report.wins, 3)
        self.assertLess(report.worst_clean_cer, 0.25)


class DataTests(QuietTestCase):
    # [DATA TESTS]

    def test_full_vocabulary(self):
        from data import Vocabulary

        vocab = Vocabulary.full()
        self.assertEqual(vocab.size, 32)
        self.assertEqual(vocab.encode("az'.- ~"), [0, 25, 26, 27, 28, 29, 30])
        self.assertEqual(vocab.eos, 31)
        for index, symbol in enumerate(vocab.symbols):
            self.assertEqual(vocab.ids[symbol], index)

    def test_restricted_vocabulary(self):
        from data import Vocabulary

        vocab = Vocabulary.restricted(12)
        self.assertEqual(vocab.size, 14)
        self.assertEqual(vocab.eos, 13)
        self.assertEqual(vocab.targets("ab l"), [0, 1, 12, 11, 13])
        self.assertEqual(vocab.decode([0, 1, 12, 11, 13, 2]), "ab l")

    def test_vocabulary_errors(self):
        from data import Vocabulary
        from exceptions import VocabularyError

        vocab = Vocabulary.restricted(12)
        with self.assertRaises(VocabularyError):
            vocab.encode("abz")
        with self.assertRaises(VocabularyError):
            vocab.decode([14])
        with self.assertRaises(VocabularyError):
            Vocabulary(("a", "a", "<eos>"))

    def test_noiseless_frames_equal_prototypes(self):
        from data import SynthSpec, synth_tables, synth_utterance

        spec = SynthSpec(sigma=0.0)
        features = synth_utterance("abc", spec, np.random.default_rng(0))
        prototypes = synth_tables(spec).prototypes
        self.assertEqual(features.n_frames, 12)
        expected = np.repeat(prototypes[[0, 1, 2]], 4, axis=0)
        np.testing.assert_array_equal(features.mel, expected)
        np.testing.assert_array_equal(features.stop, [0.0] * 11 + [1.0])

    def test_noiseless_corpus_decodes_by_nearest_prototype(self):
        from data import SynthSpec, gen_corpus, synth_tables
        from utils import character_error_rate

        spec = SynthSpec(sigma=0.0)
        corpus = gen_corpus(30, spec, seed=3)
        prototypes = synth_tables(spec).prototypes
        vocab = corpus.vocabulary

        references, hypotheses = [], []
        for utt in corpus.utterances():
            mel = utt.features.mel
            ids = []
            for start in range(0, utt.features.n_frames, spec.frames_per_token):
                block = mel[start : start + spec.frames_per_token].mean(axis=0)
                if not np.any(block):
                    break
                distances = np.sum((prototypes - block) ** 2, axis=1)
                ids.append(int(np.argmin(distances)))
            references.append(utt.text)
            hypotheses.append(vocab.decode(ids))

        self.assertEqual(character_error_rate(references, hypotheses), 0.0)

    def test_noiseless_split(self):
        from data import gen_corpus, noiseless_split, normalize_corpus, synth_tables

        spec = micro_spec(sigma=0.3)
        raw = gen_corpus(10, spec, seed=1)
        prototypes = synth_tables(spec).prototypes
        clean = noiseless_split(raw, "dev")
        self.assertEqual([u.id for u in clean], [u.id for u in raw.dev])
        for noisy, utt in zip(raw.dev, clean):
            self.assertEqual(utt.text, noisy.text)
            frames = np.repeat(prototypes[utt.tokens[:-1]], spec.frames_per_token, 0)
            np.testing.assert_array_equal(utt.features.mel[: len(frames)], frames)
            self.assertFalse(np.allclose(utt.features.mel, noisy.features.mel))

        normalized, stats = normalize_corpus(raw)
        for utt, expected in zip(noiseless_split(normalized, "dev"), clean):
            applied = stats.apply(expected.features)
            np.testing.assert_allclose(utt.features.mel, applied.mel)
            np.testing.assert_allclose(utt.features.linear, applied.linear)

    def test_padding(self):
        from data import SynthSpec, synth_utterance

        spec = SynthSpec(frames_per_token=3)
        padded = synth_utterance("abc", spec, np.random.default_rng(0))
        self.assertEqual(padded.n_frames, 12)
        np.testing.assert_array_equal(padded.mel[9:], np.zeros((3, 8)))
        self.assertEqual(padded.stop[-1], 1.0)

        short = synth_utterance("a", SynthSpec(), np.random.default_rng(0))
        self.assertEqual(short.n_frames, 8)

    def test_linear_stream_is_smooth_expansion(self):
        from data import SynthSpec, smooth_expansion, synth_utterance

        features = synth_utterance("abd", SynthSpec(), np.random.default_rng(0))
        expansion = smooth_expansion(8, 20)
        np.testing.assert_array_equal(features.linear, features.mel @ expansion)
        self.assertEqual(features.linear.shape, (12, 20))

    def test_synthesis_reproducible(self):
        from data import SynthSpec, synth_utterance

        spec = SynthSpec(sigma=0.3)
        first = synth_utterance("ab a", spec, np.random.default_rng(9))
        second = synth_utterance("ab a", spec, np.random.default_rng(9))
        np.testing.assert_array_equal(first.mel, second.mel)

    def test_synthesis_errors(self):
        from data import SynthSpec, synth_utterance
        from exceptions import InvalidArgumentError, VocabularyError

        spec = SynthSpec()
        with self.assertRaises(VocabularyError):
            synth_utterance("aZ", spec, np.random.default_rng(0))
        with self.assertRaises(VocabularyError):
            synth_utterance([0, 13], spec, np.random.default_rng(0))
        with self.assertRaises(InvalidArgumentError):
            synth_utterance("", spec, np.random.default_rng(0))

    def test_prototypes_are_separated(self):
        from data import SynthSpec, min_pairwise_distance, synth_tables

        spec = SynthSpec(sigma=0.25)
        self.assertGreater(min_pairwise_distance(synth_tables(spec).prototypes), 1.0)

    def test_split_sizes(self):
        from data import gen_corpus

        corpus = gen_corpus(10, seed=1)
        self.assertEqual(corpus.sizes(), {"train": 8, "dev": 1, "test": 1})

    def test_gen_corpus_requires_three(self):
        from data import gen_corpus
        from exceptions import InvalidArgumentError

        with self.assertRaises(InvalidArgumentError):
            gen_corpus(2)

    def test_gen_corpus_deterministic(self):
        from data import gen_corpus

        first, second = gen_corpus(12, seed=4), gen_corpus(12, seed=4)
        for name in ("train", "dev", "test"):
            self.assertEqual(
                [(u.id, u.text) for u in first.split(name)],
                [(u.id, u.text) for u in second.split(name)],
            )
        for a, b in zip(first.utterances(), second.utterances()):
            np.testing.assert_array_equal(a.features.mel, b.features.mel)

    def test_splits_partition_corpus(self):
        from data import gen_corpus

        corpus = gen_corpus(25, seed=2)
        names = ("train", "dev", "test")
        ids = [set(u.id for u in corpus.split(name)) for name in names]
        self.assertEqual(set.union(*ids), {"utt{:05d}".format(i) for i in range(25)})
        self.assertFalse(ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])

    def test_texts_use_letter_subset(self):
        from data import gen_corpus

        corpus = gen_corpus(20, seed=3)
        allowed = set("abcdefghijkl ")
        for utt in corpus.utterances():
            self.assertTrue(set(utt.text) <= allowed)
            self.assertEqual(utt.tokens[-1], corpus.vocabulary.eos)
            self.assertEqual(utt.features.n_frames % 4, 0)

    def test_speakers_round_robin(self):
        from data import SynthSpec, gen_corpus

        corpus = gen_corpus(6, SynthSpec(n_speakers=2), seed=0)
        speakers = {u.id: u.speaker for u in corpus.utterances()}
        self.assertEqual(speakers["utt00000"], 0)
        self.assertEqual(speakers["utt00001"], 1)

    def test_corpus_on_disk(self):
        from data import gen_corpus, load_corpus, read_manifest, write_corpus

        corpus = gen_corpus(10, micro_spec(), seed=5)
        write_corpus(corpus, self.tmp_dir)
        entries = read_manifest(self.tmp_dir)
        self.assertEqual(len(entries), 10)
        self.assertEqual(
            set(entries[0]),
            {"id", "text", "mel_path", "lin_path", "n_frames", "split", "speaker"},
        )
        loaded = load_corpus(self.tmp_dir, normalize=False)
        self.assertEqual(loaded.spec, corpus.spec)
        for a, b in zip(corpus.utterances(), loaded.utterances()):
            self.assertEqual(a.id, b.id)
            np.testing.assert_array_equal(a.features.mel, b.features.mel)
            np.testing.assert_array_equal(a.features.linear, b.features.linear)
            np.testing.assert_array_equal(a.features.stop, b.features.stop)

    def test_corpus_byte_identical(self):
        from data import gen_corpus, write_corpus

        first = os.path.join(self.tmp_dir, "a")
        second = os.path.join(self.tmp_dir, "b")
        write_corpus(gen_corpus(10, seed=7), first)
        write_corpus(gen_corpus(10, seed=7), second)
        for root, _, files in os.walk(first):
            for name in files:
                path = os.path.join(root, name)
                other = os.path.join(second, os.path.relpath(path, first))
                with open(path, "rb") as a, open(other, "rb") as b:
                    self.assertEqual(a.read(), b.read())

    def test_corpus_hash(self):
        from data import gen_corpus, write_corpus
        from utils import corpus_hash

        write_corpus(gen_corpus(5, micro_spec(), seed=0), self.tmp_dir)
        digest = corpus_hash(self.tmp_dir)
        self.assertEqual(len(digest), 64)
        self.assertEqual(digest, corpus_hash(self.tmp_dir))

    # [NORMALIZATION TESTS]

    def test_normalized_train_split_is_standard(self):
        from data import gen_corpus, normalize_corpus

        normalized, _ = normalize_corpus(gen_corpus(20, seed=3))
        mel = np.concatenate([u.features.mel for u in normalized.train])
        lin = np.concatenate([u.features.linear for u in normalized.train])
        for frames in (mel, lin):
            np.testing.assert_allclose(frames.mean(axis=0), 0.0, atol=1e-9)
            np.testing.assert_allclose(frames.var(axis=0), 1.0, atol=1e-6)

    def test_held_out_splits_reuse_train_stats(self):
        from data import gen_corpus, normalize_corpus

        raw = gen_corpus(20, seed=3)
        normalized, stats = normalize_corpus(raw)
        expected = (raw.dev[0].features.mel - stats.mel_mean) / stats.mel_std
        np.testing.assert_array_equal(normalized.dev[0].features.mel, expected)

    def test_constant_dimension_warns(self):
        from data import NormStats
        from records import FeatureSequence, Utterance

        mel = np.random.default_rng(0).standard_normal((8, 3))
        mel[:, 1] = 5.0
        utt = Utterance("u", "a", [0], FeatureSequence(mel, mel.copy(), np.zeros(8)))
        with logging_enabled():
            with self.assertLogs("chainflow", level="WARNING"):
                stats = NormStats.estimate([utt])
        self.assertEqual(stats.mel_std[1], 1.0)
        np.testing.assert_array_equal(stats.apply(utt.features).mel[:, 1], np.zeros(8))

    def test_standard_data_unchanged(self):
        from data import NormStats
        from records import FeatureSequence, Utterance

        raw = np.random.default_rng(1).standard_normal((50, 3))
        standard = (raw - raw.mean(axis=0)) / raw.std(axis=0)
        features = FeatureSequence(standard, standard, np.zeros(50))
        utt = Utterance("u", "a", [0], features)
        stats = NormStats.estimate([utt])
        np.testing.assert_allclose(stats.apply(utt.features).mel, standard, atol=1e-9)

    def test_denormalize_round_trip(self):
        from data import denormalize, gen_corpus, normalize_corpus

        raw = gen_corpus(10, seed=8)
        normalized, stats = normalize_corpus(raw)
        for a, b in zip(raw.utterances(), normalized.utterances()):
            restored = denormalize(b.features, stats)
            np.testing.assert_allclose(restored.mel, a.features.mel, atol=1e-9)
            np.testing.assert_allclose(restored.linear, a.features.linear, atol=1e-9)

    def test_stats_need_two_frames(self):
        from data import NormStats
        from exceptions import InvalidArgumentError
        from records import FeatureSequence, Utterance

        features = FeatureSequence(np.ones((1, 2)), np.ones((1, 2)), [1.0])
        utt = Utterance("u", "a", [0], features)
        with self.assertRaises(InvalidArgumentError):
            NormStats.estimate([utt])

    def test_stats_saved_and_reapplied(self):
        from data import NormStats, gen_corpus, load_corpus, write_corpus

        raw = gen_corpus(10, micro_spec(), seed=2)
        write_corpus(raw, self.tmp_dir)
        stats = NormStats.load(os.path.join(self.tmp_dir, "stats.ckpt"))
        loaded = load_corpus(self.tmp_dir)
        np.testing.assert_allclose(
            loaded.test[0].features.mel,
            (raw.test[0].features.mel - stats.mel_mean) / stats.mel_std,
        )


class ConfigTests(QuietTestCase):
    # [CONFIG TESTS]

    def test_parse_chain_config(self):
        from records import ChainConfig

        cfg = ChainConfig.from_text(
            "# chain settings\n\nst_mode = argmax  # straight-through\ntau = 0.5\n"
            "epochs = 3\nfreeze_tts = yes\n"
        )
        self.assertEqual(cfg.st_mode, "argmax")
        self.assertEqual(cfg.tau, 0.5)
        self.assertEqual(cfg.epochs, 3)
        self.assertTrue(cfg.freeze_tts)
        self.assertEqual(cfg.lr, 1e-3)
        self.assertEqual(cfg.clip_norm, 5.0)

    def test_unknown_key_names_line(self):
        from exceptions import ConfigError
        from records import ChainConfig

        with self.assertRaises(ConfigError) as ctx:
            ChainConfig.from_text("tau = 1\n# comment\nlearning_rate = 0.1\n")
        self.assertEqual(ctx.exception.line, 3)
        self.assertIn("line 3", str(ctx.exception))

    def test_bad_values(self):
        from exceptions import ConfigError
        from records import ChainConfig

        for text in ("tau = warm", "epochs = 1.5", "freeze_tts = maybe", "just words"):
            with self.assertRaises(ConfigError):
                ChainConfig.from_text(text)
        invalid = ("tau = 0", "st_mode = soft", "score_kind = cosine", "batch_size = 0")
        for text in invalid:
            with self.assertRaises(ConfigError):
                ChainConfig.from_text(text)

    def test_config_text_round_trip(self):
        from records import ChainConfig

        cfg = ChainConfig(st_mode="none", tau=0.25, freeze_tts=True, seed=11)
        self.assertEqual(ChainConfig.from_text(cfg.to_text()), cfg)

    def test_synth_spec_parsing(self):
        from data import SynthSpec
        from exceptions import ConfigError

        spec = SynthSpec.from_text("sigma = 0\nframes_per_token = 2\n")
        self.assertEqual((spec.sigma, spec.frames_per_token), (0.0, 2))
        self.assertEqual(SynthSpec.from_text(spec.to_text()), spec)
        with self.assertRaises(ConfigError):
            SynthSpec.from_text("frames_per_token = 0")

    def test_run_manifest(self):
        from records import RunManifest

        manifest = RunManifest("tau = 1.0\n", 3, "abc", {"best": "best.ckpt"}, "0.1.0")
        path = os.path.join(self.tmp_dir, "manifest.json")
        manifest.write(path)
        self.assertEqual(RunManifest.read(path), manifest)

    def test_epoch_record_metrics(self):
        from records import ChainConfig, EpochRecord

        record = EpochRecord(0, 1.0, 2.0, 0.5, 3.0, 0.25, 0.0)
        metrics = record.metrics(ChainConfig(st_mode="none", seed=4))
        self.assertEqual(metrics["st_mode"], "none")
        self.assertEqual(metrics["gen_mode"], "teacher_forcing")
        self.assertEqual(metrics["seed"], 4)


class JobTests(QuietTestCase):
    def setUp(self):
        super().setUp()
        from data import gen_corpus, write_corpus
        from gradcheck import micro_config

        self.queue = Queue(is_async=False, connection=fakeredis.FakeStrictRedis())
        self.data_dir = os.path.join(self.tmp_dir, "data")
        write_corpus(gen_corpus(6, micro_spec(), seed=0), self.data_dir)
        self.cfg = micro_config("gumbel", epochs=1, batch_size=2, beam_size=1)

    # [JOB TESTS]

    def test_ablate_seed_background(self):
        from jobs import ablate_seed_background

        job = self.queue.enqueue_call(
            func=ablate_seed_background, args=(self.data_dir, self.cfg.to_text(), 0)
        )

        self.assertTrue(job.is_finished)
        job_result = job.return_value()

        meta_keys = ["status", "status_msg", "percent", "error"]
        self.assertTrue(all(key in job_result for key in meta_keys))
        self.assertEqual(job_result["status"], "complete")
        self.assertFalse(job_result["error"])
        self.assertEqual(job_result["percent"], 100)
        self.assertEqual(job_result["seed"], 0)
        self.assertGreaterEqual(job_result["baseline_cer"], 0.0)
        self.assertGreaterEqual(job_result["proposed_cer"], 0.0)
        self.assertGreaterEqual(job_result["baseline_clean_cer"], 0.0)
        self.assertGreaterEqual(job_result["proposed_clean_cer"], 0.0)

    def test_ablate_seed_background_bad_config(self):
        from jobs import ablate_seed_background

        job = self.queue.enqueue_call(
            func=ablate_seed_background, args=(self.data_dir, "bogus = 1\n", 0)
        )

        self.assertTrue(job.is_finished)
        job_result = job.return_value()
        self.assertEqual(job_result["status"], "failed")
        self.assertTrue(job_result["error"])
        self.assertEqual(job_result["exception"], "ConfigError")
        self.assertIn("line 1", job_result["status_msg"])

    def test_run_ablation_queue_matches_local(self):
        from jobs import run_ablation

        queued = run_ablation(self.data_dir, self.cfg, [0, 1], self.queue)
        with patch.object(config, "THREADS", 1):
            local = run_ablation(self.data_dir, self.cfg, [0, 1])
        self.assertEqual([row.seed for row in queued.rows], [0, 1])
        self.assertEqual(queued.rows, local.rows)

    def test_run_ablation_single_worker_runs_in_process(self):
        from chain import ablation_compare
        from jobs import run_ablation

        with patch.object(config, "THREADS", 1), patch(
            "jobs.ablation_compare", wraps=ablation_compare
        ) as compare:
            report = run_ablation(self.data_dir, self.cfg, [3])
        compare.assert_called_once()
        self.assertEqual([row.seed for row in report.rows], [3])

    def test_run_ablation_reports_failures(self):
        from exceptions import ChainflowException
        from jobs import run_ablation

        with self.assertRaises(ChainflowException):
            cfg = replace(self.cfg, vocab_size=6)
            run_ablation(self.data_dir, cfg, [0], self.queue)

    def test_update_job_without_job(self):
        from utils import update_job

        meta = update_job(None, 50, "Halfway", "processing")
        self.assertEqual(meta["percent"], 50)
        self.assertEqual(meta["status"], "processing")
        self.assertFalse(meta["error"])


class GradcheckTests(QuietTestCase):
    # [GRADCHECK TESTS]

    def test_relative_error(self):
        from gradcheck import relative_error

        self.assertEqual(relative_error([1.0, 2.0], [1.0, 2.0]), 0.0)
        self.assertAlmostEqual(relative_error([1.0, 0.0], [0.0, 0.0]), 1.0)
        self.assertLess(relative_error([1e-9], [2e-9]), 1e-2)

    def test_primitives(self):
        from gradcheck import check_primitives

        results = check_primitives(seed=0)
        self.assertGreaterEqual(len(results), 20)
        for result in results:
            self.assertTrue(result.passed, "{}: {}".format(result.name, result.error))

    def test_primitives_default_trial_count(self):
        from gradcheck import PRIMITIVE_CASES, check_primitives, gradient_error

        with patch("gradcheck.gradient_error", wraps=gradient_error) as spy:
            check_primitives(seed=1)
        self.assertEqual(spy.call_count, 20 * len(PRIMITIVE_CASES))

    def test_straight_through(self):
        from gradcheck import check_st

        for result in check_st(seed=0, trials=100):
            self.assertTrue(result.passed, "{}: {}".format(result.name, result.error))

    def test_chain(self):
        from gradcheck import check_chain

        for result in check_chain(seed=0):
            self.assertTrue(result.passed, "{}: {}".format(result.name, result.error))

    def test_unknown_scope(self):
        from exceptions import InvalidArgumentError
        from gradcheck import run_checks

        with self.assertRaises(InvalidArgumentError):
            run_checks("everything")


class CliTests(QuietTestCase):
    def setUp(self):
        super().setUp()
        self.runner = CliRunner()
        self.spec_path = os.path.join(self.tmp_dir, "spec.txt")
        with open(self.spec_path, "w") as handle:
            handle.write(micro_spec().to_text())
        self.data_dir = os.path.join(self.tmp_dir, "data")
        self.out_dir = os.path.join(self.tmp_dir, "run")

    def invoke(self, *args):
        from cli import cli

        return self.runner.invoke(cli, [str(a) for a in args])

    def write_config(self, **overrides):
        from gradcheck import micro_config

        values = dict(epochs=1, batch_size=2, beam_size=1)
        values.update(overrides)
        path = os.path.join(self.tmp_dir, "chain.cfg")
        with open(path, "w") as handle:
            handle.write(micro_config(**values).to_text())
        return path

    def gen_data(self, out=None, n=6, spec=True):
        args = ["gen-data", "--out", out or self.data_dir, "--n", n, "--seed", 0]
        if spec:
            args += ["--spec", self.spec_path]
        result = self.invoke(*args)
        self.assertEqual(result.exit_code, 0, result.output)
        return result

    def train(self, *extra, **overrides):
        config_path = self.write_config(**overrides)
        return self.invoke(
            "train",
            "--config",
            config_path,
            "--data",
            self.data_dir,
            "--out",
            self.out_dir,
            *extra
        )

    def evaluate(self, *extra, data=None):
        ckpt = os.path.join(self.out_dir, "best.ckpt")
        data_dir = data or self.data_dir
        return self.invoke("eval", "--ckpt", ckpt, "--data", data_dir, *extra)

    # [CLI TESTS]

    def test_version(self):
        result = self.invoke("--version")
        self.assertEqual(result.exit_code, 0)
        self.assertIn(config.VERSION, result.output)

    def test_gen_data(self):
        first = os.path.join(self.tmp_dir, "first")
        second = os.path.join(self.tmp_dir, "second")
        result = self.gen_data(first, n=10, spec=False)
        self.assertIn("train=8 dev=1 test=1", result.output)
        self.gen_data(second, n=10, spec=False)
        with open(os.path.join(first, "manifest.jsonl"), "rb") as a:
            with open(os.path.join(second, "manifest.jsonl"), "rb") as b:
                self.assertEqual(a.read(), b.read())

    def test_gen_data_too_small(self):
        result = self.invoke("gen-data", "--out", self.data_dir, "--n", 2)
        self.assertEqual(result.exit_code, 2)

    def test_gen_data_unwritable(self):
        blocker = os.path.join(self.tmp_dir, "file")
        open(blocker, "w").close()
        out = os.path.join(blocker, "corpus")
        result = self.invoke("gen-data", "--out", out, "--n", 3)
        self.assertEqual(result.exit_code, 1)

    def test_train(self):
        self.gen_data()
        result = self.train(st_mode="none", epochs=2)
        self.assertEqual(result.exit_code, 0, result.output)
        with open(os.path.join(self.out_dir, "metrics.jsonl")) as handle:
            records = [json.loads(line) for line in handle]
        self.assertEqual([r["epoch"] for r in records], [0, 1])
        self.assertTrue(all(r["grad_norm_asr_from_rec"] == 0.0 for r in records))
        with open(os.path.join(self.out_dir, "manifest.json")) as handle:
            manifest = json.load(handle)
        self.assertEqual(len(manifest["corpus_hash"]), 64)
        self.assertIn("st_mode = none", manifest["config_text"])
        self.assertEqual(manifest["version"], config.VERSION)

    def test_train_resume(self):
        self.gen_data()
        first = self.train()
        self.assertEqual(first.exit_code, 0, first.output)
        last = os.path.join(self.out_dir, "last.ckpt")
        resumed = self.train("--resume", last, epochs=2)
        self.assertEqual(resumed.exit_code, 0, resumed.output)
        with open(os.path.join(self.out_dir, "metrics.jsonl")) as handle:
            self.assertEqual([json.loads(line)["epoch"] for line in handle], [0, 1])

    def test_train_malformed_config(self):
        self.gen_data()
        path = os.path.join(self.tmp_dir, "bad.cfg")
        with open(path, "w") as handle:
            handle.write("st_mode = none\nwarmup = 10\n")
        result = self.invoke(
            "train", "--config", path, "--data", self.data_dir, "--out", self.out_dir
        )
        self.assertEqual(result.exit_code, 2)
        self.assertIn("line 2", result.output)

    def test_train_tau_grid(self):
        self.gen_data()
        result = self.train("--tau-grid", "0.25,0.5,1,2", epochs=0)
        self.assertEqual(result.exit_code, 0, result.output)
        for name in ("tau-0.25", "tau-0.5", "tau-1", "tau-2"):
            with open(os.path.join(self.out_dir, name, "manifest.json")) as handle:
                self.assertIn("tau = ", json.load(handle)["config_text"])

    def test_train_bad_tau_grid(self):
        self.gen_data()
        result = self.train("--tau-grid", "0.5,-1", epochs=0)
        self.assertEqual(result.exit_code, 2)

    def test_train_numeric_abort(self):
        from exceptions import NumericInputError

        self.gen_data()
        error = NumericInputError("logits contain NaN")
        with patch("chain.run_epoch", side_effect=error):
            result = self.train()
        self.assertEqual(result.exit_code, 3)

    def test_gradcheck_st(self):
        result = self.invoke("gradcheck", "--scope", "st")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("st_argmax.identity", result.output)

    def test_gradcheck_failure(self):
        from gradcheck import CheckResult

        failing = [CheckResult("matmul", 0.5, 1e-4), CheckResult("tanh", 0.0, 1e-4)]
        with patch("cli.run_checks", return_value=failing):
            result = self.invoke("gradcheck", "--scope", "primitives")
        self.assertEqual(result.exit_code, 1)
        self.assertIn("Failed: matmul", result.output)

    def test_eval(self):
        from chain import load_checkpoint
        from data import load_corpus

        self.gen_data()
        self.train()
        result = self.evaluate("--beam", 1)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("CER:", result.output)

        model, _ = load_checkpoint(os.path.join(self.out_dir, "best.ckpt"))
        corpus = load_corpus(self.data_dir)
        for utt in corpus.dev:
            greedy = model.asr.generate(utt.features, "greedy")
            hyp = corpus.vocabulary.decode(greedy.indices)
            self.assertIn("{}\t{}\t{}".format(utt.id, utt.text, hyp), result.output)

    def test_eval_empty_split(self):
        self.gen_data()
        self.train(epochs=0)
        trimmed = os.path.join(self.tmp_dir, "trimmed")
        shutil.copytree(self.data_dir, trimmed)
        manifest = os.path.join(trimmed, "manifest.jsonl")
        with open(manifest) as handle:
            lines = [line for line in handle if '"split": "train"' in line]
        with open(manifest, "w") as handle:
            handle.writelines(lines)
        result = self.evaluate(data=trimmed)
        self.assertEqual(result.exit_code, 2)

    def test_eval_dimension_mismatch(self):
        self.gen_data()
        self.train(epochs=0)
        other = os.path.join(self.tmp_dir, "default")
        self.gen_data(other, n=3, spec=False)
        result = self.evaluate(data=other)
        self.assertEqual(result.exit_code, 1)

    def test_ablate(self):
        self.gen_data()
        config_path = self.write_config()
        with patch.object(config, "REDIS_URL", None), patch.object(
            config, "THREADS", 1
        ):
            result = self.invoke(
                "ablate", "--config", config_path, "--data", self.data_dir, "--seeds", 2
            )
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("/2 seeds", result.output)
