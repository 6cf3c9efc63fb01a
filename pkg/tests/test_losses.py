import math
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TestConfig
from encoders import forward, init_random, layer_tensors_from_flat
from losses import (
    BatchTooSmallError,
    LossConfigError,
    LossSettings,
    adaptive_soft_labels,
    build_representations,
    cosine_matrix,
    hard_label_loss,
    intra_subject_loss,
    objective,
    regularization_loss,
    representations_from_layers,
    resolve_k,
    total_loss,
)
from tensor_core import GradTape, Tensor, grad_check, segment

GRADIENT_TOLERANCE = 1e-4


def brute_force_alpha(z, v, k, gamma, exponent_t):
    """Explicit sort and explicit softmax, one row at a time."""
    lifted = np.hstack([v, v])
    n = len(z)
    alpha = np.zeros((n, n))
    for i in range(n):
        scores = [float(np.dot(z[i], lifted[j])) for j in range(n)]
        others = sorted((j for j in range(n) if j != i), key=lambda j: (-scores[j], j))
        beta = [0.0] * n
        for j in others[:k]:
            beta[j] = scores[j]
        beta[i] = gamma * scores[i]
        top = max(beta)
        exps = [math.exp(b - top) for b in beta]
        total = sum(exps)
        powered = [(e / total) ** exponent_t for e in exps]
        norm = sum(powered)
        alpha[i] = [p / norm for p in powered]
    return alpha


class TestRepresentations(TestConfig, unittest.TestCase):
    def setUp(self):
        super().setUp()
        self.w = init_random(self.encoder_config, 10)
        self.theta = init_random(self.encoder_config, 11)
        self.batch = np.random.default_rng(0).normal(size=(4, 6))

    def test_z_is_r_then_q(self):
        reps = build_representations(self.psi, self.w, self.theta, self.batch, GradTape())
        self.assertEqual(reps.z.shape, [4, 8])
        np.testing.assert_array_equal(reps.z.data[:, :4], reps.r.data)
        np.testing.assert_array_equal(reps.z.data[:, 4:], reps.q.data)
        self.assertEqual(reps.r_pre.shape, [4, 8])

    def test_frozen_encoder_stays_off_tape(self):
        tape = GradTape()
        reps = build_representations(self.psi, self.w, self.theta, self.batch, tape)
        self.assertTrue(reps.r.tracked)
        self.assertTrue(reps.q.tracked)
        self.assertFalse(reps.v.tracked)
        again = build_representations(self.psi, self.w, self.theta, self.batch, GradTape())
        np.testing.assert_array_equal(reps.v.data, again.v.data)

    def test_single_row_batch(self):
        with self.assertRaises(BatchTooSmallError):
            build_representations(self.psi, self.w, self.theta, self.batch[:1], GradTape())


class TestCosineMatrix(TestConfig, unittest.TestCase):
    def test_parallel_orthogonal_antiparallel(self):
        v = Tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        z = Tensor([[2.0, 0.0, 2.0, 0.0]] * 3)
        cosm = cosine_matrix(z, v).data
        np.testing.assert_allclose(cosm[0], [0.0, 1.0, 2.0], atol=1e-12)

    def test_scaling_z_changes_scores_not_cosines(self):
        rng = np.random.default_rng(3)
        z, v = rng.normal(size=(4, 6)), rng.normal(size=(4, 3))
        scaled = z.copy()
        scaled[1] *= 3.0
        np.testing.assert_allclose(cosine_matrix(z, v).data, cosine_matrix(scaled, v).data, atol=1e-12)
        before = adaptive_soft_labels(z, v, 2, 2.0, 1.0).ass.data
        after = adaptive_soft_labels(scaled, v, 2, 2.0, 1.0).ass.data
        self.assertFalse(np.allclose(before[1], after[1]))


class TestHardLabelLoss(TestConfig, unittest.TestCase):
    def test_two_by_two_closed_form(self):
        a, b, c, d = 0.3, 1.2, 0.7, 0.1
        expected = -0.5 * (
            math.log(math.exp(a) / (math.exp(a) + math.exp(b)))
            + math.log(math.exp(d) / (math.exp(c) + math.exp(d)))
        )
        self.assertAlmostEqual(hard_label_loss(Tensor([[a, b], [c, d]])).item(), expected, places=12)

    def test_uniform_rows_give_log_n(self):
        self.assertAlmostEqual(hard_label_loss(Tensor(np.full((5, 5), 0.4))).item(), math.log(5), places=12)

    def test_random_matrix_matches_scalar_recomputation(self):
        cosm = np.random.default_rng(5).uniform(0, 2, size=(4, 4))
        expected = -np.mean(
            [cosm[i, i] - math.log(sum(math.exp(x) for x in cosm[i])) for i in range(4)]
        )
        self.assertAlmostEqual(hard_label_loss(Tensor(cosm)).item(), expected, places=12)


class TestAdaptiveSoftLabels(TestConfig, unittest.TestCase):
    def test_matches_brute_force_construction(self):
        for n in range(2, 9):
            for k in range(1, n):
                for trial in range(50):
                    rng = np.random.default_rng([n, k, trial])
                    z, v = rng.normal(size=(n, 6)), rng.normal(size=(n, 3))
                    exponent_t = 1.0 if trial % 2 else 0.5
                    labels = adaptive_soft_labels(z, v, k, 2.0, exponent_t)
                    np.testing.assert_allclose(
                        labels.alpha.data, brute_force_alpha(z, v, k, 2.0, exponent_t), rtol=0, atol=1e-12
                    )
                    np.testing.assert_allclose(labels.alpha.data.sum(axis=1), 1.0, atol=1e-9)

    def test_two_rows_keep_both_off_diagonals(self):
        rng = np.random.default_rng(1)
        z, v = rng.normal(size=(2, 4)), rng.normal(size=(2, 2))
        labels = adaptive_soft_labels(z, v, 1, 2.0, 1.0)
        ass = labels.ass.data
        np.testing.assert_allclose(
            labels.beta.data, [[2.0 * ass[0, 0], ass[0, 1]], [ass[1, 0], 2.0 * ass[1, 1]]]
        )

    def test_diagonal_boost(self):
        z = np.array([[0.5, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]])
        v = np.array([[1.0, 0.0], [0.0, 1.0]])
        labels = adaptive_soft_labels(z, v, 1, 2.0, 1.0)
        self.assertAlmostEqual(labels.ass.data[0, 0], 1.5)
        self.assertAlmostEqual(labels.beta.data[0, 0], 3.0)

    def test_ties_keep_the_lower_column(self):
        z = np.ones((4, 2))
        v = np.ones((4, 1))
        labels = adaptive_soft_labels(z, v, 1, 2.0, 1.0)
        beta = labels.beta.data
        self.assertNotEqual(beta[0, 1], 0.0)
        self.assertEqual(beta[0, 2], 0.0)
        self.assertNotEqual(beta[3, 0], 0.0)
        self.assertEqual(beta[3, 1], 0.0)

    def test_beta_row_support(self):
        rng = np.random.default_rng(9)
        z, v = rng.normal(size=(6, 4)), rng.normal(size=(6, 2))
        beta = adaptive_soft_labels(z, v, 3, 2.0, 1.0).beta.data
        self.assertTrue(np.all(np.count_nonzero(beta, axis=1) == 4))

    def test_k_out_of_range(self):
        z, v = np.ones((3, 2)), np.ones((3, 1))
        for k in (0, 3):
            with self.assertRaises(LossConfigError):
                adaptive_soft_labels(z, v, k, 2.0, 1.0)

    def test_non_positive_gamma(self):
        with self.assertRaises(LossConfigError):
            adaptive_soft_labels(np.ones((3, 2)), np.ones((3, 1)), 1, 0.0, 1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 7), st.integers(0, 10_000), st.floats(0.2, 3.0))
    def test_alpha_rows_are_distributions(self, n, seed, exponent_t):
        rng = np.random.default_rng(seed)
        z, v = rng.normal(size=(n, 4)), rng.normal(size=(n, 2))
        alpha = adaptive_soft_labels(z, v, max(1, n // 2), 2.0, exponent_t).alpha.data
        self.assertTrue(np.all(alpha >= 0))
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 7), st.integers(0, 10_000), st.floats(1.0, 4.0), st.floats(0.0, 2.0))
    def test_larger_gamma_never_lowers_diagonal_mass(self, n, seed, gamma, extra):
        rng = np.random.default_rng(seed)
        z, v = rng.normal(size=(n, 4)), rng.normal(size=(n, 2))
        ass = adaptive_soft_labels(z, v, 1, gamma, 1.0).ass.data
        low = adaptive_soft_labels(z, v, 1, gamma, 1.0).alpha.data
        high = adaptive_soft_labels(z, v, 1, gamma + extra, 1.0).alpha.data
        for i in range(n):
            if ass[i, i] >= 0:
                self.assertGreaterEqual(high[i, i], low[i, i] - 1e-12)


class TestResolveK(TestConfig, unittest.TestCase):
    def test_integer_k_is_clamped(self):
        self.assertEqual(resolve_k(4, 8), 4)
        self.assertEqual(resolve_k(4, 3), 2)

    def test_ratio(self):
        self.assertEqual(resolve_k(0.5, 8, k_as_ratio=True), 4)
        self.assertEqual(resolve_k(1.0, 8, k_as_ratio=True), 7)

    def test_invalid(self):
        with self.assertRaises(LossConfigError):
            resolve_k(0, 8)
        with self.assertRaises(LossConfigError):
            resolve_k(1.5, 8, k_as_ratio=True)


class TestIntraSubjectLoss(TestConfig, unittest.TestCase):
    def test_identity_alpha_reduces_to_hard_label_loss(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(2, 9))
            cosm = Tensor(rng.uniform(0.0, 2.0, size=(n, n)))
            self.assertAlmostEqual(
                intra_subject_loss(cosm, np.eye(n)).item(), hard_label_loss(cosm).item(), delta=1e-12
            )

    def test_uniform_alpha_closed_form(self):
        cosm = np.random.default_rng(2).uniform(0, 2, size=(5, 5))
        expected = np.mean([math.log(np.exp(row).sum()) - row.mean() for row in cosm])
        loss = intra_subject_loss(Tensor(cosm), np.full((5, 5), 0.2)).item()
        self.assertAlmostEqual(loss, expected, places=12)


class TestRegularizationAndTotal(TestConfig, unittest.TestCase):
    def test_regularization_values(self):
        rows = np.array([[1.0, 2.0], [3.0, -1.0]])
        self.assertAlmostEqual(regularization_loss(Tensor(rows), Tensor(rows)).item(), 0.0, places=12)
        self.assertAlmostEqual(regularization_loss(Tensor(rows), Tensor(-rows)).item(), 2.0, places=12)
        orthogonal = np.array([[-2.0, 1.0], [1.0, 3.0]])
        self.assertAlmostEqual(regularization_loss(Tensor(rows), Tensor(orthogonal)).item(), 1.0, places=12)

    def test_total_loss(self):
        self.assertAlmostEqual(total_loss(1.0, 0.5, 0.7).item(), 0.85, places=12)
        self.assertEqual(total_loss(1.0, 0.5, 1.0).item(), 1.0)
        self.assertEqual(total_loss(1.0, 0.5, 0.0).item(), 0.5)

    def test_lambda_out_of_range(self):
        with self.assertRaises(LossConfigError):
            total_loss(1.0, 0.5, 1.1)

    def test_ablation_switches(self):
        rng = np.random.default_rng(4)
        w, theta = init_random(self.encoder_config, 1), init_random(self.encoder_config, 2)
        reps = build_representations(self.psi, w, theta, rng.normal(size=(4, 6)), GradTape())
        hard = objective(reps, LossSettings(use_reg_loss=False, use_adaptive_soft_label=False))
        self.assertIsNone(hard.labels)
        self.assertEqual(hard.total.item(), hard.insub.item())
        full = objective(reps, LossSettings(k=2))
        self.assertAlmostEqual(full.total.item(), 0.7 * full.insub.item() + 0.3 * full.reg.item(), places=12)
        no_topk = objective(reps, LossSettings(use_topk_gamma=False))
        self.assertEqual(no_topk.labels.k, 3)
        self.assertEqual(no_topk.labels.gamma, 1.0)


class TestLossGradients(TestConfig, unittest.TestCase):
    def test_every_loss_passes_finite_differences(self):
        for point in range(10):
            rng = np.random.default_rng(100 + point)
            n = int(rng.integers(3, 7))
            z = rng.normal(size=(n, 8))
            v = Tensor(rng.normal(size=(n, 4)))
            q_pre = Tensor(rng.normal(size=(n, 5)))
            labels = adaptive_soft_labels(z, v, min(4, n - 1), 2.0, 1.0)
            self.assertLess(grad_check(lambda x: hard_label_loss(cosine_matrix(x, v)), z), GRADIENT_TOLERANCE)
            self.assertLess(
                grad_check(lambda x: intra_subject_loss(cosine_matrix(x, v), labels), z), GRADIENT_TOLERANCE
            )
            self.assertLess(
                grad_check(lambda x: regularization_loss(x, q_pre), rng.normal(size=(n, 5))),
                GRADIENT_TOLERANCE,
            )

    def test_total_loss_gradient_in_w_and_theta(self):
        config = self.encoder_config
        for point in range(10):
            rng = np.random.default_rng(200 + point)
            batch = rng.normal(size=(4, 6))
            w, theta = init_random(config, rng), init_random(config, rng)
            at_point = build_representations(self.psi, w, theta, batch, GradTape())
            labels = adaptive_soft_labels(at_point.z, at_point.v, 2, 2.0, 1.0)
            flat = np.concatenate([w.flatten(), theta.flatten()])
            size = config.parameter_count

            def loss(params):
                reps = representations_from_layers(
                    self.psi,
                    layer_tensors_from_flat(segment(params, 0, (size,)), config),
                    layer_tensors_from_flat(segment(params, size, (size,)), config),
                    batch,
                    config,
                )
                insub = intra_subject_loss(cosine_matrix(reps.z, reps.v), labels)
                return total_loss(insub, regularization_loss(reps.r_pre, reps.q_pre), 0.7)

            self.assertLess(grad_check(loss, flat), GRADIENT_TOLERANCE)

    def test_v_is_the_frozen_encoder_output(self):
        batch = np.random.default_rng(0).normal(size=(3, 6))
        w = init_random(self.encoder_config, 1)
        reps = build_representations(self.psi, w, w, batch, GradTape())
        np.testing.assert_array_equal(reps.v.data, forward(self.psi, batch).final.data)


if __name__ == "__main__":
    unittest.main()
