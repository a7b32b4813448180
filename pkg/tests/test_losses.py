import math
import unittest

import numpy as np

from gp2f.errors import ConfigError, DimensionError, NumericError, ValidationError
from gp2f.losses import (LossWeights, consistency_mask, contrastive_loss, cross_entropy, fusion_loss,
                         mix_similarity, objective, self_similarity, total_loss, view_contrastive_loss)


def unit(row):
    norm = math.sqrt(sum(x * x for x in row))
    return [x / max(norm, 1e-12) for x in row]


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def contrastive_oracle(h_pre, h_adp, adj, tau):
    n = len(h_pre)
    ug, ua = [unit(r) for r in h_pre], [unit(r) for r in h_adp]

    def anchor_loss(own, other, i):
        psi = lambda a, b: math.exp(dot(a, b) / tau)
        pos = psi(own[i], other[i])
        neg = 0.0
        for j in range(n):
            if j == i:
                continue
            mass = psi(own[i], own[j]) + psi(own[i], other[j])
            if adj[i][j]:
                pos += mass
            else:
                neg += mass
        return -math.log(pos / (pos + neg))

    return sum(anchor_loss(ug, ua, i) + anchor_loss(ua, ug, i) for i in range(n)) / (2 * n)


def view_oracle(z1, z2, tau):
    n = len(z1)
    u1, u2 = [unit(r) for r in z1], [unit(r) for r in z2]

    def anchor_loss(own, other, i):
        psi = lambda a, b: math.exp(dot(a, b) / tau)
        neg = sum(psi(own[i], own[j]) + psi(own[i], other[j]) for j in range(n) if j != i)
        return -math.log(psi(own[i], other[i]) / neg)

    return sum(anchor_loss(u1, u2, i) + anchor_loss(u2, u1, i) for i in range(n)) / (2 * n)


def fusion_oracle(s, adj, mask, tau):
    total, count = 0.0, 0
    for i in range(len(s)):
        for j in range(len(s)):
            if not mask[i][j]:
                continue
            z = s[i][j] / tau
            # -log(logistic(z)) and -log(1 - logistic(z))
            total += math.log1p(math.exp(-z)) if adj[i][j] else math.log1p(math.exp(z))
            count += 1
    return total / count


def random_case(seed, max_n=16, d=4):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_n + 1))
    upper = np.triu(rng.random((n, n)) < 0.3, 1)
    adj = (upper | upper.T).astype(float)
    return rng, n, adj, rng.standard_normal((n, d)), rng.standard_normal((n, d))


def value(node):
    return float(np.asarray(node).reshape(()))


class ContrastiveTest(unittest.TestCase):

    def test_single_node(self):
        h = np.array([[0.3, -1.2]])
        self.assertEqual(value(contrastive_loss(h, h * 2, np.zeros((1, 1)), 0.5)), 0.0)

    def test_identical_rows_complete_graph(self):
        n = 5
        h = np.tile([[1.0, 2.0, -0.5]], (n, 1))
        adj = np.ones((n, n)) - np.eye(n)
        self.assertAlmostEqual(value(contrastive_loss(h, h, adj, 0.5)), 0.0, delta=1e-12)

    def test_branches_swap(self):
        _, _, adj, a, b = random_case(3)
        self.assertAlmostEqual(value(contrastive_loss(a, b, adj, 0.5)),
                               value(contrastive_loss(b, a, adj, 0.5)), delta=1e-12)

    def test_loop_oracle(self):
        for seed in range(100):
            rng, n, adj, a, b = random_case(seed)
            tau = float(rng.uniform(0.2, 1.0))
            got = value(contrastive_loss(a, b, adj, tau))
            expected = contrastive_oracle(a.tolist(), b.tolist(), adj.tolist(), tau)
            self.assertGreaterEqual(got, 0.0)
            self.assertAlmostEqual(got, expected, delta=1e-12 * max(1.0, abs(expected)), msg=f'seed {seed}')

    def test_bad_temperature(self):
        h = np.ones((2, 2))
        with self.assertRaises(ConfigError):
            contrastive_loss(h, h, np.zeros((2, 2)), 0.0)


class ViewContrastiveTest(unittest.TestCase):

    def test_orthogonal_pair(self):
        z = np.eye(2)
        self.assertAlmostEqual(value(view_contrastive_loss(z, z, 1.0)), -math.log(math.e / 2), delta=1e-14)

    def test_positive_not_in_denominator(self):
        rng = np.random.default_rng(8)
        a, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
        with_positive = value(contrastive_loss(a, b, np.zeros((6, 6)), 0.5))
        self.assertLess(value(view_contrastive_loss(a, b, 0.5)), with_positive)

    def test_loop_oracle(self):
        for seed in range(100):
            rng, n, _, a, b = random_case(seed)
            if n < 2:
                continue
            tau = float(rng.uniform(0.2, 1.0))
            expected = view_oracle(a.tolist(), b.tolist(), tau)
            self.assertAlmostEqual(value(view_contrastive_loss(a, b, tau)), expected,
                                   delta=1e-12 * max(1.0, abs(expected)), msg=f'seed {seed}')

    def test_views_swap(self):
        _, _, _, a, b = random_case(11)
        self.assertAlmostEqual(value(view_contrastive_loss(a, b, 0.3)), value(view_contrastive_loss(b, a, 0.3)),
                               delta=1e-12)

    def test_single_node(self):
        with self.assertRaises(ValidationError):
            view_contrastive_loss(np.ones((1, 3)), np.ones((1, 3)), 0.5)

    def test_bad_input(self):
        with self.assertRaises(ConfigError):
            view_contrastive_loss(np.ones((2, 2)), np.ones((2, 2)), 0.0)
        with self.assertRaises(DimensionError):
            view_contrastive_loss(np.ones((2, 2)), np.ones((3, 2)), 0.5)


class SimilarityTest(unittest.TestCase):

    def test_self_similarity_oracle(self):
        h = np.random.default_rng(0).standard_normal((6, 3))
        s = np.asarray(self_similarity(h))
        for i in range(6):
            for j in range(6):
                self.assertAlmostEqual(s[i, j], dot(unit(h[i]), unit(h[j])), delta=1e-12)

    def test_zero_rows(self):
        h = np.array([[0.0, 0.0], [1.0, 0.0]])
        np.testing.assert_array_equal(np.asarray(self_similarity(h)), [[0.0, 0.0], [0.0, 1.0]])

    def test_mix_endpoints(self):
        s_pre = np.array([[1.0, 0.2], [0.2, 1.0]])
        s_adp = np.array([[1.0, -0.6], [-0.6, 1.0]])
        np.testing.assert_allclose(np.asarray(mix_similarity(s_pre, s_adp, 1.0)), s_pre, atol=1e-15)
        np.testing.assert_allclose(np.asarray(mix_similarity(s_pre, s_adp, 0.0)), s_adp, atol=1e-15)
        np.testing.assert_allclose(np.asarray(mix_similarity(s_pre, s_adp, 0.5)),
                                   [[1.0, -0.2], [-0.2, 1.0]], atol=1e-15)


class ConsistencyMaskTest(unittest.TestCase):

    def test_truth_table(self):
        s = np.array([[1.0, 0.9, 0.1], [0.9, 1.0, 0.9], [0.1, 0.9, 1.0]])
        a = np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]])
        mask = consistency_mask(s, a, 0.5)
        # (0,1) linked and similar, (0,2) linked but dissimilar, (1,2) unlinked but similar
        expected = np.array([[False, True, False], [True, False, False], [False, False, False]])
        np.testing.assert_array_equal(mask, expected)

    def test_loop_oracle(self):
        for seed in range(100):
            rng, n, adj, _, _ = random_case(seed)
            s = rng.uniform(-1, 1, (n, n))
            t = float(rng.uniform(-0.9, 0.9))
            mask = consistency_mask(s, adj, t)
            for i in range(n):
                for j in range(n):
                    expected = i != j and ((s[i, j] > t) == bool(adj[i, j]))
                    self.assertEqual(bool(mask[i, j]), expected)

    def test_threshold_range(self):
        with self.assertRaises(ConfigError):
            consistency_mask(np.zeros((2, 2)), np.zeros((2, 2)), 1.0)


class FusionLossTest(unittest.TestCase):

    def test_saturated(self):
        s = np.array([[1.0, 1.0], [1.0, 1.0]])
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        mask = np.array([[False, True], [True, False]])
        loss, degenerate = fusion_loss(s, a, mask, 0.01)
        self.assertFalse(degenerate)
        self.assertAlmostEqual(value(loss), 0.0, delta=1e-12)

    def test_zero_similarity_is_log_two(self):
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        mask = ~np.eye(2, dtype=bool)
        loss, _ = fusion_loss(np.zeros((2, 2)), a, mask, 0.05)
        self.assertAlmostEqual(value(loss), math.log(2.0), delta=1e-15)

    def test_empty_mask(self):
        loss, degenerate = fusion_loss(np.ones((3, 3)), np.zeros((3, 3)), np.zeros((3, 3), dtype=bool), 0.05)
        self.assertTrue(degenerate)
        self.assertEqual(value(loss), 0.0)

    def test_decreasing_in_linked_similarity(self):
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        mask = ~np.eye(2, dtype=bool)
        losses = []
        for x in np.linspace(-0.9, 0.9, 7):
            s = np.array([[1.0, x], [x, 1.0]])
            losses.append(value(fusion_loss(s, a, mask, 0.1)[0]))
        self.assertTrue(all(later < earlier for earlier, later in zip(losses, losses[1:])))

    def test_loop_oracle(self):
        for seed in range(100):
            rng, n, adj, _, _ = random_case(seed)
            s = rng.uniform(-1, 1, (n, n))
            mask = rng.random((n, n)) < 0.6
            np.fill_diagonal(mask, False)
            tau = float(rng.uniform(0.2, 1.0))
            loss, degenerate = fusion_loss(s, adj, mask, tau)
            if not mask.any():
                self.assertTrue(degenerate)
                continue
            expected = fusion_oracle(s, adj, mask, tau)
            self.assertAlmostEqual(value(loss), expected, delta=1e-12 * max(1.0, expected), msg=f'seed {seed}')

    def test_batch_restricts_to_subgraph(self):
        rng, n, adj, _, _ = random_case(5)
        s = rng.uniform(-1, 1, (n, n))
        mask = ~np.eye(n, dtype=bool)
        batch = np.arange(0, n, 2)
        sub = np.ix_(batch, batch)
        full, _ = fusion_loss(s[sub], adj[sub], mask[sub], 0.5)
        batched, _ = fusion_loss(s, adj, mask, 0.5, batch=batch)
        self.assertAlmostEqual(value(batched), value(full), delta=1e-12)


class CrossEntropyTest(unittest.TestCase):

    def test_uniform(self):
        self.assertAlmostEqual(value(cross_entropy(np.zeros((3, 7)), [0, 3, 6])), math.log(7), delta=1e-15)

    def test_saturated(self):
        logits = np.array([[100.0, 0.0], [0.0, 100.0]])
        self.assertAlmostEqual(value(cross_entropy(logits, [0, 1])), 0.0, delta=1e-12)

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n, c = int(rng.integers(1, 8)), int(rng.integers(1, 6))
            z = rng.standard_normal((n, c))
            y = rng.integers(c, size=n)
            expected = sum(-z[i, y[i]] + math.log(sum(math.exp(v) for v in z[i])) for i in range(n)) / n
            self.assertAlmostEqual(value(cross_entropy(z, y)), expected, delta=1e-12)


class TotalLossTest(unittest.TestCase):

    def test_weighted_sum(self):
        w = LossWeights(lambda_ctr=0.1, lambda_fus=0.1)
        report = total_loss(1.0, 2.0, 3.0, w)
        self.assertAlmostEqual(report.l_total, 1.5, delta=1e-12)
        self.assertEqual((report.l_cls, report.l_ctr, report.l_fus), (1.0, 2.0, 3.0))

    def test_zero_weights(self):
        w = LossWeights(lambda_ctr=0.0, lambda_fus=0.0)
        self.assertEqual(value(objective(0.7, 5.0, 9.0, w)), 0.7)

    def test_nonfinite_term(self):
        with self.assertRaises(NumericError):
            total_loss(1.0, float('nan'), 0.0, LossWeights())

    def test_weights_validation(self):
        for bad in (dict(tau_ctr=0.0), dict(tau_fus=-1.0), dict(lambda_ctr=-0.1), dict(threshold=1.0),
                    dict(batch_size=0)):
            with self.assertRaises(ConfigError):
                LossWeights(**bad).validate()


if __name__ == '__main__':
    unittest.main()
