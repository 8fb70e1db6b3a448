import unittest

import numpy as np

from hgmamba.common.errors import DimensionError
from hgmamba.common.numkit import make_rng, softmax
from hgmamba.eval.metrics import *


class MetricsTestCase(unittest.TestCase):
    def test_binary_auc(self):
        labels = np.array([0, 0, 1, 1])
        self.assertAlmostEqual(binary_auc(labels == 1, np.array([0.1, 0.4, 0.35, 0.8])), 0.75)
        self.assertAlmostEqual(binary_auc(labels == 1, np.array([0.5, 0.5, 0.5, 0.5])), 0.5)
        self.assertAlmostEqual(binary_auc(labels == 1, np.array([0.1, 0.2, 0.3, 0.4])), 1.0)
        self.assertIsNone(binary_auc(np.array([True, True]), np.array([0.1, 0.2])))

    def test_compute_metrics(self):
        labels = np.array([0, 1, 1, 0])
        probabilities = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.5, 0.5]])
        metrics = compute_metrics(labels, probabilities)
        self.assertAlmostEqual(metrics.acc, 0.75)
        self.assertTrue(np.array_equal(metrics.confusion, [[2, 0], [1, 1]]))
        self.assertAlmostEqual(metrics.macro_f1, (0.8 + 2.0 / 3.0) / 2)
        self.assertAlmostEqual(metrics.auc, 0.75)
        self.assertEqual(metrics.n_samples, 4)
        report = metrics.as_dict()
        self.assertEqual(report["confusion_1_0"], 1)
        self.assertEqual(report["count_0"], 2)

    def test_degenerate(self):
        metrics = compute_metrics(np.array([1, 1]), np.array([[0.3, 0.7], [0.6, 0.4]]))
        self.assertIsNone(metrics.auc)
        self.assertAlmostEqual(metrics.macro_f1, (0.0 + 2.0 / 3.0) / 2)
        self.assertAlmostEqual(macro_f1(np.zeros((2, 2), dtype=np.int64)), 0.0)
        with self.assertRaises(DimensionError):
            compute_metrics(np.zeros(0), np.zeros((0, 2)))

    def test_multiclass_auc(self):
        labels = np.array([0, 1, 2, 2])
        probabilities = np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8], [0.2, 0.2, 0.6]])
        self.assertAlmostEqual(macro_auc(labels, probabilities), 1.0)

    def test_random_scores(self):
        rng = make_rng(13)
        labels = np.arange(10000) % 2 == 1
        self.assertAlmostEqual(binary_auc(labels, rng.random(10000)), 0.5, delta=0.02)

    def test_argmax_invariance(self):
        rng = make_rng(14)
        labels = rng.integers(0, 3, size=50)
        logits = rng.normal(size=(50, 3))

        def metrics_of(values: np.ndarray) -> Metrics:
            return compute_metrics(labels, np.stack([softmax(row) for row in values]))

        reference = metrics_of(logits)
        for scale, shift in ((1.0, 5.0), (3.0, 0.0), (0.5, -2.0)):
            metrics = metrics_of(scale * logits + shift)
            self.assertEqual(metrics.acc, reference.acc)
            self.assertTrue(np.array_equal(metrics.confusion, reference.confusion))
            self.assertEqual(metrics.macro_f1, reference.macro_f1)


if __name__ == '__main__':
    unittest.main()
