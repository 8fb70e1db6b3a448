import unittest

from hgmamba.common import flops
from hgmamba.common.errors import UsageError
from hgmamba.common.numkit import make_rng
from hgmamba.eval.cost_model import *
from hgmamba.eval.gradcheck import random_bag
from hgmamba.models.hgmamba import ModelConfig, init_params


def small_config(**kwargs) -> ModelConfig:
    values = dict(in_dim=6, d=5, n_layers=2, d_state=3, m_sequences=3, top_k=2, conv_width=3, attention_hidden=4)
    values.update(kwargs)
    return ModelConfig(**values)


def bench_config(**kwargs) -> ModelConfig:
    values = dict(in_dim=512, d=512)
    values.update(kwargs)
    return ModelConfig(**values)


class CostModelTestCase(unittest.TestCase):
    def test_instrumented_flops(self):
        bag = random_bag(make_rng(0), (4, 5), 6)
        for kwargs in (dict(), dict(mode="rule_only"), dict(mode="sim_only"), dict(use_ssm=False),
                       dict(bidirectional=False), dict(residual_variant="branches"), dict(pooling="mean"),
                       dict(scan_strategy="harw", t_ratio=0.3), dict(n_layers=0)):
            cfg = small_config(**kwargs)
            params = init_params(cfg)
            measured = instrumented_flops(bag, cfg, params, seed=7)
            report = cost_model(cfg, StructureStats.from_bag(bag, cfg, make_rng(7)))
            self.assertEqual(report.components, measured, kwargs)

    def test_parameter_count(self):
        for kwargs in (dict(), dict(n_layers=0), dict(n_layers=3, n_classes=4), dict(in_dim=11, d_state=1)):
            cfg = small_config(**kwargs)
            self.assertEqual(parameter_count(cfg), init_params(cfg).num_parameters(), kwargs)

    def test_without_hgconv(self):
        bag = random_bag(make_rng(0), (4, 5), 5)
        for kwargs in (dict(), dict(bidirectional=False)):
            cfg = small_config(in_dim=5, use_hgconv=False, **kwargs)
            measured = instrumented_flops(bag, cfg, init_params(cfg), seed=7)
            report = cost_model(cfg, StructureStats.from_bag(bag, cfg, make_rng(7)))
            self.assertEqual(report.components, measured, kwargs)
            self.assertEqual(report.components["hgconv"], 0)
            self.assertEqual(parameter_count(cfg), init_params(cfg).num_parameters(), kwargs)

    def test_estimate(self):
        # Similarity hyperedges and H-DFS lengths do not depend on the tile layout
        cfg = small_config(mode="sim_only", scan_strategy="hdfs")
        bag = random_bag(make_rng(1), (3, 5), 6)
        exact = StructureStats.from_bag(bag, cfg, make_rng(2))
        estimate = StructureStats.estimate(15, cfg)
        self.assertEqual((estimate.n_edges, estimate.nnz), (exact.n_edges, exact.nnz))
        self.assertEqual(estimate.sequence_lengths, exact.sequence_lengths)

        cfg = small_config(t_ratio=0.5)
        stats = StructureStats.estimate(10, cfg)
        self.assertEqual(stats.n_edges, 30)
        self.assertEqual(stats.nnz, 2 * 20 + 3 * 10)
        self.assertEqual(stats.sequence_lengths, [[10, 10, 5], [10, 10, 5]])
        with self.assertRaises(UsageError):
            StructureStats.estimate(0, cfg)

    def test_attention_cost(self):
        self.assertEqual(attention_cost(2, 1, 1), 32)
        self.assertEqual(attention_cost(10, 4, 3), 3 * (8 * 10 * 16 + 4 * 100 * 4))
        with self.assertRaises(UsageError):
            attention_cost(0, 4, 1)
        with self.assertRaises(UsageError):
            attention_cost(4, 4, 0)

    def test_growth(self):
        cfg = bench_config()
        reports = bench([1000, 2000, 4000, 8000], cfg)
        hgmamba_ratios = growth_ratio([report.total_flops for report in reports])
        attention_ratios = growth_ratio([report.attention_flops for report in reports])
        for ratio in hgmamba_ratios:
            self.assertGreaterEqual(ratio, 1.9)
            self.assertLessEqual(ratio, 2.1)
        # Quadratic growth takes over as N increases
        self.assertGreater(attention_ratios[0], 2.5)
        self.assertTrue(all(a < b for a, b in zip(attention_ratios[:-1], attention_ratios[1:])))
        self.assertLess(attention_ratios[-1], 4.0)

        for report in bench([16000, 32000], cfg):
            self.assertGreaterEqual(report.attention_ratio, 5.0)

    def test_memory(self):
        cfg = bench_config()
        small, large = bench([1000, 4000], cfg)
        self.assertAlmostEqual(large.activation_bytes / small.activation_bytes, 4.0, delta=0.05)
        self.assertGreater(large.attention_activation_bytes / small.attention_activation_bytes, 6.0)
        self.assertEqual(small.parameter_bytes, large.parameter_bytes)
        self.assertEqual(small.parameter_bytes, FLOAT_BYTES * parameter_count(cfg))
        self.assertTrue(format_bytes(1024 ** 3).startswith("1.0000"))

    def test_components(self):
        report = bench([500], bench_config())[0]
        self.assertEqual(list(report.components.keys()), list(flops.COMPONENTS))
        self.assertEqual(report.total_flops, sum(report.components.values()))
        no_ssm = bench([500], bench_config(use_ssm=False))[0]
        self.assertEqual(no_ssm.components["selective_scan"], 0)
        self.assertEqual(no_ssm.components["hgconv"], report.components["hgconv"])


if __name__ == '__main__':
    unittest.main()
