import tempfile
import unittest
from pathlib import Path

from hydra import compose, initialize_config_dir
from omegaconf import OmegaConf

from hgmamba.common.errors import ConfigError
from hgmamba.training.config import *

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"


class ConfigTestCase(unittest.TestCase):
    def test_defaults(self):
        config = load_config()
        self.assertEqual(config.model.top_k, 3)
        self.assertEqual(config.model.m_sequences, 8)
        self.assertAlmostEqual(config.model.t_ratio, 0.7)
        self.assertEqual(config.train.milestones, [60, 90])
        self.assertEqual(config.train.batch_size, 12)
        self.assertIsNone(config.data_dir)

    def test_resolve_key(self):
        self.assertEqual(resolve_key("top_k"), "model.top_k")
        self.assertEqual(resolve_key("d"), "model.d")
        self.assertEqual(resolve_key("seed"), "train.seed")
        self.assertEqual(resolve_key("grid_rows"), "synth.grid_rows")
        self.assertEqual(resolve_key("synth.seed"), "synth.seed")
        self.assertEqual(resolve_key("data_dir"), "data_dir")
        with self.assertRaises(ConfigError):
            resolve_key("depth")
        with self.assertRaises(ConfigError):
            resolve_key("model.lr")

    def test_config_files(self):
        config = load_config(CONFIG_DIR / "example.cfg")
        self.assertEqual(config.model.mode, "hypergraph")
        self.assertEqual(config.train.milestones, [60, 90])

        acceptance = load_config(CONFIG_DIR / "acceptance.cfg")
        self.assertEqual(acceptance.model.d_state, 8)
        self.assertEqual(acceptance.train.epochs, 40)
        self.assertEqual(acceptance.train.milestones, [20, 30])

        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "run.cfg"
            path.write_text("# comment\n\ntop_k = 5\nmodel.scan_strategy=hdfs\nmilestones=2\ntrain.epochs=4\n",
                            encoding="utf-8")
            config = load_config(path, overrides=["top_k=1"])
            self.assertEqual(config.model.top_k, 1)
            self.assertEqual(config.model.scan_strategy, "hdfs")
            self.assertEqual(config.train.milestones, [2])

        with self.assertRaises(ConfigError):
            load_config("/nonexistent/run.cfg")

    def test_invalid_entries(self):
        for overrides in (["top_k=abc"], ["top_k=0"], ["mode=dense"], ["t_ratio=1.5"], ["unknown=1"],
                          ["top_k"], ["train.milestones=5,3"], ["lr=-0.1"], ["synth.d=1"]):
            with self.assertRaises(ConfigError, msg=str(overrides)):
                load_config(overrides=overrides)
        self.assertEqual(load_config(overrides=["lr=0"]).train.lr, 0.0)

    def test_hydra_composition(self):
        with initialize_config_dir(config_dir=str(CONFIG_DIR), version_base=None):
            for model, expected in (("hgmamba", dict(mode="hypergraph", use_ssm=True)),
                                    ("gmamba", dict(mode="rule_only", use_ssm=True)),
                                    ("hgcn", dict(mode="hypergraph", use_ssm=False)),
                                    ("mean_pool", dict(n_layers=0, pooling="mean")),
                                    ("ssm", dict(use_hgconv=False, bidirectional=False)),
                                    ("bissm", dict(use_hgconv=False, bidirectional=True))):
                cfg = compose(config_name="hgmamba", overrides=[f"model={model}", "data_dir=/tmp/bags",
                                                                "model.top_k=4"])
                config: ExperimentConfig = OmegaConf.to_object(
                    OmegaConf.merge(OmegaConf.structured(ExperimentConfig), cfg))
                validate_config(config)
                self.assertEqual(config.data_dir, "/tmp/bags")
                self.assertEqual(config.model.top_k, 4)
                for key, value in expected.items():
                    self.assertEqual(getattr(config.model, key), value, f"{model}.{key}")


if __name__ == '__main__':
    unittest.main()
