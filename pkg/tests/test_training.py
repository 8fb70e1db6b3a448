import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch

from hgmamba.common.errors import CheckpointFormatError, ConfigError, DimensionError, UsageError
from hgmamba.common.io import read_history
from hgmamba.common.numkit import make_rng
from hgmamba.dataset.synthetic import SynthConfig, generate_dataset
from hgmamba.models.hgmamba import ModelConfig, init_params
from hgmamba.training.checkpoint import *
from hgmamba.training.optimizer import *
from hgmamba.training.trainer import *


def tiny_model_config(**kwargs) -> ModelConfig:
    values = dict(in_dim=4, d=4, n_layers=1, d_state=2, m_sequences=2, top_k=2, conv_width=2, attention_hidden=4)
    values.update(kwargs)
    return ModelConfig(**values)


def tiny_train_config(**kwargs) -> TrainConfig:
    values = dict(lr=1.e-2, epochs=2, batch_size=2, milestones=[1], progress_bar=False)
    values.update(kwargs)
    return TrainConfig(**values)


class OptimizerTestCase(unittest.TestCase):
    def test_adam_matches_torch(self):
        params = init_params(tiny_model_config())
        names = list(params.named_arrays().keys())
        tensors = [torch.tensor(array.copy(), requires_grad=True) for array in params.named_arrays().values()]
        optimizer = torch.optim.AdamW(tensors, lr=1.e-2, betas=(0.9, 0.999), eps=1.e-8, weight_decay=0.05)
        state = AdamState()

        rng = make_rng(0)
        for _ in range(3):
            grads = params.map(lambda array: rng.normal(size=array.shape))
            for tensor, grad in zip(tensors, grads.named_arrays().values()):
                tensor.grad = torch.tensor(grad)
            optimizer.step()
            adam_step(params, grads, state, 1.e-2, 0.05)

        self.assertEqual(state.step, 3)
        for name, tensor in zip(names, tensors):
            self.assertTrue(np.allclose(params.named_arrays()[name], tensor.detach().numpy(), atol=1.e-12), name)

    def test_frozen(self):
        params = init_params(tiny_model_config())
        before = params.copy()
        adam_step(params, params.map(np.ones_like), AdamState(), 0.1, frozen=("kind_weights",))
        self.assertTrue(np.array_equal(params.blocks[0].kind_weights, before.blocks[0].kind_weights))
        self.assertFalse(np.array_equal(params.blocks[0].weight, before.blocks[0].weight))

    def test_lr_schedule(self):
        cfg = TrainConfig(lr=0.1, epochs=10, milestones=[3, 7], gamma=0.5)
        tensor = torch.zeros(1, requires_grad=True)
        optimizer = torch.optim.SGD([tensor], lr=0.1)
        scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=[3, 7], gamma=0.5)
        for epoch in range(10):
            self.assertAlmostEqual(lr_schedule(epoch, cfg), optimizer.param_groups[0]["lr"])
            optimizer.step()
            scheduler.step()
        with self.assertRaises(AssertionError):
            lr_schedule(10, cfg)


class CheckpointTestCase(unittest.TestCase):
    def test_round_trip(self):
        params = init_params(tiny_model_config(n_layers=2))
        arrays = decode_checkpoint(encode_checkpoint(params.named_arrays()))
        self.assertEqual(list(arrays.keys()), list(params.named_arrays().keys()))
        restored = init_params(tiny_model_config(n_layers=2), seed=1)
        restored.load_arrays(arrays)
        for name, array in params.named_arrays().items():
            self.assertTrue(np.array_equal(restored.named_arrays()[name], array))

        scalar = decode_checkpoint(encode_checkpoint({"s": np.array(2.5)}))
        self.assertEqual(scalar["s"].shape, ())

    def test_errors(self):
        data = encode_checkpoint({"w": np.ones((2, 3))})
        with self.assertRaises(CheckpointFormatError):
            decode_checkpoint(b"XXXX" + data[4:])
        with self.assertRaises(CheckpointFormatError):
            decode_checkpoint(data[:-8])
        with self.assertRaises(CheckpointFormatError):
            decode_checkpoint(data + b"\x00")
        with self.assertRaises(FileNotFoundError):
            load_checkpoint("/nonexistent/best.ckpt")

        params = init_params(tiny_model_config())
        with self.assertRaises(DimensionError):
            params.load_arrays({**params.named_arrays(), "head.cls_bias": np.zeros(5)})


class TrainerTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.tmpdir = tempfile.TemporaryDirectory()
        cls.data_dir = Path(cls.tmpdir.name) / "data"
        generate_dataset(SynthConfig(grid_rows=3, grid_cols=3, d=4, seed=1), cls.data_dir, 10)

    @classmethod
    def tearDownClass(cls) -> None:
        cls.tmpdir.cleanup()

    def test_train(self):
        out_dir = Path(self.tmpdir.name) / "run"
        trainer = Trainer(tiny_model_config(), tiny_train_config(), self.data_dir, out_dir)
        history = trainer.train()
        self.assertEqual([record["epoch"] for record in history], [0, 1])
        self.assertAlmostEqual(history[1]["lr"], 1.e-3)
        # 6 train bags in batches of 2
        self.assertEqual(trainer.num_steps, 6)
        for name in (BEST_CHECKPOINT, LAST_CHECKPOINT, HISTORY_FILE, CONFIG_FILE):
            self.assertTrue((out_dir / name).is_file(), name)
        self.assertEqual(len(read_history(out_dir / HISTORY_FILE)), 2)

        best = load_params(out_dir / BEST_CHECKPOINT, trainer.model_config)
        metrics = evaluate(trainer.eval_dataset, best, trainer.model_config)
        self.assertAlmostEqual(metrics.acc, history[trainer.best_epoch]["val_acc"])

        # Same seeds, same history
        again = Trainer(tiny_model_config(), tiny_train_config(), self.data_dir)
        self.assertEqual([r["train_loss"] for r in again.train()], [r["train_loss"] for r in history])

    def test_resume(self):
        out_dir = Path(self.tmpdir.name) / "resume"
        first = Trainer(tiny_model_config(), tiny_train_config(epochs=3), self.data_dir, out_dir)
        first.init()
        first.train(2)

        trainer = Trainer(tiny_model_config(), tiny_train_config(epochs=3), self.data_dir, out_dir)
        trainer.init()
        trainer.resume()
        self.assertEqual(trainer.num_epochs, 2)
        self.assertEqual(trainer.num_steps, first.num_steps)
        self.assertEqual(trainer.best_epoch, first.best_epoch)
        self.assertAlmostEqual(trainer.best_score, first.best_score)
        for name, array in first.params.named_arrays().items():
            self.assertTrue(np.array_equal(trainer.params.named_arrays()[name], array), name)

        history = trainer.train()
        self.assertEqual([record["epoch"] for record in history], [0, 1, 2])
        self.assertEqual(len(read_history(out_dir / HISTORY_FILE)), 3)

        shorter = Trainer(tiny_model_config(), tiny_train_config(epochs=2), self.data_dir, out_dir)
        shorter.init()
        with self.assertRaises(UsageError):
            shorter.resume()
        empty = Trainer(tiny_model_config(), tiny_train_config(), self.data_dir, Path(self.tmpdir.name) / "empty")
        empty.init()
        with self.assertRaises(UsageError):
            empty.resume()

    def test_zero_learning_rate(self):
        trainer = Trainer(tiny_model_config(), tiny_train_config(lr=0.0, epochs=1, milestones=[]), self.data_dir)
        trainer.init()
        before = trainer.params.copy()
        trainer.train_epoch(0.0)
        for name, array in trainer.params.named_arrays().items():
            self.assertTrue(np.array_equal(array, before.named_arrays()[name]), name)

    def test_in_dim_from_data(self):
        trainer = Trainer(tiny_model_config(in_dim=9), tiny_train_config(), self.data_dir)
        with self.assertLogs(level="WARNING"):
            trainer.init()
        self.assertEqual(trainer.model_config.in_dim, 4)

    def test_config_errors(self):
        with self.assertRaises(ConfigError):
            Trainer(tiny_model_config(), tiny_train_config(lr=-1.0), self.data_dir)
        with self.assertRaises(ConfigError):
            Trainer(tiny_model_config(), tiny_train_config(milestones=[1, 1]), self.data_dir)
        with self.assertRaises(UsageError):
            evaluate([], init_params(tiny_model_config()), tiny_model_config())

    def test_empty_split(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            generate_dataset(SynthConfig(grid_rows=2, grid_cols=2, d=4), tmpdir, 3, splits=(3, 0, 0))
            with self.assertRaises(UsageError):
                Trainer(tiny_model_config(), tiny_train_config(), tmpdir).init()

    def test_average_meter(self):
        meter = AverageMeter()
        for value in (1.0, 2.0, 6.0):
            meter.update(value)
        self.assertAlmostEqual(meter.average, 3.0)


if __name__ == '__main__':
    unittest.main()
