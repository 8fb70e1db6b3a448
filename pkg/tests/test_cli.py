import contextlib
import io
import tempfile
import unittest
from pathlib import Path

import pandas as pd

from hgmamba.cli import *

TINY_MODEL = ["--set", "d=4", "--set", "d_state=2", "--set", "m_sequences=2", "--set", "attention_hidden=4",
              "--set", "n_layers=1", "--set", "top_k=2", "--set", "train.epochs=2", "--set", "milestones=1",
              "--set", "batch_size=3", "--set", "progress_bar=false"]


def run(argv) -> tuple:
    stdout, stderr = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
        status = main(argv)
    return status, stdout.getvalue(), stderr.getvalue()


def parse_values(text: str) -> dict:
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line and " " not in line)


class CLITestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.tmpdir = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmpdir.name)
        cls.data = str(cls.root / "data")
        status, out, _ = run(["synth", "--out", cls.data, "--bags", "10", "--grid", "3x4", "--dim", "4",
                              "--seed", "3"])
        assert status == 0, out

    @classmethod
    def tearDownClass(cls) -> None:
        cls.tmpdir.cleanup()

    def test_synth(self):
        out_dir = self.root / "explicit"
        status, out, _ = run(["synth", "--out", str(out_dir), "--bags", "6", "--grid", "4x4", "--dim", "4",
                              "--splits", "3,2,1", "--high-order", "--classes", "2"])
        self.assertEqual(status, 0)
        values = parse_values(out)
        self.assertEqual((values["n_train"], values["n_val"], values["n_test"]), ("3", "2", "1"))
        self.assertEqual(len(list(out_dir.glob("*.tfb"))), 6)

        status, _, err = run(["synth", "--out", str(out_dir), "--bags", "6", "--splits", "3,3"])
        self.assertEqual(status, 1)
        self.assertIn("[ERROR] synth", err)

    def test_train_and_eval(self):
        out_dir = self.root / "run"
        status, out, err = run(["train", "--data", self.data, "--out", str(out_dir)] + TINY_MODEL)
        self.assertEqual(status, 0, err)
        values = parse_values(out)
        self.assertEqual(values["epochs"], "2")
        self.assertTrue((out_dir / "best.ckpt").is_file())
        self.assertTrue((out_dir / "config.yaml").is_file())

        status, out, err = run(["eval", "--data", self.data, "--checkpoint", str(out_dir / "best.ckpt")])
        self.assertEqual(status, 0, err)
        evaluation = parse_values(out)
        self.assertEqual(evaluation["acc"], values["test_acc"])
        self.assertTrue((out_dir / "metrics_test.txt").is_file())

        status, _, err = run(["eval", "--data", self.data, "--checkpoint", str(self.root / "missing" / "best.ckpt")])
        self.assertEqual(status, 1)
        self.assertIn("[ERROR] eval", err)

        # One more epoch on top of the two recorded ones
        status, out, err = run(["train", "--data", self.data, "--out", str(out_dir), "--resume"] + TINY_MODEL
                               + ["--set", "train.epochs=3"])
        self.assertEqual(status, 0, err)
        self.assertEqual(parse_values(out)["epochs"], "3")
        self.assertEqual(len(pd.read_csv(out_dir / "history.csv")), 3)

    def test_sweep(self):
        out_dir = self.root / "sweep"
        status, _, err = run(["train", "--data", self.data, "--out", str(out_dir), "--sweep", "top_k=1,3"]
                             + TINY_MODEL)
        self.assertEqual(status, 0, err)
        report = pd.read_csv(out_dir / SWEEP_REPORT, sep="\t")
        self.assertEqual(report["key"].tolist(), ["model.top_k", "model.top_k"])
        self.assertEqual(report["value"].tolist(), [1, 3])
        self.assertTrue((out_dir / "model.top_k=3" / "history.csv").is_file())

    def test_bad_override(self):
        status, _, err = run(["train", "--data", self.data, "--out", str(self.root / "bad"), "--set", "top_k=0"])
        self.assertEqual(status, 1)
        self.assertIn("top_k", err)

    def test_bench(self):
        out_dir = self.root / "bench"
        status, out, err = run(["bench", "--n-list", "100,200,400", "--dim", "16", "--layers", "1",
                                "--out", str(out_dir)])
        self.assertEqual(status, 0, err)
        for name in (HGMAMBA_CURVE, ATTENTION_CURVE, BENCH_TABLE):
            self.assertTrue((out_dir / name).is_file(), name)
        curve = pd.read_csv(out_dir / HGMAMBA_CURVE, sep="\t")
        self.assertEqual(curve["n"].tolist(), [100, 200, 400])
        values = parse_values(out)
        self.assertEqual(len(values["hgmamba_growth"].split(",")), 2)
        self.assertRegex(out, r"(?m)^activation_memory=\d+\.\d{4} GiB$")
        self.assertRegex(out, r"(?m)^attention_activation_memory=\d+\.\d{4} GiB$")

    def test_scan(self):
        argv = ["scan", "--data", self.data, "--bag", "bag_00001", "--seed", "5"]
        status, out, err = run(argv)
        self.assertEqual(status, 0, err)
        self.assertTrue(out.startswith("bag=bag_00001\nn_nodes=12\n"))
        self.assertEqual(run(argv)[1], out)
        self.assertNotEqual(run(argv[:-1] + ["6"])[1], out)

        status, _, err = run(["scan", "--data", self.data, "--bag", "bag_99999"])
        self.assertEqual(status, 1)

    def test_gradcheck(self):
        status, out, _ = run(["gradcheck", "--size", "tiny"])
        self.assertEqual(status, 0)
        self.assertEqual(parse_values(out)["failures"], "0")


if __name__ == '__main__':
    unittest.main()
