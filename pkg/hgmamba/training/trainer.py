import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from tqdm import tqdm

# Hydra and OmegaConf
from hydra.conf import dataclass, field
from omegaconf import OmegaConf

# Project Imports
from hgmamba.common.errors import ConfigError, NumericalError, UsageError
from hgmamba.common.io import read_history, write_history
from hgmamba.common.numkit import derive_seed, make_rng, softmax
from hgmamba.common.utils import assert_debug, get_git_hash
from hgmamba.dataset.dataset import BagDataset, bag_loader
from hgmamba.eval.metrics import Metrics, compute_metrics
from hgmamba.graph.hypergraph import Hypergraph
from hgmamba.models.hgmamba import (ModelConfig, ModelParams, build_structure, init_params, loss_and_gradients,
                                    model_forward, validate_model_config)
from hgmamba.training.checkpoint import load_checkpoint, save_checkpoint
from hgmamba.training.optimizer import AdamState, adam_step, lr_schedule

LAST_CHECKPOINT = "last.ckpt"
BEST_CHECKPOINT = "best.ckpt"
HISTORY_FILE = "history.csv"
CONFIG_FILE = "config.yaml"


@dataclass
class TrainConfig:
    """The configuration of a training run"""
    lr: float = 0.001
    weight_decay: float = 0.0005  # Decoupled weight decay
    epochs: int = 120
    batch_size: int = 12
    milestones: List[int] = field(default_factory=lambda: [60, 90])
    gamma: float = 0.1
    seed: int = 0

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.e-8
    train_edge_weights: bool = True

    eval_seed: int = 0  # Seed of the scan sets drawn during evaluation
    shuffle: bool = True
    progress_bar: bool = True


def validate_train_config(cfg: TrainConfig):
    if cfg.lr < 0.0 or cfg.weight_decay < 0.0:
        raise ConfigError(f"train.lr={cfg.lr} and train.weight_decay={cfg.weight_decay} must be ≥ 0")
    if cfg.epochs < 1 or cfg.batch_size < 1:
        raise ConfigError(f"train.epochs={cfg.epochs} and train.batch_size={cfg.batch_size} must be ≥ 1")
    milestones = list(cfg.milestones)
    if any(b <= a for a, b in zip(milestones[:-1], milestones[1:])):
        raise ConfigError(f"train.milestones={milestones} must be strictly increasing")
    if milestones and (milestones[0] < 0 or milestones[-1] >= cfg.epochs):
        raise ConfigError(f"train.milestones={milestones} must lie in [0, {cfg.epochs})")
    if cfg.gamma <= 0.0:
        raise ConfigError(f"train.gamma={cfg.gamma} must be > 0")


class AverageMeter(object):
    """
    An util object which progressively computes the mean over logged values
    """

    def __init__(self):
        self.average = 0.0
        self.count = 0

    def update(self, value: float):
        """Adds a new item to the meter"""
        self.count += 1
        self.average += (value - self.average) / self.count


def scan_rng(seed: int, bag_id: str, epoch: int = 0) -> np.random.Generator:
    """The generator of the scan sets of a bag, for a given epoch"""
    return make_rng(derive_seed(seed, f"scan/{bag_id}", epoch))


def progress_bar(iterable, total: int, desc: str = "", enabled: bool = True):
    return tqdm(iterable, desc=desc, total=total, ncols=120, ascii=True, disable=not enabled)


# ----------------------------------------------------------------------------------------------------------------------
def predict(bags, cfg: ModelConfig, params: ModelParams, seed: int = 0,
            structures: Optional[Dict[str, Hypergraph]] = None, show_progress: bool = False) -> np.ndarray:
    """Class probabilities [n, C] of the bags, the scan sets are drawn from `seed` (epoch 0)"""
    probabilities = []
    for bag in progress_bar(bags, len(bags), "Evaluation", show_progress):
        structure = structures.get(bag.id) if structures is not None else None
        logits, _, _ = model_forward(bag, cfg, params, scan_rng(seed, bag.id), structure)
        if not np.all(np.isfinite(logits)):
            raise NumericalError(f"Non finite logits for bag `{bag.id}`")
        probabilities.append(softmax(logits))
    return np.stack(probabilities, axis=0)


def evaluate(bags, params: ModelParams, cfg: ModelConfig, seed: int = 0,
             structures: Optional[Dict[str, Hypergraph]] = None, show_progress: bool = False) -> Metrics:
    """Metrics of the model over a split (a BagDataset or a list of bags)"""
    if len(bags) == 0:
        raise UsageError("Cannot evaluate an empty split")
    labels = np.array([bag.label for bag in bags], dtype=np.int64)
    return compute_metrics(labels, predict(bags, cfg, params, seed, structures, show_progress))


def load_params(path: Union[str, Path], cfg: ModelConfig) -> ModelParams:
    """Reads a checkpoint into parameters initialized for `cfg`"""
    params = init_params(cfg)
    params.load_arrays(load_checkpoint(path))
    return params


# ----------------------------------------------------------------------------------------------------------------------
class Trainer:
    """
    Trains the HGMamba network on the train split of a dataset directory

    Every optimizer step averages the gradients of the bags of a batch, computed one bag at a time
    in the order of the batch. After every epoch the model is evaluated on the val split, and the
    checkpoint with the best validation AUC is retained.

    Args:
        model_config (ModelConfig): The model configuration (`in_dim` is set from the data)
        train_config (TrainConfig): The optimization configuration
        data_dir (str): The dataset directory (TFB1 files and manifest)
        out_dir (str): The directory receiving checkpoints, history and configuration (optional)
    """

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig, data_dir: Union[str, Path],
                 out_dir: Optional[Union[str, Path]] = None):
        validate_train_config(train_config)
        self.model_config = model_config
        self.config = train_config
        self.data_dir = Path(data_dir)
        self.out_dir: Optional[Path] = Path(out_dir) if out_dir is not None else None

        self.train_dataset: Optional[BagDataset] = None
        self.eval_dataset: Optional[BagDataset] = None
        self.params: Optional[ModelParams] = None
        self.state = AdamState()
        self.structures: Dict[str, Hypergraph] = {}

        self.num_epochs: int = 0
        self.num_steps: int = 0
        self.history: List[Dict[str, Optional[float]]] = []
        self.best_score: Optional[float] = None
        self.best_epoch: Optional[int] = None
        self.best_params: Optional[ModelParams] = None

    def init(self):
        """
        Loads the train and val splits, initializes the parameters and writes the configuration
        """
        self.train_dataset = BagDataset(self.data_dir, "train")
        self.eval_dataset = BagDataset(self.data_dir, "val")
        if len(self.train_dataset) == 0 or len(self.eval_dataset) == 0:
            raise UsageError(f"The train and val splits of {self.data_dir} must be non empty "
                             f"(got {len(self.train_dataset)} and {len(self.eval_dataset)} bags)")

        in_dim = self.train_dataset[0].dim
        if self.model_config.in_dim != in_dim:
            logging.warning(f"Setting model.in_dim={in_dim} from the data (was {self.model_config.in_dim})")
            self.model_config.in_dim = in_dim
        validate_model_config(self.model_config)
        self.params = init_params(self.model_config, derive_seed(self.config.seed, "init"))

        for dataset in (self.train_dataset, self.eval_dataset):
            for bag in dataset:
                self.structures[bag.id] = build_structure(bag, self.model_config)

        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.write_config()

    def write_config(self):
        """Copies the configuration in the output directory"""
        config_dict = {"model": OmegaConf.structured(self.model_config),
                       "train": OmegaConf.structured(self.config)}
        # Add the git hash to improve tracking of modifications
        git_hash = get_git_hash()
        if git_hash is not None:
            config_dict["git_hash"] = git_hash
        config_dict["_working_dir"] = os.getcwd()
        with open(str(self.out_dir / CONFIG_FILE), "w") as config_file:
            config_file.write(OmegaConf.to_yaml(OmegaConf.create(config_dict)))

    def frozen_tensors(self) -> tuple:
        return () if self.config.train_edge_weights else ("kind_weights",)

    def train_epoch(self, lr: float) -> float:
        """Launches the training for an epoch, returns the average training loss"""
        assert_debug(self.params is not None, "The trainer must be initialized with `init` before training")
        epoch = self.num_epochs
        dataloader = bag_loader(self.train_dataset, self.config.batch_size, self.config.shuffle,
                                self.config.seed, epoch)
        loss_meter = AverageMeter()
        for batch in progress_bar(dataloader, len(dataloader), f"Training epoch n°{epoch}",
                                  self.config.progress_bar):
            grads = self.params.zeros_like()
            for bag in batch:
                loss, _, bag_grads = loss_and_gradients(bag, self.model_config, self.params,
                                                        scan_rng(self.config.seed, bag.id, epoch),
                                                        self.structures.get(bag.id))
                if not np.isfinite(loss):
                    raise NumericalError(f"Non finite loss {loss} for bag `{bag.id}` at epoch {epoch}")
                grads.add_(bag_grads)
                loss_meter.update(loss)
            grads = grads.map(lambda g: g / len(batch))

            adam_step(self.params, grads, self.state, lr, self.config.weight_decay,
                      (self.config.beta1, self.config.beta2), self.config.eps, self.frozen_tensors())
            self.params.clamp_edge_weights()
            self.num_steps += 1
        self.num_epochs += 1
        return loss_meter.average

    def evaluate_epoch(self) -> Metrics:
        return evaluate(self.eval_dataset, self.params, self.model_config, self.config.eval_seed, self.structures)

    def train(self, num_epochs: Optional[int] = None) -> List[Dict[str, Optional[float]]]:
        """
        Launches `num_epochs` of training (defaults to the remaining epochs of the configuration)

        Returns the history: one record (epoch, train_loss, val_acc, val_auc, val_f1, lr) per epoch
        """
        if self.params is None:
            self.init()
        if num_epochs is None:
            num_epochs = self.config.epochs - self.num_epochs
        for _ in range(num_epochs):
            epoch = self.num_epochs
            lr = lr_schedule(epoch, self.config)
            train_loss = self.train_epoch(lr)
            metrics = self.evaluate_epoch()
            self.history.append({"epoch": epoch, "train_loss": train_loss, "val_acc": metrics.acc,
                                 "val_auc": metrics.auc, "val_f1": metrics.macro_f1, "lr": lr})
            logging.info(f"Epoch {epoch}: train loss {train_loss:.6f}, val acc {metrics.acc:.4f}, "
                         f"val auc {metrics.auc}, val f1 {metrics.macro_f1:.4f}")

            # An undefined AUC falls back to the accuracy
            score = metrics.auc if metrics.auc is not None else metrics.acc
            if self.best_score is None or score > self.best_score:
                self.best_score = score
                self.best_epoch = epoch
                self.best_params = self.params.copy()
                self.save_checkpoint(BEST_CHECKPOINT)
            self.save_checkpoint(LAST_CHECKPOINT)
            if self.out_dir is not None:
                write_history(self.out_dir / HISTORY_FILE, self.history)
        return self.history

    def save_checkpoint(self, name: str):
        if self.out_dir is None:
            return
        params = self.best_params if name == BEST_CHECKPOINT else self.params
        save_checkpoint(self.out_dir / name, params.named_arrays())

    def load_checkpoint(self, path: Union[str, Path]):
        """Loads parameters saved by a previous run (the optimizer state restarts from zero)"""
        assert_debug(self.params is not None, "The trainer must be initialized before loading a checkpoint")
        self.params.load_arrays(load_checkpoint(path))

    def resume(self):
        """
        Continues the run found in `out_dir`: the last parameters, the history and the best checkpoint
        are restored, the next epoch follows the last recorded one.
        """
        assert_debug(self.params is not None, "The trainer must be initialized before resuming")
        if self.out_dir is None:
            raise UsageError("Resuming requires the output directory of a previous run")
        for name in (LAST_CHECKPOINT, BEST_CHECKPOINT, HISTORY_FILE):
            if not (self.out_dir / name).is_file():
                raise UsageError(f"Cannot resume from {self.out_dir}: missing {name}")

        self.load_checkpoint(self.out_dir / LAST_CHECKPOINT)
        self.best_params = self.params.copy()
        self.best_params.load_arrays(load_checkpoint(self.out_dir / BEST_CHECKPOINT))

        self.history = []
        for record in read_history(self.out_dir / HISTORY_FILE).to_dict("records"):
            self.history.append({key: None if value is None or np.isnan(value) else value
                                 for key, value in record.items()})
            self.history[-1]["epoch"] = int(self.history[-1]["epoch"])
        if len(self.history) > self.config.epochs:
            raise UsageError(f"The run in {self.out_dir} has {len(self.history)} epochs, "
                             f"more than train.epochs={self.config.epochs}")
        self.num_epochs = len(self.history)
        steps_per_epoch = len(bag_loader(self.train_dataset, self.config.batch_size, False))
        self.num_steps = self.num_epochs * steps_per_epoch

        self.best_score, self.best_epoch = None, None
        for record in self.history:
            score = record["val_auc"] if record["val_auc"] is not None else record["val_acc"]
            if self.best_score is None or score > self.best_score:
                self.best_score, self.best_epoch = score, record["epoch"]
        logging.info(f"Resuming {self.out_dir} after epoch {self.num_epochs - 1} (best epoch {self.best_epoch})")
