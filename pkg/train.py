import os

# Hydra and OmegaConf
import hydra
from hydra.utils import to_absolute_path
from omegaconf import DictConfig, OmegaConf

# Project Imports
from hgmamba.common.io import write_report
from hgmamba.dataset.dataset import BagDataset
from hgmamba.training.config import ExperimentConfig, validate_config
from hgmamba.training.trainer import Trainer, evaluate


@hydra.main(version_base=None, config_name="hgmamba", config_path="config")
def run(cfg: DictConfig):
    """Trains a model in the hydra output directory, then evaluates its best checkpoint on the test split"""
    config: ExperimentConfig = OmegaConf.to_object(OmegaConf.merge(OmegaConf.structured(ExperimentConfig), cfg))
    validate_config(config)
    config.data_dir = to_absolute_path(config.data_dir)
    out_dir = to_absolute_path(config.out_dir) if config.out_dir is not None else os.getcwd()

    trainer = Trainer(config.model, config.train, config.data_dir, out_dir)
    trainer.init()
    trainer.train()

    test_dataset = BagDataset(config.data_dir, "test")
    if len(test_dataset) > 0:
        metrics = evaluate(test_dataset, trainer.best_params, trainer.model_config, config.train.eval_seed)
        write_report(os.path.join(out_dir, "metrics_test.txt"), {"best_epoch": trainer.best_epoch, **metrics.as_dict()})
        print(f"Test metrics : acc={metrics.acc:.4f} auc={metrics.auc} f1={metrics.macro_f1:.4f}")


if __name__ == "__main__":
    run()
