"""
Experiment configuration: hydra structured configs and flat `key=value` configuration files

A configuration file holds one `key=value` per line (UTF-8), blank lines and `#` comments are ignored.
Keys are either dotted (`model.top_k=3`) or bare (`top_k=3`), a bare key resolves to the first section
owning the field (model, then train, then synth).
Values are parsed as YAML scalars and validated against the dataclasses by omegaconf.
"""
import dataclasses
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

# Hydra and OmegaConf
from hydra.conf import dataclass, field
from hydra.core.config_store import ConfigStore
from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

# Project Imports
from hgmamba.common.errors import ConfigError
from hgmamba.dataset.synthetic import SynthConfig, validate_synth_config
from hgmamba.models.hgmamba import ModelConfig, validate_model_config
from hgmamba.training.trainer import TrainConfig, validate_train_config


@dataclass
class ExperimentConfig:
    """The configuration of an experiment: model, optimization and synthetic data"""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    data_dir: Optional[str] = None
    out_dir: Optional[str] = None


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthConfig}

cs = ConfigStore.instance()
cs.store(name="hgmamba_config", node=ExperimentConfig)


def _field_names(cls) -> List[str]:
    return [f.name for f in dataclasses.fields(cls)]


def resolve_key(key: str) -> str:
    """Returns the dotted key of a (dotted or bare) configuration key"""
    key = key.strip()
    if "." in key:
        section, name = key.split(".", 1)
        if section in SECTIONS and name in _field_names(SECTIONS[section]):
            return key
        raise ConfigError(f"Unknown configuration key `{key}`")
    if key in _field_names(ExperimentConfig) and key not in SECTIONS:
        return key
    # A bare `seed` or `d` addresses the model or the training run, not the synthetic data
    for section, cls in SECTIONS.items():
        if key in _field_names(cls):
            return f"{section}.{key}"
    raise ConfigError(f"Unknown configuration key `{key}`")


def _is_list_field(dotted_key: str) -> bool:
    if "." not in dotted_key:
        return False
    section, name = dotted_key.split(".", 1)
    field_type = {f.name: f.type for f in dataclasses.fields(SECTIONS[section])}[name]
    return getattr(field_type, "__origin__", None) in (list, List)


def to_dotlist(entries: Iterable[str]) -> List[str]:
    """Converts `key=value` entries (file lines or command line overrides) to a resolved omegaconf dotlist"""
    dotlist = []
    for line_number, raw in enumerate(entries, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"Entry {line_number} `{line}` is not of the form key=value")
        key, value = line.split("=", 1)
        dotted_key = resolve_key(key)
        value = value.strip()
        if _is_list_field(dotted_key) and not value.startswith("["):
            value = f"[{value}]"
        dotlist.append(f"{dotted_key}={value}")
    return dotlist


def read_config_file(path: Union[str, Path]) -> List[str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"The configuration file {path} does not exist")
    return path.read_text(encoding="utf-8").splitlines()


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """
    Loads the defaults, then the configuration file (if any), then the overrides,
    and validates the result
    """
    entries = list(read_config_file(path)) if path is not None else []
    entries += list(overrides)
    try:
        merged = OmegaConf.merge(OmegaConf.structured(ExperimentConfig), OmegaConf.from_dotlist(to_dotlist(entries)))
        config: ExperimentConfig = OmegaConf.to_object(merged)
    except OmegaConfBaseException as error:
        raise ConfigError(f"Invalid configuration: {error}") from error
    validate_config(config)
    return config


def validate_config(config: ExperimentConfig):
    validate_model_config(config.model)
    validate_train_config(config.train)
    validate_synth_config(config.synth)
