from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd

# Project Imports
from hgmamba.common.errors import StructuralError
from hgmamba.common.utils import assert_debug

SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ["file", "label", "split"]
HISTORY_COLUMNS = ["epoch", "train_loss", "val_acc", "val_auc", "val_f1", "lr"]
CURVE_COLUMNS = ["n", "flops"]


def delimiter():
    """
    The column delimiter in pandas csv
    """
    return ","


# ----------------------------------------------------------------------------------------------------------------------
# Manifest: one `file,label,split` record per line, no header
def read_manifest(file_path: Union[str, Path]) -> pd.DataFrame:
    """
    Reads the manifest of a dataset directory

    Returns
    ----------
    manifest : pd.DataFrame with the columns (file: str, label: int, split: str)
    """
    path = Path(file_path)
    if not path.is_file():
        raise FileNotFoundError(f"The manifest {path} does not exist")
    df = pd.read_csv(path, sep=delimiter(), header=None, names=MANIFEST_COLUMNS, index_col=False,
                     dtype={"file": str, "label": np.int64, "split": str}, comment="#", encoding="utf-8")
    unknown = set(df["split"]) - set(SPLITS)
    if unknown:
        raise StructuralError(f"Unknown splits {sorted(unknown)} in {path}")
    return df


def write_manifest(file_path: Union[str, Path], records: pd.DataFrame):
    path = Path(file_path)
    assert_debug(path.parent.exists())
    records[MANIFEST_COLUMNS].to_csv(path, sep=delimiter(), header=False, index=False, lineterminator="\n")


# ----------------------------------------------------------------------------------------------------------------------
# Training history
def write_history(file_path: Union[str, Path], history: List[Dict[str, Optional[float]]]):
    """Writes the per epoch history, an undefined AUC is left empty"""
    df = pd.DataFrame(history, columns=HISTORY_COLUMNS)
    df.to_csv(file_path, sep=delimiter(), index=False, lineterminator="\n", float_format="%.10g")


def read_history(file_path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(file_path, sep=delimiter(), index_col=None)


# ----------------------------------------------------------------------------------------------------------------------
# Bench curves: header `n<TAB>flops`
def write_curve(file_path: Union[str, Path], n_list: List[int], flops: List[int]):
    df = pd.DataFrame({"n": np.asarray(n_list, dtype=np.int64), "flops": np.asarray(flops, dtype=np.int64)})
    df.to_csv(file_path, sep="\t", index=False, lineterminator="\n")


def read_curve(file_path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(file_path, sep="\t", index_col=None, dtype=np.int64)


# ----------------------------------------------------------------------------------------------------------------------
# Reports: `key=value` lines
def format_report(values: Dict[str, object]) -> str:
    lines = []
    for key, value in values.items():
        if value is None:
            value = "NA"
        elif isinstance(value, float):
            value = f"{value:.6f}"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def write_report(file_path: Union[str, Path], values: Dict[str, object]):
    Path(file_path).write_text(format_report(values), encoding="utf-8")
