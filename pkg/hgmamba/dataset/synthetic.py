"""
Synthetic bags with planted class structure

Every tile feature is standard normal. A bag of class c > 0 carries a (rows × cols) block of tiles
shifted by μ·u_c, where u_c is a fixed unit direction. In the high order variant a positive bag carries
two disjoint blocks with distinct directions, and negative bags carry at most one of them, so that
only the co-occurrence of the two motifs identifies the class.
"""
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

# Hydra and OmegaConf
from hydra.conf import dataclass

# Project Imports
from hgmamba.common.errors import ConfigError, UsageError
from hgmamba.common.io import write_manifest
from hgmamba.common.numkit import derive_seed, make_rng
from hgmamba.dataset.tfb import write_bag
from hgmamba.graph.hypergraph import TileBag

DIRECTIONS_SEED = 0
MANIFEST_NAME = "manifest.csv"


@dataclass
class SynthConfig:
    """The configuration of the planted motif task"""
    grid_rows: int = 14
    grid_cols: int = 14
    d: int = 32
    n_classes: int = 2
    motif_strength: float = 2.0  # μ
    motif_rows: int = 2
    motif_cols: int = 2
    high_order: bool = False
    seed: int = 0

    # Fractions of every class assigned to train and val, the rest goes to test
    train_fraction: float = 0.6
    val_fraction: float = 0.2


def n_directions(cfg: SynthConfig) -> int:
    return 2 * (cfg.n_classes - 1) + 1 if cfg.high_order else cfg.n_classes


def validate_synth_config(cfg: SynthConfig):
    if cfg.n_classes < 2:
        raise ConfigError(f"synth.n_classes={cfg.n_classes} must be ≥ 2")
    if cfg.motif_strength < 0.0:
        raise ConfigError(f"synth.motif_strength={cfg.motif_strength} must be ≥ 0")
    if cfg.d < n_directions(cfg):
        raise ConfigError(f"synth.d={cfg.d} is too small for {n_directions(cfg)} orthogonal motif directions")
    if cfg.motif_rows < 1 or cfg.motif_cols < 1:
        raise ConfigError("The motif block must contain at least one tile")
    n_blocks = 2 if cfg.high_order else 1
    if (cfg.motif_rows > cfg.grid_rows or cfg.motif_cols > cfg.grid_cols
            or cfg.grid_rows * cfg.grid_cols < n_blocks * cfg.motif_rows * cfg.motif_cols):
        raise ConfigError(f"A {cfg.grid_rows}x{cfg.grid_cols} grid is too small for {n_blocks} motif(s) "
                          f"of {cfg.motif_rows}x{cfg.motif_cols} tiles")
    if not (0.0 <= cfg.train_fraction and 0.0 <= cfg.val_fraction and cfg.train_fraction + cfg.val_fraction <= 1.0):
        raise ConfigError("Split fractions must be non negative and sum to at most 1")


def motif_directions(d: int, count: int) -> np.ndarray:
    """`count` orthonormal unit vectors [count, d], fixed for a given d"""
    if count > d:
        raise ConfigError(f"Cannot draw {count} orthonormal directions in dimension {d}")
    q, _ = np.linalg.qr(make_rng(DIRECTIONS_SEED).standard_normal((d, d)))
    return q[:, :count].T.copy()


def _block_tiles(cfg: SynthConfig, top: int, left: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(top, top + cfg.motif_rows), np.arange(left, left + cfg.motif_cols),
                             indexing="ij")
    return (rows * cfg.grid_cols + cols).reshape(-1)


def _place_blocks(cfg: SynthConfig, rng: np.random.Generator, n_blocks: int) -> List[np.ndarray]:
    """Draws `n_blocks` pairwise disjoint motif blocks, returned as tile index arrays"""
    positions = [(r, c) for r in range(cfg.grid_rows - cfg.motif_rows + 1)
                 for c in range(cfg.grid_cols - cfg.motif_cols + 1)]
    blocks = []
    for _ in range(n_blocks):
        taken = np.concatenate(blocks) if blocks else np.zeros(0, dtype=np.int64)
        free = [pos for pos in positions if not np.isin(_block_tiles(cfg, *pos), taken).any()]
        if not free:
            raise ConfigError(f"Cannot place {n_blocks} disjoint motifs on a {cfg.grid_rows}x{cfg.grid_cols} grid")
        blocks.append(_block_tiles(cfg, *free[int(rng.integers(len(free)))]))
    return blocks


def generate_bag(cfg: SynthConfig, rng: np.random.Generator, label: int, bag_id: str = "bag") -> TileBag:
    """Generates one bag of `label`, the tiles cover the full grid in row-major order"""
    validate_synth_config(cfg)
    if not (0 <= label < cfg.n_classes):
        raise UsageError(f"Label {label} out of range for {cfg.n_classes} classes")
    n = cfg.grid_rows * cfg.grid_cols
    rows, cols = np.divmod(np.arange(n), cfg.grid_cols)
    coords = np.stack([rows, cols], axis=1)
    features = rng.standard_normal((n, cfg.d))
    directions = motif_directions(cfg.d, n_directions(cfg))

    if cfg.high_order:
        if label > 0:
            blocks = _place_blocks(cfg, rng, 2)
            for block, direction in zip(blocks, (2 * label - 1, 2 * label)):
                features[block] += cfg.motif_strength * directions[direction]
        else:
            # none, first or second motif of a random positive class
            variant = int(rng.integers(3))
            if variant > 0:
                positive = int(rng.integers(1, cfg.n_classes))
                block = _place_blocks(cfg, rng, 1)[0]
                features[block] += cfg.motif_strength * directions[2 * positive - 2 + variant]
    elif label > 0:
        block = _place_blocks(cfg, rng, 1)[0]
        features[block] += cfg.motif_strength * directions[label]
    return TileBag(bag_id, coords, features, label)


def split_assignment(labels: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Stratified split: the first bags of every class go to train, then val, then test"""
    splits = np.empty(labels.shape[0], dtype=object)
    for label in np.unique(labels):
        indices = np.flatnonzero(labels == label)
        # Rounding keeps products such as 0.6 * 5 from falling below an integer
        n_train = int(np.floor(round(cfg.train_fraction * indices.shape[0], 9)))
        n_val = int(np.floor(round(cfg.val_fraction * indices.shape[0], 9)))
        splits[indices[:n_train]] = "train"
        splits[indices[n_train:n_train + n_val]] = "val"
        splits[indices[n_train + n_val:]] = "test"
    return splits


def generate_dataset(cfg: SynthConfig, out_dir: Union[str, Path], n_bags: int,
                     splits: Optional[Tuple[int, int, int]] = None) -> pd.DataFrame:
    """
    Writes `n_bags` bags (labels balanced round-robin) and the manifest into `out_dir`

    Bag i is generated from the sub-seed derive_seed(seed, "bag", i), so it does not depend on n_bags.
    `splits` optionally gives explicit per split counts (train, val, test) in place of the fractions.
    """
    validate_synth_config(cfg)
    if n_bags < 1:
        raise UsageError("At least one bag must be generated")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    labels = np.arange(n_bags) % cfg.n_classes
    if splits is not None:
        if sum(splits) != n_bags:
            raise UsageError(f"Split counts {splits} do not sum to {n_bags}")
        split_column = np.array(["train"] * splits[0] + ["val"] * splits[1] + ["test"] * splits[2], dtype=object)
    else:
        split_column = split_assignment(labels, cfg)

    files = []
    for index, label in enumerate(labels):
        bag_id = f"bag_{index:05d}"
        bag = generate_bag(cfg, make_rng(derive_seed(cfg.seed, "bag", index)), int(label), bag_id)
        write_bag(out_dir / f"{bag_id}.tfb", bag)
        files.append(f"{bag_id}.tfb")

    manifest = pd.DataFrame({"file": files, "label": labels.astype(np.int64), "split": split_column})
    write_manifest(out_dir / MANIFEST_NAME, manifest)
    return manifest
