from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

# Project Imports
from hgmamba.common.errors import UsageError
from hgmamba.common.io import SPLITS, read_manifest
from hgmamba.common.numkit import derive_seed
from hgmamba.dataset.synthetic import MANIFEST_NAME
from hgmamba.dataset.tfb import read_bag
from hgmamba.graph.hypergraph import TileBag


def collate_bags(bags: List[TileBag]) -> List[TileBag]:
    """Bags have different numbers of tiles, a batch is kept as a list"""
    return list(bags)


class BagDataset(Dataset):
    """
    The bags of one split of a dataset directory (TFB1 files listed by the manifest)

    The label of the manifest overrides the label stored in the bag file.

    Args:
        root (str): The dataset directory
        split (str): One of train, val, test
        in_memory (bool): Whether to read all the bags once at construction
    """

    def __init__(self, root: Union[str, Path], split: str, in_memory: bool = True):
        if split not in SPLITS:
            raise UsageError(f"Unknown split `{split}`, expected one of {SPLITS}")
        self.root = Path(root)
        manifest = read_manifest(self.root / MANIFEST_NAME)
        records = manifest[manifest["split"] == split]
        self.split = split
        self.files: List[str] = records["file"].tolist()
        self.labels: List[int] = records["label"].astype(np.int64).tolist()
        self._bags: Optional[List[TileBag]] = None
        if in_memory:
            self._bags = [self._load(idx) for idx in range(len(self.files))]

    def _load(self, idx: int) -> TileBag:
        bag = read_bag(self.root / self.files[idx])
        bag.label = int(self.labels[idx])
        return bag

    def __len__(self) -> int:
        return len(self.files)

    def __getitem__(self, idx: int) -> TileBag:
        if self._bags is not None:
            return self._bags[idx]
        return self._load(idx)

    def __iter__(self):
        return (self[idx] for idx in range(len(self)))

    def find(self, bag_id: str) -> TileBag:
        for idx, file in enumerate(self.files):
            if Path(file).stem == bag_id:
                return self[idx]
        raise KeyError(f"No bag `{bag_id}` in the {self.split} split of {self.root}")


def find_bag(root: Union[str, Path], bag_id: str) -> TileBag:
    """Looks a bag up by id across all the splits"""
    for split in SPLITS:
        try:
            return BagDataset(root, split, in_memory=False).find(bag_id)
        except KeyError:
            continue
    raise KeyError(f"No bag `{bag_id}` in {root}")


def bag_loader(dataset: BagDataset, batch_size: int, shuffle: bool, seed: int = 0, epoch: int = 0) -> DataLoader:
    """A DataLoader yielding lists of bags, shuffled by a generator seeded from (seed, epoch)"""
    generator = torch.Generator()
    generator.manual_seed(derive_seed(seed, "shuffle", epoch))
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, collate_fn=collate_bags,
                      generator=generator, num_workers=0)
