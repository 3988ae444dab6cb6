"""
Holdout/fold plans, class-balanced oversampling, augmentation and batch loading.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image
from torch.utils.data import DataLoader, Dataset, WeightedRandomSampler

from .config import IMAGENET_MEAN, IMAGENET_STD, AugmentationConfig, cache_dir
from .curation import DatasetManifest
from .errors import DataError
from .utils import Table, chunked, read_table, round_half_up, write_table

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitPlan:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    ratio: float = 0.9
    seed: int = 0


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[tuple[str, ...], ...]
    seed: int = 0

    def round(self, i: int) -> tuple[list[str], list[str]]:
        """(training ids, validation ids) for cross-validation round i."""
        if not 0 <= i < self.k:
            raise DataError(f"fold index {i} out of range for k={self.k}")
        train = sorted(x for j, fold in enumerate(self.folds) if j != i for x in fold)
        return train, sorted(self.folds[i])


@dataclass
class SamplingPlan:
    """Per-image draw weights over `ids`; replacement=False means a plain shuffle."""
    ids: tuple[str, ...]
    weights: np.ndarray
    epoch_length: int
    replacement: bool = True


def _group_by_label(ids: Sequence[str], labels: Sequence[int]) -> dict[int, list[str]]:
    if len(ids) != len(labels):
        raise DataError(f"{len(ids)} ids but {len(labels)} labels")
    groups: dict[int, list[str]] = defaultdict(list)
    for image_id, label in zip(ids, labels):
        groups[int(label)].append(image_id)
    return {label: sorted(members) for label, members in sorted(groups.items())}


def holdout_test_count(n: int, ratio: float) -> int:
    """Per-class test size: round-half-up of (1 - ratio) * n, at least 1, leaving one for training."""
    share = Decimal(1) - Decimal(str(ratio))
    return min(max(1, round_half_up(share * n)), n - 1)


def holdout_split(manifest: DatasetManifest, ratio: float = 0.9, seed: int = 0) -> SplitPlan:
    """
    Stratified train/test split of a manifest.

    Raises:
        DataError: ratio outside (0, 1) or a class with fewer than 2 members
    """
    if not 0.0 < ratio < 1.0:
        raise DataError(f"ratio must lie in (0, 1), got {ratio}")
    groups = _group_by_label(manifest.ids(), manifest.labels())
    small = {manifest.class_names[c]: len(m) for c, m in groups.items() if len(m) < 2}
    if small:
        raise DataError(f"classes need at least 2 members for a holdout split: {small}")

    rng = np.random.default_rng(seed)
    train, test = [], []
    for label, members in groups.items():
        n_test = holdout_test_count(len(members), ratio)
        order = rng.permutation(len(members))
        chosen = {members[i] for i in order[:n_test]}
        test.extend(m for m in members if m in chosen)
        train.extend(m for m in members if m not in chosen)
        log.debug("[Split] class %s: %d train / %d test", manifest.class_names[label], len(members) - n_test, n_test)

    log.info("[Split] %d train / %d test (ratio %s, seed %d)", len(train), len(test), ratio, seed)
    return SplitPlan(tuple(sorted(train)), tuple(sorted(test)), ratio, seed)


def make_folds(train_ids: Sequence[str], labels: Sequence[int], k: int = 5, seed: int = 0) -> FoldPlan:
    """
    Stratified k-fold partition; within a class the remainder goes to the lowest-index folds.
    """
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    groups = _group_by_label(train_ids, labels)
    small = {c: len(m) for c, m in groups.items() if len(m) < k}
    if small:
        raise DataError(f"classes smaller than k={k}: {small}")

    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    for members in groups.values():
        shuffled = [members[i] for i in rng.permutation(len(members))]
        for j, part in enumerate(np.array_split(np.arange(len(shuffled)), k)):
            folds[j].extend(shuffled[i] for i in part)
    return FoldPlan(k, tuple(tuple(sorted(f)) for f in folds), seed)


def oversample_weights(ids: Sequence[str], labels: Sequence[int],
                       num_classes: Optional[int] = None) -> SamplingPlan:
    """
    Inverse-frequency draw weights (1 / N_c) so each class is drawn equally often in expectation.
    """
    if not len(labels):
        raise DataError("cannot build a sampling plan without images")
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes or 0)
    if (counts == 0).any():
        raise DataError(f"empty class(es) in sampling plan: {np.flatnonzero(counts == 0).tolist()}")
    weights = 1.0 / counts[labels].astype(np.float64)
    return SamplingPlan(tuple(ids), weights, len(labels), replacement=True)


def uniform_plan(ids: Sequence[str]) -> SamplingPlan:
    """Plain shuffling without replacement (oversampling disabled)."""
    return SamplingPlan(tuple(ids), np.ones(len(ids)), len(ids), replacement=False)


def epoch_batches(plan: SamplingPlan, batch_size: int, seed: int) -> list[list[str]]:
    """
    Realize one epoch: epoch_length draws under the plan, cut into batches in draw order.
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    generator = torch.Generator().manual_seed(int(seed))
    if plan.replacement:
        sampler = WeightedRandomSampler(
            torch.as_tensor(plan.weights, dtype=torch.float64),
            num_samples=plan.epoch_length,
            replacement=True,
            generator=generator,
        )
        order = list(sampler)
    else:
        order = torch.randperm(len(plan.ids), generator=generator).tolist()[:plan.epoch_length]
    return chunked([plan.ids[i] for i in order], batch_size)


# Images

def load_grayscale(path: str, content_hash: Optional[str] = None) -> Image.Image:
    """Decode an image to 8-bit grayscale, through the XENS_CACHE cache when configured."""
    cache = cache_dir()
    cached = cache / content_hash[:2] / f"{content_hash}.npy" if cache and content_hash else None
    if cached is not None and cached.is_file():
        return Image.fromarray(np.load(cached))
    try:
        with Image.open(path) as img:
            gray = img.convert("L")
    except OSError as e:
        raise DataError(f"cannot decode {path}: {e}") from None
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        tmp = cached.with_suffix(".tmp.npy")
        np.save(tmp, np.asarray(gray))
        tmp.replace(cached)
    return gray


def augment(image: Image.Image, config: AugmentationConfig, rng: np.random.Generator) -> Image.Image:
    """
    resize -> random rotation in [-range, +range] -> random crop -> horizontal flip.
    """
    size = config.resize_to
    crop = config.crop_size
    out = image.resize((size, size), Image.BILINEAR)

    angle = float(rng.uniform(-config.rotation_range, config.rotation_range)) if config.rotation_range > 0 else 0.0
    if angle:
        out = TF.rotate(out, angle, interpolation=TF.InterpolationMode.BILINEAR)

    top = int(rng.integers(0, size - crop + 1))
    left = int(rng.integers(0, size - crop + 1))
    out = TF.crop(out, top, left, crop, crop)

    if rng.random() < config.hflip_prob:
        out = TF.hflip(out)
    return out


def preprocess_eval(image: Image.Image, config: AugmentationConfig) -> Image.Image:
    """Deterministic validation/test path: resize + center crop."""
    out = image.resize((config.resize_to, config.resize_to), Image.BILINEAR)
    return TF.center_crop(out, [config.crop_size, config.crop_size])


def image_to_tensor(image: Image.Image) -> torch.Tensor:
    """Grayscale -> 3 replicated channels, normalized with the backbone's statistics."""
    tensor = TF.to_tensor(image.convert("RGB"))
    return TF.normalize(tensor, IMAGENET_MEAN, IMAGENET_STD)


class XrayDataset(Dataset):
    """
    Manifest-backed dataset.

    In training mode items are addressed by (image id, augmentation seed) so every
    worker reproduces exactly the augmentation the single-threaded loop would.
    """

    def __init__(self, manifest: DatasetManifest, augmentation: AugmentationConfig, train: bool):
        self.manifest = manifest
        self.augmentation = augmentation
        self.train = train
        self._entries = {e.image_id: e for e in manifest.entries}
        self._labels = dict(zip(manifest.ids(), manifest.labels()))
        self._order = manifest.ids()

    def __len__(self) -> int:
        return len(self._order)

    def __getitem__(self, key):
        if self.train:
            image_id, aug_seed = key
        else:
            image_id, aug_seed = self._order[key], None
        entry = self._entries[image_id]
        image = load_grayscale(entry.path, entry.content_hash)
        if aug_seed is None:
            image = preprocess_eval(image, self.augmentation)
        else:
            image = augment(image, self.augmentation, np.random.default_rng(aug_seed))
        return image_to_tensor(image), self._labels[image_id]


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train_loader(dataset: XrayDataset, plan: SamplingPlan, batch_size: int, seed: int, epoch: int,
                 workers: int = 0) -> DataLoader:
    """
    One training epoch as a DataLoader. Workers prefetch batches ahead of the consumer;
    the batch order and content equal the single-process order.
    """
    epoch_seed = _epoch_seed(seed, epoch)
    batches = epoch_batches(plan, batch_size, epoch_seed)
    keyed = [
        [(image_id, epoch_seed + 7919 * b + j) for j, image_id in enumerate(batch)]
        for b, batch in enumerate(batches)
    ]
    return DataLoader(dataset, batch_sampler=keyed, num_workers=workers,
                      prefetch_factor=2 if workers else None, persistent_workers=False)


def eval_loader(dataset: XrayDataset, batch_size: int, workers: int = 0) -> DataLoader:
    return DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=workers)


# Plan files

def write_split_plan(path: Path, plan: SplitPlan, extra_meta: Sequence[tuple[str, str]] = ()) -> None:
    meta = [("kind", "split"), ("seed", str(plan.seed)), ("ratio", repr(plan.ratio))] + list(extra_meta)
    rows = [[i, "train"] for i in plan.train_ids] + [[i, "test"] for i in plan.test_ids]
    rows.sort(key=lambda r: r[0])
    write_table(Path(path), Table(["id", "set"], rows, meta))


def read_split_plan(path: Path) -> SplitPlan:
    table = read_table(Path(path))
    if table.meta_value("kind") != "split":
        raise DataError(f"{path}: not a split plan")
    train = tuple(i for i, s in table.rows if s == "train")
    test = tuple(i for i, s in table.rows if s == "test")
    return SplitPlan(train, test, float(table.meta_value("ratio", "0.9")), int(table.meta_value("seed", "0")))


def write_fold_plan(path: Path, plan: FoldPlan, extra_meta: Sequence[tuple[str, str]] = ()) -> None:
    meta = [("kind", "folds"), ("seed", str(plan.seed)), ("k", str(plan.k))] + list(extra_meta)
    rows = sorted([i, str(j)] for j, fold in enumerate(plan.folds) for i in fold)
    write_table(Path(path), Table(["id", "fold"], rows, meta))


def read_fold_plan(path: Path) -> FoldPlan:
    table = read_table(Path(path))
    if table.meta_value("kind") != "folds":
        raise DataError(f"{path}: not a fold plan")
    try:
        k = int(table.meta_value("k", "0"))
        folds: list[list[str]] = [[] for _ in range(k)]
        for image_id, j in table.rows:
            folds[int(j)].append(image_id)
    except (ValueError, IndexError):
        raise DataError(f"{path}: malformed fold index (k={table.meta_value('k')})") from None
    return FoldPlan(k, tuple(tuple(sorted(f)) for f in folds), int(table.meta_value("seed", "0")))
