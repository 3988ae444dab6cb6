"""
Weighted cross-entropy fine-tuning with Adam and early stopping.
"""

import logging
import math
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import torch
import torch.nn.functional as F
from tqdm import tqdm

from .config import TrainConfig, show_progress
from .errors import DataError, TrainingError
from .models import EnsembleModel, Model
from .utils import Table, read_table, write_table

log = logging.getLogger(__name__)

Batch = tuple[torch.Tensor, torch.Tensor]
TrainStream = Callable[[int], Iterable[Batch]]


@dataclass(frozen=True)
class ClassWeights:
    w: tuple[float, ...]

    def tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.tensor(self.w, dtype=dtype)


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0                   # 1-based
    stopped_epoch: int = 0
    stop_reason: str = ""                 # patience | max_epochs

    def write(self, path: Path, meta: Sequence[tuple[str, str]] = ()) -> None:
        rows = [[str(i), f"{t:.10g}", f"{v:.10g}"]
                for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss), start=1)]
        footer = [("best_epoch", str(self.best_epoch)), ("stopped_epoch", str(self.stopped_epoch)),
                  ("stop_reason", self.stop_reason)]
        write_table(Path(path), Table(["epoch", "train_loss", "val_loss"], rows, list(meta), footer))

    @classmethod
    def read(cls, path: Path) -> "TrainingHistory":
        table = read_table(Path(path))
        return cls(
            train_loss=[float(x) for x in table.column("train_loss")],
            val_loss=[float(x) for x in table.column("val_loss")],
            best_epoch=int(table.meta_value("best_epoch", "0")),
            stopped_epoch=int(table.meta_value("stopped_epoch", "0")),
            stop_reason=table.meta_value("stop_reason", ""),
        )


def class_weights(class_counts: Sequence[int]) -> ClassWeights:
    """w_c = N_total / (K * N_c)."""
    counts = [int(n) for n in class_counts]
    if not counts or any(n < 1 for n in counts):
        raise DataError(f"class weights need every count >= 1, got {counts}")
    total, k = sum(counts), len(counts)
    return ClassWeights(tuple(total / (k * n) for n in counts))


def weighted_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """sum_i w[y_i] * -log softmax(logits_i)[y_i] / sum_i w[y_i]."""
    k = logits.shape[1]
    if weights.numel() != k:
        raise DataError(f"{weights.numel()} class weights for {k} logits")
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label out of range [0, {k}): {labels.tolist()}")
    return F.cross_entropy(logits, labels, weight=weights.to(device=logits.device, dtype=logits.dtype))


class EarlyStopping:
    """
    Stop after `patience` epochs without a strict improvement of the best validation loss,
    keeping a snapshot of the best weights (spilled to disk above `spill_bytes`).
    """

    def __init__(self, patience: int, spill_bytes: Optional[int] = None):
        self.patience = patience
        self.spill_bytes = spill_bytes
        self.best_loss: Optional[float] = None
        self.best_epoch = 0
        self.wait = 0
        self._snapshot: Optional[dict[str, torch.Tensor]] = None
        self._spill_dir: Optional[Path] = None

    def step(self, epoch: int, val_loss: float, model: torch.nn.Module) -> bool:
        """Record an epoch; returns True when training should stop."""
        if self.best_loss is None or val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.wait = 0
            self._take_snapshot(model)
            return False
        self.wait += 1
        return self.wait >= self.patience

    def _take_snapshot(self, model: torch.nn.Module) -> None:
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        size = sum(t.numel() * t.element_size() for t in state.values())
        if self.spill_bytes is not None and size > self.spill_bytes:
            if self._spill_dir is None:
                self._spill_dir = Path(tempfile.mkdtemp(prefix="xens-snapshot-"))
            torch.save(state, self._spill_dir / "best.pt")
            self._snapshot = None
        else:
            self._snapshot = state

    def restore(self, model: torch.nn.Module) -> None:
        if self._snapshot is not None:
            model.load_state_dict(self._snapshot)
        elif self._spill_dir is not None:
            model.load_state_dict(torch.load(self._spill_dir / "best.pt", weights_only=True))
        self.close()

    def close(self) -> None:
        if self._spill_dir is not None:
            shutil.rmtree(self._spill_dir, ignore_errors=True)
            self._spill_dir = None


def set_trainable_scope(model: Model, scope: str) -> None:
    """head-only freezes every extractor; all makes every parameter trainable."""
    extractors = list(model.extractors) if isinstance(model, EnsembleModel) else [model.extractor]
    for extractor in extractors:
        if scope == "head-only":
            extractor.freeze()
        elif scope == "all":
            extractor.unfreeze()
        else:
            raise TrainingError(f"unknown trainable_scope {scope!r}")
    for p in model.head.parameters():
        p.requires_grad_(True)


def _model_dtype(model: torch.nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def validation_loss(model: Model, val_set: Iterable[Batch], weights: torch.Tensor) -> float:
    """Weighted-mean cross-entropy over the whole validation set."""
    model.eval()
    dtype = _model_dtype(model)
    w = weights.to(dtype)
    num, den = 0.0, 0.0
    for images, labels in val_set:
        logits = model(images.to(dtype))
        per_sample = F.cross_entropy(logits, labels, reduction="none")
        wy = w[labels]
        num += float((wy * per_sample).sum())
        den += float(wy.sum())
    if den == 0:
        raise TrainingError("validation set is empty")
    return num / den


def fit(model: Model, train_stream: TrainStream, val_set: Iterable[Batch], config: TrainConfig,
        weights: ClassWeights,
        evaluate: Optional[Callable[[Model, int], float]] = None) -> tuple[Model, TrainingHistory]:
    """
    Train `model` in place and return it with the best epoch's parameters restored.

    Args:
        model: Classifier or ensemble
        train_stream: epoch (1-based) -> iterable of (images, labels) batches
        val_set: Re-iterable validation batches, no augmentation
        config: Optimizer, stopping and scope settings
        weights: Per-class loss weights
        evaluate: Optional override of the per-epoch validation loss, (model, epoch) -> loss

    Returns:
        (model, TrainingHistory)
    """
    config.validate()
    torch.manual_seed(config.seed)
    set_trainable_scope(model, config.trainable_scope)
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise TrainingError("no trainable parameters")
    optimizer = torch.optim.Adam(params, lr=config.learning_rate, betas=tuple(config.adam_betas),
                                 eps=config.adam_epsilon)
    dtype = _model_dtype(model)
    w = weights.tensor(dtype)
    if w.numel() != model.num_classes:
        raise TrainingError(f"{w.numel()} class weights for a {model.num_classes}-class model")

    stopper = EarlyStopping(config.patience, config.snapshot_spill_bytes)
    history = TrainingHistory()
    name = getattr(model, "model_id", "") or "model"
    epochs = tqdm(range(1, config.max_epochs + 1), desc=f"fit {name}", unit="epoch",
                  disable=not show_progress(), leave=False)
    try:
        for epoch in epochs:
            model.train()
            total, seen = 0.0, 0
            for b, (images, labels) in enumerate(train_stream(epoch)):
                optimizer.zero_grad(set_to_none=True)
                loss = weighted_cross_entropy(model(images.to(dtype)), labels, w)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite training loss for {name}", epoch, b)
                loss.backward()
                optimizer.step()
                total += loss.item() * len(labels)
                seen += len(labels)
            if seen == 0:
                raise TrainingError(f"empty training stream for {name}", epoch)

            val = evaluate(model, epoch) if evaluate is not None else validation_loss(model, val_set, w)
            if not math.isfinite(val):
                raise TrainingError(f"non-finite validation loss for {name}", epoch)
            history.train_loss.append(total / seen)
            history.val_loss.append(val)
            history.stopped_epoch = epoch

            stop = stopper.step(epoch, val, model)
            log.debug("[Fit] %s epoch %d train=%.4f val=%.4f (best %d)", name, epoch, total / seen, val,
                      stopper.best_epoch)
            if stop:
                history.stop_reason = "patience"
                break
        else:
            history.stop_reason = "max_epochs"
        history.best_epoch = stopper.best_epoch
        stopper.restore(model)
    finally:
        stopper.close()

    log.info("[Fit] %s stopped at epoch %d (%s); best epoch %d val=%.4f", name, history.stopped_epoch,
             history.stop_reason, history.best_epoch, history.val_loss[history.best_epoch - 1])
    model.eval()
    return model, history
