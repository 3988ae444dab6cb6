"""
Confusion matrices, precision/recall/F1/accuracy/MCC, PPVs and fold aggregation.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml
from tqdm import tqdm

from .config import AugmentationConfig, show_progress
from .curation import DatasetManifest
from .errors import DataError
from .models import Model, forward
from .sampling import XrayDataset, eval_loader
from .utils import Table, read_table, write_table

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class Metrics:
    per_class: tuple[ClassMetrics, ...]
    accuracy: float
    mcc: float


@dataclass
class EvalReport:
    confusion_matrix: np.ndarray          # rows = true, cols = predicted
    per_class: tuple[ClassMetrics, ...]
    accuracy: float
    mcc: float
    ppv: np.ndarray                       # probability assigned to the true class, per image
    model_id: str
    dataset_id: str
    class_names: tuple[str, ...]
    image_ids: tuple[str, ...] = ()
    labels: tuple[int, ...] = ()
    provenance: dict = field(default_factory=dict)

    def metric_values(self) -> dict[str, float]:
        """Flat metric map, e.g. {"normal.precision": ..., "accuracy": ..., "mcc": ...}."""
        values = {}
        for name, m in zip(self.class_names, self.per_class):
            values[f"{name}.precision"] = m.precision
            values[f"{name}.recall"] = m.recall
            values[f"{name}.f1"] = m.f1
        values["accuracy"] = self.accuracy
        values["mcc"] = self.mcc
        return values


@dataclass
class FoldAggregate:
    """(mean, sample std) per metric over k folds."""
    class_names: tuple[str, ...]
    metrics: dict[str, tuple[float, float]]
    n_folds: int
    model_id: str = ""


def _as_int_array(values: Sequence[int], k: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= k):
        raise DataError(f"{what} out of range [0, {k}): min {arr.min()}, max {arr.max()}")
    return arr


def confusion_matrix(predictions: Sequence[int], labels: Sequence[int], num_classes: int) -> np.ndarray:
    """K x K counts; entry (i, j) = samples of true class i predicted as j."""
    preds = _as_int_array(predictions, num_classes, "prediction")
    truth = _as_int_array(labels, num_classes, "label")
    if preds.size != truth.size:
        raise DataError(f"{preds.size} predictions for {truth.size} labels")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (truth, preds), 1)
    return cm


def _safe_div(num: float, den: float) -> float:
    return float(num) / float(den) if den else 0.0


def classification_metrics(cm: np.ndarray) -> Metrics:
    """Per-class precision/recall/F1, accuracy and the multiclass (R_K) Matthews coefficient."""
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] == 0:
        raise DataError(f"confusion matrix must be square and non-empty, got shape {cm.shape}")
    if (cm < 0).any():
        raise DataError("confusion matrix has negative entries")
    total = cm.sum()
    if total == 0:
        raise DataError("confusion matrix is empty")

    rows = cm.sum(axis=1)       # t_k
    cols = cm.sum(axis=0)       # p_k
    diag = np.diag(cm)
    per_class = []
    for k in range(cm.shape[0]):
        precision = _safe_div(diag[k], cols[k])
        recall = _safe_div(diag[k], rows[k])
        per_class.append(ClassMetrics(precision, recall, _safe_div(2 * precision * recall, precision + recall)))

    correct = diag.sum()
    cov_xy = correct * total - float(np.dot(cols, rows))
    cov_xx = total ** 2 - float(np.dot(cols, cols))
    cov_yy = total ** 2 - float(np.dot(rows, rows))
    denom = np.sqrt(cov_xx * cov_yy)
    mcc = float(cov_xy / denom) if denom else 0.0
    return Metrics(tuple(per_class), float(correct / total), mcc)


def predict_classes(probabilities: np.ndarray) -> np.ndarray:
    """argmax per row; ties go to the lowest class index."""
    return np.argmax(np.asarray(probabilities), axis=1)


def ppv_true_class(probabilities: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """Probability each image's true class received."""
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2:
        raise DataError(f"probabilities must be 2-D, got shape {probs.shape}")
    if probs.size and not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        raise DataError("probability rows must sum to 1")
    truth = _as_int_array(labels, probs.shape[1], "label")
    if truth.size != probs.shape[0]:
        raise DataError(f"{truth.size} labels for {probs.shape[0]} probability rows")
    return probs[np.arange(truth.size), truth]


def build_report(probabilities: np.ndarray, labels: Sequence[int], class_names: Sequence[str],
                 model_id: str, dataset_id: str, image_ids: Sequence[str] = (),
                 provenance: Optional[dict] = None) -> EvalReport:
    probs = np.asarray(probabilities, dtype=np.float64)
    cm = confusion_matrix(predict_classes(probs), labels, len(class_names))
    metrics = classification_metrics(cm)
    return EvalReport(
        confusion_matrix=cm,
        per_class=metrics.per_class,
        accuracy=metrics.accuracy,
        mcc=metrics.mcc,
        ppv=ppv_true_class(probs, labels),
        model_id=model_id,
        dataset_id=dataset_id,
        class_names=tuple(class_names),
        image_ids=tuple(image_ids),
        labels=tuple(int(x) for x in labels),
        provenance=dict(provenance or {}),
    )


@torch.inference_mode()
def predict_probabilities(model: Model, manifest: DatasetManifest, augmentation: AugmentationConfig,
                          batch_size: int = 64, workers: int = 0) -> np.ndarray:
    model.eval()
    loader = eval_loader(XrayDataset(manifest, augmentation, train=False), batch_size, workers)
    chunks = []
    for images, _ in tqdm(loader, desc=f"eval {model.model_id}", unit="batch",
                          disable=not show_progress(), leave=False):
        _, probs = forward(model, images)
        chunks.append(probs.to(torch.float64).numpy())
    return np.concatenate(chunks, axis=0)


def evaluate_model(model: Model, manifest: DatasetManifest, augmentation: AugmentationConfig,
                   batch_size: int = 64, workers: int = 0, dataset_id: str = "",
                   provenance: Optional[dict] = None) -> EvalReport:
    """Run a model over a manifest (deterministic preprocessing) and score it."""
    if tuple(model.class_names) and tuple(model.class_names) != manifest.class_names:
        raise DataError(f"model classes {model.class_names} differ from manifest classes {manifest.class_names}")
    probs = predict_probabilities(model, manifest, augmentation, batch_size, workers)
    report = build_report(probs, manifest.labels(), manifest.class_names, model.model_id,
                          dataset_id or f"scheme-{manifest.scheme}", manifest.ids(), provenance)
    log.info("[Eval] %s on %s: accuracy %.3f, mcc %.3f, mean PPV %.3f", report.model_id, report.dataset_id,
             report.accuracy, report.mcc, float(report.ppv.mean()))
    return report


def aggregate_folds(reports: Sequence[EvalReport]) -> FoldAggregate:
    """Mean and sample (n-1) standard deviation of every metric over folds."""
    if len(reports) < 2:
        raise DataError(f"fold aggregation needs at least 2 reports, got {len(reports)}")
    class_names = reports[0].class_names
    mismatched = [r.model_id or str(i) for i, r in enumerate(reports) if r.class_names != class_names]
    if mismatched:
        raise DataError(f"reports with mismatched class sets: {', '.join(mismatched)}")
    values = [r.metric_values() for r in reports]
    metrics = {}
    for name in values[0]:
        column = np.array([v[name] for v in values], dtype=np.float64)
        metrics[name] = (float(column.mean()), float(column.std(ddof=1)))
    return FoldAggregate(class_names, metrics, len(reports), reports[0].model_id)


def mean_ppv(reports: Sequence[EvalReport]) -> np.ndarray:
    """Per-image PPV averaged over fold models evaluated on the same test images."""
    if not reports:
        raise DataError("no reports to average")
    ids = reports[0].image_ids
    if any(r.image_ids != ids for r in reports):
        raise DataError("fold reports cover different test images")
    return np.mean(np.stack([r.ppv for r in reports]), axis=0)


# Report files

def _report_stem(report: EvalReport) -> str:
    return report.model_id or "model"


def write_report(report: EvalReport, out_dir: Path) -> Path:
    """Write <model>.report.yaml and the per-image <model>.ppv.tsv; returns the report path."""
    out_dir = Path(out_dir)
    stem = _report_stem(report)
    ppv_path = out_dir / f"{stem}.ppv.tsv"
    rows = [[image_id, report.class_names[label], repr(float(p))]
            for image_id, label, p in zip(report.image_ids, report.labels, report.ppv)]
    write_table(ppv_path, Table(["id", "label", "ppv"], rows, [("model_id", report.model_id)]))

    doc = {
        "model_id": report.model_id,
        "dataset_id": report.dataset_id,
        "provenance": report.provenance,
        "n_images": int(report.confusion_matrix.sum()),
        "class_names": list(report.class_names),
        "confusion_matrix": report.confusion_matrix.tolist(),
        "per_class": {
            name: {"precision": m.precision, "recall": m.recall, "f1": m.f1}
            for name, m in zip(report.class_names, report.per_class)
        },
        "accuracy": report.accuracy,
        "mcc": report.mcc,
        "ppv_mean": float(report.ppv.mean()) if report.ppv.size else 0.0,
        "ppv_std": float(report.ppv.std(ddof=1)) if report.ppv.size > 1 else 0.0,
        "ppv_file": ppv_path.name,
    }
    path = out_dir / f"{stem}.report.yaml"
    path.write_text(yaml.safe_dump(doc, sort_keys=False, allow_unicode=True), encoding="utf-8")
    return path


def read_report(path: Path) -> EvalReport:
    path = Path(path)
    if path.is_dir():
        candidates = sorted(path.glob("*.report.yaml"))
        if len(candidates) != 1:
            raise DataError(f"{path}: expected exactly one *.report.yaml, found {len(candidates)}")
        path = candidates[0]
    if not path.is_file():
        raise DataError(f"report not found: {path}")
    doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    try:
        class_names = tuple(doc["class_names"])
        ppv_table = read_table(path.parent / doc["ppv_file"])
        per_class = tuple(ClassMetrics(**doc["per_class"][name]) for name in class_names)
        labels = tuple(class_names.index(x) for x in ppv_table.column("label"))
        return EvalReport(
            confusion_matrix=np.asarray(doc["confusion_matrix"], dtype=np.int64),
            per_class=per_class,
            accuracy=float(doc["accuracy"]),
            mcc=float(doc["mcc"]),
            ppv=np.array([float(x) for x in ppv_table.column("ppv")], dtype=np.float64),
            model_id=doc["model_id"],
            dataset_id=doc["dataset_id"],
            class_names=class_names,
            image_ids=tuple(ppv_table.column("id")),
            labels=labels,
            provenance=doc.get("provenance") or {},
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: malformed report ({e})") from None
