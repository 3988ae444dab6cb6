"""
Synthetic chest X-ray stand-in corpus.

Each class gets a procedural signature (stripe frequency plus an optional blob or
ring overlay) on a smooth chest-like background, with Gaussian noise on top. The
confound toggle stamps a fixed marker glyph near one corner of a fraction of one
class, the way burned-in annotations leak into real radiographs.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .config import RAW_LABELS, ClassSignature, SyntheticCorpusSpec
from .errors import DataError
from .utils import Table, read_table, write_table

log = logging.getLogger(__name__)

GROUND_TRUTH_FILE = "ground_truth.tsv"
PROBE_BANDS = 24


@dataclass(frozen=True)
class CorpusItem:
    image_id: str          # "<label>/<file>", relative to the corpus root
    label: str
    marker: bool


def marker_glyph(size: int) -> np.ndarray:
    """
    Boolean mask of the confound marker: a solid square inset from the top-left corner.

    The inset keeps the glyph clear of the borders that training crops and rotations cut away.
    """
    g = max(4, size // 5)
    inset = max(2, size // 5)
    mask = np.zeros((size, size), dtype=bool)
    mask[inset:inset + g, inset:inset + g] = True
    return mask


def _item_seed(seed: int, label: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, RAW_LABELS.index(label), index])


def render_corpus_image(signature: ClassSignature, size: int, noise_level: float, signal_strength: float,
                        rng: np.random.Generator, marker: bool = False) -> np.ndarray:
    """
    Render one grayscale image as uint8.

    Random draws are consumed in a fixed order regardless of `marker`, so a
    marker-stripped twin rendered from the same seed differs only in the glyph.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    # soft elliptical "thorax"
    body = np.exp(-(((xx - 0.5) / 0.38) ** 2 + ((yy - 0.5) / 0.45) ** 2) ** 2)
    image = 0.25 + 0.35 * body

    phase = rng.uniform(0.0, 2 * np.pi)
    image += signal_strength * 0.12 * np.sin(2 * np.pi * signature.frequency * xx + phase) * body

    centers = rng.uniform(0.3, 0.7, size=(3, 2))
    radius = rng.uniform(0.15, 0.25)
    if signature.shape == "blobs":
        for cy, cx in centers:
            image += signal_strength * 0.18 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 0.05 ** 2))
    elif signature.shape == "ring":
        dist = np.sqrt((xx - 0.5) ** 2 + (yy - 0.5) ** 2)
        image += signal_strength * 0.18 * np.exp(-((dist - radius) ** 2) / (2 * 0.02 ** 2))

    image += rng.normal(0.0, noise_level, size=(size, size))
    pixels = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    if marker:
        pixels[marker_glyph(size)] = 255
    return pixels


def corpus_items(spec: SyntheticCorpusSpec) -> list[CorpusItem]:
    """The corpus layout implied by a spec, in generation order."""
    items = []
    for label in RAW_LABELS:
        n = spec.counts[label]
        marked = 0
        if spec.confound.enabled and label == spec.confound.label:
            marked = int(round(spec.confound.fraction * n))
        for i in range(n):
            items.append(CorpusItem(f"{label}/{label}_{i:04d}.png", label, i < marked))
    return items


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, out: Path, strip_markers: bool = False) -> Path:
    """
    Write <out>/<label>/<label>_NNNN.png for every class plus a ground-truth table.

    Args:
        spec: Corpus description
        out: Output root
        strip_markers: Render every image without the marker (the twin corpus)

    Returns:
        Path to the ground-truth table
    """
    spec.validate()
    too_small = {label: n for label, n in spec.counts.items() if n < 2 * spec.k}
    if too_small:
        raise DataError(f"corpus counts must be >= 2*k={2 * spec.k} per class for stratified folds, got {too_small}")

    out = Path(out)
    rows = []
    for item in corpus_items(spec):
        index = int(item.image_id.rsplit("_", 1)[1].split(".")[0])
        rng = np.random.default_rng(_item_seed(spec.seed, item.label, index))
        marker = item.marker and not strip_markers
        pixels = render_corpus_image(spec.signatures[item.label], spec.image_size, spec.noise_level,
                                     spec.signal_strength, rng, marker)
        path = out / item.image_id
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels).save(path, format="PNG")
        rows.append([item.image_id, item.label, str(marker).lower()])

    meta = [("kind", "synthetic"), ("seed", str(spec.seed)), ("image_size", str(spec.image_size)),
            ("confound", spec.confound.label if spec.confound.enabled and not strip_markers else "off")]
    truth = out / GROUND_TRUTH_FILE
    write_table(truth, Table(["id", "label", "marker"], rows, meta))
    log.info("[Synth] wrote %d image(s) to %s (%s)", len(rows), out,
             ", ".join(f"{k}={v}" for k, v in spec.counts.items()))
    return truth


def _radial_features(pixels: np.ndarray) -> np.ndarray:
    """Log energy in concentric spatial-frequency bands, plus mean and std intensity."""
    img = pixels.astype(np.float64) / 255.0
    spectrum = np.abs(np.fft.fftshift(np.fft.fft2(img - img.mean()))) ** 2
    n = img.shape[0]
    yy, xx = np.indices(spectrum.shape)
    radius = np.hypot(yy - n // 2, xx - n // 2)
    edges = np.linspace(0, n // 2, PROBE_BANDS + 1)
    bands = [spectrum[(radius >= lo) & (radius < hi)].sum() for lo, hi in zip(edges[:-1], edges[1:])]
    return np.concatenate([np.log1p(bands), [img.mean(), img.std()]])


def probe_separability(root: Path, truth: Optional[Path] = None) -> float:
    """
    Linear least-squares probe on pixel statistics.

    Fits one-vs-rest targets on even-indexed images and reports accuracy on the
    odd-indexed ones. A well-formed corpus scores above 0.9.
    """
    root = Path(root)
    table = read_table(truth or root / GROUND_TRUTH_FILE)
    ids, labels = table.column("id"), table.column("label")
    if not ids:
        raise DataError(f"{root}: empty corpus")
    classes = sorted(set(labels))
    feats = []
    for image_id in ids:
        with Image.open(root / image_id) as img:
            feats.append(_radial_features(np.asarray(img.convert("L"))))
    x = np.asarray(feats)
    x = (x - x.mean(axis=0)) / (x.std(axis=0) + 1e-12)
    x = np.hstack([x, np.ones((len(x), 1))])
    y = np.array([classes.index(label) for label in labels])
    targets = np.eye(len(classes))[y]

    train, test = np.arange(0, len(y), 2), np.arange(1, len(y), 2)
    coef, *_ = np.linalg.lstsq(x[train], targets[train], rcond=None)
    accuracy = float((np.argmax(x[test] @ coef, axis=1) == y[test]).mean())
    log.info("[Synth] separability probe accuracy %.3f", accuracy)
    return accuracy
