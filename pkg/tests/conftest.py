"""Shared fixtures: tiny image folders, manifests and float64 tiny models."""

from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from xens.config import RAW_LABELS
from xens.curation import DatasetManifest, ManifestEntry, Provenance, _tally
from xens.models import attach_head, build_extractor


@pytest.fixture(autouse=True)
def quiet_env(monkeypatch):
    monkeypatch.setenv("XENS_PROGRESS", "0")
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    monkeypatch.delenv("XENS_CACHE", raising=False)
    monkeypatch.delenv("XENS_WORKERS", raising=False)


def write_png(path: Path, value: int, size: int = 16) -> Path:
    """A flat grayscale PNG with a value-dependent gradient so contents differ by value."""
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = (np.arange(size * size).reshape(size, size) + value * 7) % 256
    Image.fromarray(pixels.astype(np.uint8)).save(path, format="PNG")
    return path


@pytest.fixture
def image_dirs(tmp_path):
    """Three labelled folders with two distinct images each."""
    dirs = {}
    for i, label in enumerate(RAW_LABELS):
        d = tmp_path / "src" / label
        write_png(d / "x1.png", 10 * i + 1)
        write_png(d / "x2.png", 10 * i + 2)
        dirs[label] = d
    return dirs


def make_manifest(counts: dict[str, int], class_names=None, scheme: str = "D") -> DatasetManifest:
    """In-memory manifest with ids '<label>/<nnnn>' (no files behind the paths)."""
    class_names = tuple(class_names or counts)
    entries = tuple(
        ManifestEntry(f"{label}/{i:04d}", f"/nonexistent/{label}/{i:04d}.png", label, f"h-{label}-{i}")
        for label in class_names for i in range(counts[label])
    )
    entries = tuple(sorted(entries, key=lambda e: e.image_id))
    return DatasetManifest(scheme, entries, class_names, _tally(entries, class_names),
                           Provenance("c", "none", "2023-11-14T22:13:20Z"))


def make_image_manifest(root: Path, counts: dict[str, int], size: int = 16) -> DatasetManifest:
    """Manifest backed by real PNGs; class c images are bright in a class-specific quadrant."""
    class_names = tuple(counts)
    entries = []
    rng = np.random.default_rng(0)
    for c, label in enumerate(class_names):
        for i in range(counts[label]):
            pixels = rng.integers(0, 40, size=(size, size)).astype(np.uint8)
            h = size // 2
            r, q = divmod(c, 2)
            pixels[r * h:(r + 1) * h, q * h:(q + 1) * h] += 200
            path = root / label / f"{i:04d}.png"
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(pixels).save(path, format="PNG")
            entries.append(ManifestEntry(f"{label}/{i:04d}", str(path), label, f"h-{label}-{i}"))
    entries.sort(key=lambda e: e.image_id)
    return DatasetManifest("D", tuple(entries), class_names, _tally(entries, class_names),
                           Provenance("c", "none", "2023-11-14T22:13:20Z"))


@pytest.fixture
def tiny_model64():
    """Tiny 3-class classifier in float64."""
    extractor = build_extractor("tiny", 0, feature_dim=8, dtype=torch.float64)
    return attach_head(extractor, 3, seed=1, model_id="A", class_names=RAW_LABELS)
