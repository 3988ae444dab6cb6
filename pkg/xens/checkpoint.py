"""
Checkpoint container.

Layout (format version 1, all integers little-endian):

    magic        8 bytes   b"XENSCKPT"
    version      uint32
    header_len   uint64
    header       UTF-8 JSON {"metadata": {...}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}]}
    payload      raw little-endian tensor bytes, concatenated in header order
    digest       32 bytes  SHA-256 of every preceding byte

Pretrained backbone weights are consumed in the same container (see save_state_archive).
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

from .errors import ModelError
from .models import (
    ARCH_IDS,
    ClassificationHead,
    ClassifierModel,
    EnsembleModel,
    FeatureExtractor,
    Model,
    build_extractor,
)

log = logging.getLogger(__name__)

MAGIC = b"XENSCKPT"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")
_DIGEST_LEN = 32

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


@dataclass(frozen=True)
class Checkpoint:
    path: Path
    metadata: dict
    digest: str


def save_state_archive(path: Path, tensors: Mapping[str, torch.Tensor], metadata: Optional[dict] = None) -> str:
    """
    Write named tensors plus metadata; returns the hex digest.

    Converting external backbone weights is a one-liner, e.g. for torchvision:
        save_state_archive(out, resnet18(weights="IMAGENET1K_V1").state_dict(), {"source": "torchvision"})
    """
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise ModelError(f"unsupported dtype {t.dtype} for tensor {name}")
        blob = t.numpy().astype(np.dtype(_DTYPES[t.dtype]), copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)

    header = json.dumps({"metadata": metadata or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + digest)
    tmp.replace(path)
    return digest.hex()


def load_state_archive(path: Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Read and verify an archive; returns (tensors, metadata)."""
    path = Path(path)
    if not path.is_file():
        raise ModelError(f"archive not found: {path}")
    data = path.read_bytes()
    if len(data) < _PREAMBLE.size + _DIGEST_LEN:
        raise ModelError(f"{path}: truncated archive")
    body, stored = data[:-_DIGEST_LEN], data[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != stored:
        raise ModelError(f"{path}: digest mismatch (archive corrupted)")

    magic, version, header_len = _PREAMBLE.unpack_from(body)
    if magic != MAGIC:
        raise ModelError(f"{path}: not a xens archive")
    if version != FORMAT_VERSION:
        raise ModelError(f"{path}: unsupported archive version {version}")
    start = _PREAMBLE.size
    header = json.loads(body[start:start + header_len].decode("utf-8"))
    payload = memoryview(body)[start + header_len:]

    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).astype(dtype.newbyteorder("="))
        tensors[entry["name"]] = torch.from_numpy(array.copy()).to(_TORCH_DTYPES[entry["dtype"]])
    return tensors, header["metadata"]


def _member_meta(extractor: FeatureExtractor) -> dict:
    return {"arch_id": extractor.arch_id, "feature_dim": extractor.feature_dim,
            "init_provenance": extractor.init_provenance}


def _as_float32(state: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {k: (v.to(torch.float32) if v.is_floating_point() else v) for k, v in state.items()}


def save_checkpoint(model: Model, path: Path, provenance: Optional[dict] = None) -> Checkpoint:
    """Write a model with 32-bit parameters and enough metadata to rebuild it."""
    if isinstance(model, EnsembleModel):
        kind, members = "ensemble", [_member_meta(e) for e in model.extractors]
    else:
        kind, members = "classifier", [_member_meta(model.extractor)]
    metadata = {
        "format": FORMAT_VERSION,
        "kind": kind,
        "model_id": model.model_id,
        "class_names": list(model.class_names),
        "num_classes": model.num_classes,
        "members": members,
        "member_ids": list(getattr(model, "member_ids", ())),
        "provenance": provenance or {},
    }
    digest = save_state_archive(path, _as_float32(model.state_dict()), metadata)
    log.info("[Save] wrote %s (%s %s, sha256 %s)", path, kind, model.model_id, digest[:12])
    return Checkpoint(Path(path), metadata, digest)


def load_checkpoint(path: Path, expected_num_classes: Optional[int] = None) -> Model:
    """Rebuild a classifier or ensemble from a checkpoint; ensemble members come back frozen."""
    tensors, meta = load_state_archive(path)
    try:
        kind = meta["kind"]
        members = meta["members"]
        num_classes = int(meta["num_classes"])
        class_names = meta.get("class_names", [])
    except (KeyError, TypeError, ValueError):
        raise ModelError(f"{path}: incomplete checkpoint metadata") from None

    for m in members:
        if m.get("arch_id") not in ARCH_IDS:
            raise ModelError(f"{path}: unknown arch_id {m.get('arch_id')!r}")
    if class_names and len(class_names) != num_classes:
        raise ModelError(f"{path}: metadata lists {len(class_names)} classes but K={num_classes}")
    if expected_num_classes is not None and num_classes != expected_num_classes:
        raise ModelError(f"{path}: checkpoint has K={num_classes}, expected {expected_num_classes}")
    head_w = tensors.get("head.weight")
    if head_w is None or head_w.shape[0] != num_classes:
        got = None if head_w is None else head_w.shape[0]
        raise ModelError(f"{path}: head has {got} outputs but metadata says K={num_classes}")

    extractors = [build_extractor(m["arch_id"], 0, int(m.get("feature_dim", 64))) for m in members]
    for e, m in zip(extractors, members):
        e.init_provenance = m.get("init_provenance", e.init_provenance)

    if kind == "classifier":
        extractor = extractors[0]
        model: Model = ClassifierModel(extractor, ClassificationHead(extractor.feature_dim, num_classes),
                                       meta.get("model_id", ""), class_names)
    elif kind == "ensemble":
        dim = sum(e.feature_dim for e in extractors)
        model = EnsembleModel(extractors, ClassificationHead(dim, num_classes),
                              meta.get("model_id", ""), class_names, meta.get("member_ids", []))
    else:
        raise ModelError(f"{path}: unknown checkpoint kind {kind!r}")

    try:
        model.load_state_dict(tensors, strict=True)
    except RuntimeError as e:
        raise ModelError(f"{path}: parameters do not fit the model: {e}") from None
    if kind == "ensemble":
        for e in model.extractors:
            e.freeze()
    model.eval()
    return model


def read_checkpoint_metadata(path: Path) -> dict:
    return load_state_archive(path)[1]
