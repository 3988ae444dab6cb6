"""
Feature extractors, classification heads and the frozen-concatenation ensemble.
"""

import copy
import logging
import math
from pathlib import Path
from typing import Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .errors import ModelError

log = logging.getLogger(__name__)

ARCH_IDS = ("resnet18", "tiny")
RESNET18_FEATURE_DIM = 512


class TinyBackbone(nn.Sequential):
    """Three conv+pool stages and global average pooling; a CPU-sized stand-in for ResNet-18."""

    def __init__(self, feature_dim: int = 64):
        widths = (16, 32, feature_dim)
        layers: list[nn.Module] = []
        in_ch = 3
        for out_ch in widths:
            layers += [nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            in_ch = out_ch
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        super().__init__(*layers)


def _resnet18_body() -> nn.Module:
    body = torchvision.models.resnet18(weights=None)
    body.fc = nn.Identity()
    return body


class FeatureExtractor(nn.Module):
    """A backbone whose forward returns the penultimate (globally pooled) feature vector."""

    def __init__(self, arch_id: str, body: nn.Module, feature_dim: int, init_provenance: str):
        super().__init__()
        self.arch_id = arch_id
        self.body = body
        self.feature_dim = feature_dim
        self.init_provenance = init_provenance
        self.frozen = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)

    def freeze(self) -> "FeatureExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self

    def unfreeze(self) -> "FeatureExtractor":
        for p in self.parameters():
            p.requires_grad_(True)
        self.frozen = False
        return self

    def train(self, mode: bool = True):
        # frozen extractors keep their normalization statistics
        return super().train(mode and not self.frozen)


class ClassificationHead(nn.Linear):
    """Affine layer over features producing K logits."""

    def __init__(self, feature_dim: int, num_classes: int, seed: int = 0):
        super().__init__(feature_dim, num_classes)
        self.reset_seeded(seed)

    @property
    def num_classes(self) -> int:
        return self.out_features

    def reset_seeded(self, seed: int) -> None:
        """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias."""
        bound = 1.0 / math.sqrt(self.in_features)
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            w = torch.rand(self.weight.shape, generator=g, dtype=torch.float64) * 2 * bound - bound
            self.weight.copy_(w.to(self.weight.dtype))
            self.bias.zero_()


class ClassifierModel(nn.Module):
    """Extractor + head: sub-models a/b/c and the single-network baseline A."""

    def __init__(self, extractor: FeatureExtractor, head: ClassificationHead,
                 model_id: str = "", class_names: Sequence[str] = ()):
        super().__init__()
        if head.in_features != extractor.feature_dim:
            raise ModelError(f"head expects {head.in_features} features, extractor gives {extractor.feature_dim}")
        self.extractor = extractor
        self.head = head
        self.model_id = model_id
        self.class_names = tuple(class_names)

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.extractor(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.extractor(x))


class EnsembleModel(nn.Module):
    """Frozen member extractors, concatenated features, one trainable softmax head."""

    def __init__(self, extractors: Sequence[FeatureExtractor], head: ClassificationHead,
                 model_id: str = "", class_names: Sequence[str] = (), member_ids: Sequence[str] = ()):
        super().__init__()
        self.extractors = nn.ModuleList(extractors)
        self.concat_dim = sum(e.feature_dim for e in extractors)
        if head.in_features != self.concat_dim:
            raise ModelError(f"head expects {head.in_features} features, members give {self.concat_dim}")
        self.head = head
        self.model_id = model_id
        self.class_names = tuple(class_names)
        self.member_ids = tuple(member_ids)

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([e(x) for e in self.extractors], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


Model = Union[ClassifierModel, EnsembleModel]


def _model_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def _load_backbone_archive(body: nn.Module, archive: Path) -> None:
    """Copy backbone weights from a checkpoint-container archive, strictly by name and shape."""
    from .checkpoint import load_state_archive

    tensors, _ = load_state_archive(archive)
    # accept both bare backbone names ("conv1.weight") and extractor-prefixed ones
    tensors = {k.removeprefix("extractor.").removeprefix("body."): v for k, v in tensors.items()}
    expected = dict(body.named_parameters())
    problems = []
    for name, param in expected.items():
        if name not in tensors:
            problems.append(f"missing {name}")
        elif tuple(tensors[name].shape) != tuple(param.shape):
            problems.append(f"shape {name}: archive {tuple(tensors[name].shape)} vs model {tuple(param.shape)}")
    if problems:
        raise ModelError(f"pretrained archive {archive} does not fit the backbone: " + "; ".join(problems))

    state = body.state_dict()
    for name in state:
        if name in tensors:
            if tuple(tensors[name].shape) != tuple(state[name].shape):
                raise ModelError(f"pretrained archive {archive}: shape mismatch for buffer {name}")
            state[name] = tensors[name].to(state[name].dtype)
    body.load_state_dict(state, strict=True)
    ignored = sorted(set(tensors) - set(state))
    if ignored:
        log.debug("[Model] ignored %d archive entr(ies) outside the backbone: %s", len(ignored), ignored[:4])


def build_extractor(arch_id: str, init: Union[Path, str, int] = 0, feature_dim: int = 64,
                    dtype: torch.dtype = torch.float32) -> FeatureExtractor:
    """
    Build a feature extractor.

    Args:
        arch_id: "resnet18" (fc removed, 512-d pooled features) or "tiny"
        init: Path to a pretrained archive, or an integer seed for random init
        feature_dim: Output width of the tiny backbone (ignored for resnet18)
        dtype: Parameter dtype

    Returns:
        An unfrozen FeatureExtractor
    """
    if arch_id not in ARCH_IDS:
        raise ModelError(f"unknown arch_id {arch_id!r} (expected one of {', '.join(ARCH_IDS)})")

    seed = init if isinstance(init, int) else 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if arch_id == "resnet18":
            body, dim = _resnet18_body(), RESNET18_FEATURE_DIM
        else:
            body, dim = TinyBackbone(feature_dim), feature_dim

    if isinstance(init, int):
        provenance = f"random({init})"
    else:
        _load_backbone_archive(body, Path(init))
        provenance = "pretrained-archive"
    return FeatureExtractor(arch_id, body.to(dtype), dim, provenance)


def attach_head(extractor: FeatureExtractor, num_classes: int, seed: int = 0,
                model_id: str = "", class_names: Sequence[str] = ()) -> ClassifierModel:
    if num_classes < 2:
        raise ModelError(f"a classification head needs K >= 2, got {num_classes}")
    head = ClassificationHead(extractor.feature_dim, num_classes, seed).to(_model_dtype(extractor))
    return ClassifierModel(extractor, head, model_id, class_names)


def strip_and_freeze(model: ClassifierModel) -> FeatureExtractor:
    """Drop the head and return a frozen copy of the trained extractor (parameters bit-equal)."""
    return copy.deepcopy(model.extractor).freeze()


def assemble_ensemble(extractors: Sequence[FeatureExtractor], num_classes: int = 3, seed: int = 0,
                      model_id: str = "", class_names: Sequence[str] = (),
                      member_ids: Sequence[str] = ()) -> EnsembleModel:
    """Concatenate frozen extractors (in argument order) under a new softmax head."""
    if len(extractors) < 2:
        raise ModelError(f"an ensemble needs at least 2 extractors, got {len(extractors)}")
    unfrozen = [i for i, e in enumerate(extractors) if not e.frozen]
    if unfrozen:
        raise ModelError(f"ensemble member(s) {unfrozen} are not frozen")
    concat_dim = sum(e.feature_dim for e in extractors)
    head = ClassificationHead(concat_dim, num_classes, seed).to(_model_dtype(extractors[0]))
    return EnsembleModel(extractors, head, model_id, class_names, member_ids)


def check_input(model: Model, images: torch.Tensor) -> None:
    if images.ndim != 4 or images.shape[1] != 3:
        raise ModelError(f"expected a batch shaped (N, 3, H, W), got {tuple(images.shape)}")


def forward(model: Model, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(logits, row-wise softmax probabilities) for a batch."""
    check_input(model, images)
    logits = model(images.to(_model_dtype(model)))
    return logits, F.softmax(logits, dim=1)
