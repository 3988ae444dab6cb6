"""
Configuration settings for xens.

Environment settings come from the process environment (optionally a .env file);
run settings come from a YAML file loaded strictly into the dataclasses below.
"""

import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, get_args, get_origin, get_type_hints

import yaml
from dotenv import load_dotenv

from .errors import ConfigError
from .utils import sha256_text

# Load .env file if present
load_dotenv()

LOG_LEVEL = os.getenv("XENS_LOG_LEVEL", "INFO")

# Raw source classes and the model line-up
RAW_LABELS = ("normal", "pneumonia", "covid19")
SUB_MODEL_SCHEMES = {"a": "A", "b": "B", "c": "C"}
ENSEMBLE_MEMBERS = {
    "B_ab": ("a", "b"),
    "C_ac": ("a", "c"),
    "D_bc": ("b", "c"),
    "E_abc": ("a", "b", "c"),
}
MAIN_MODELS = ("A", "B_ab", "C_ac", "D_bc", "E_abc")

# Input contract of the pretrained backbone
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

CHECKPOINT_SUFFIX = ".xck"


def cache_dir() -> Optional[Path]:
    """Decoded-image cache location (XENS_CACHE), or None when caching is off."""
    value = os.getenv("XENS_CACHE", "").strip()
    return Path(value) if value else None


def show_progress() -> bool:
    return os.getenv("XENS_PROGRESS", "1") != "0" and sys.stderr.isatty()


def loader_workers() -> int:
    try:
        return max(0, int(os.getenv("XENS_WORKERS", "0")))
    except ValueError:
        raise ConfigError(f"XENS_WORKERS must be an integer, got {os.getenv('XENS_WORKERS')!r}") from None


def source_timestamp() -> str:
    """ISO timestamp for provenance; SOURCE_DATE_EPOCH pins it for reproducible reruns."""
    epoch = os.getenv("SOURCE_DATE_EPOCH", "").strip()
    if epoch:
        try:
            moment = datetime.fromtimestamp(int(epoch), tz=timezone.utc)
        except ValueError:
            raise ConfigError(f"SOURCE_DATE_EPOCH must be an integer, got {epoch!r}") from None
    else:
        moment = datetime.now(tz=timezone.utc).replace(microsecond=0)
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class AugmentationConfig:
    """Training-time augmentation; validation and test use resize + center crop."""
    resize_to: int = 256
    crop_size: int = 224
    rotation_range: float = 10.0
    hflip_prob: float = 0.5

    def validate(self) -> None:
        if self.resize_to < 1 or self.crop_size < 1:
            raise ConfigError("augmentation sizes must be positive")
        if self.crop_size > self.resize_to:
            raise ConfigError(f"crop_size {self.crop_size} exceeds resize_to {self.resize_to}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")
        if self.rotation_range < 0:
            raise ConfigError("rotation_range must be non-negative")


@dataclass
class TrainConfig:
    max_epochs: int = 500
    patience: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    seed: int = 0
    trainable_scope: str = "all"          # all | head-only
    oversample: bool = True
    snapshot_spill_bytes: int = 512 * 1024 * 1024

    def validate(self) -> None:
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.trainable_scope not in ("all", "head-only"):
            raise ConfigError(f"trainable_scope must be 'all' or 'head-only', got {self.trainable_scope!r}")


def _head_only() -> TrainConfig:
    return TrainConfig(learning_rate=1e-3, trainable_scope="head-only")


@dataclass
class BackboneConfig:
    arch: str = "resnet18"                # resnet18 | tiny
    pretrained: Optional[str] = None      # checkpoint-container archive of backbone weights
    feature_dim: int = 64                 # tiny only

    def validate(self) -> None:
        if self.arch not in ("resnet18", "tiny"):
            raise ConfigError(f"unknown backbone arch {self.arch!r}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")


@dataclass
class SplitConfig:
    ratio: float = 0.9
    k: int = 5
    seed: Optional[int] = None            # defaults to the run seed

    def validate(self) -> None:
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"split ratio must lie in (0, 1), got {self.ratio}")
        if self.k < 2:
            raise ConfigError("k must be >= 2")


@dataclass
class PathsConfig:
    sources: list[str] = field(default_factory=list)   # "<dir>:<label>:<source_id>"
    exclusions: Optional[str] = None
    work: str = "work"
    collection: Optional[str] = None
    plans: Optional[str] = None
    checkpoints: Optional[str] = None
    reports: Optional[str] = None


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    variant: str = "raw"                  # raw | refined
    seed: int = 0
    split: SplitConfig = field(default_factory=SplitConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    sub_models: TrainConfig = field(default_factory=TrainConfig)
    baseline: TrainConfig = field(default_factory=TrainConfig)
    ensembles: TrainConfig = field(default_factory=_head_only)
    folds: Optional[list[int]] = None     # folds trained by run-all; None = all k
    parallel_sub_models: bool = False
    eval_batch_size: int = 64
    base_dir: str = field(default=".", metadata={"internal": True})

    def validate(self) -> None:
        if self.variant not in ("raw", "refined"):
            raise ConfigError(f"variant must be 'raw' or 'refined', got {self.variant!r}")
        if self.variant == "refined" and not self.paths.exclusions:
            raise ConfigError("variant 'refined' requires paths.exclusions")
        self.split.validate()
        self.backbone.validate()
        self.augmentation.validate()
        for block in (self.sub_models, self.baseline, self.ensembles):
            block.validate()
        if self.folds is not None:
            bad = [f for f in self.folds if not 0 <= f < self.split.k]
            if bad:
                raise ConfigError(f"folds out of range for k={self.split.k}: {bad}")
        if self.eval_batch_size < 1:
            raise ConfigError("eval_batch_size must be >= 1")

    def resolve(self, value: Optional[str], default: str) -> Path:
        """Resolve a configured path (or its default under paths.work) against the config file."""
        base = Path(self.base_dir)
        work = Path(self.paths.work)
        work = work if work.is_absolute() else base / work
        if value is None:
            return work / default
        p = Path(value)
        return p if p.is_absolute() else base / p

    @property
    def split_seed(self) -> int:
        return self.seed if self.split.seed is None else self.split.seed

    @property
    def collection_path(self) -> Path:
        return self.resolve(self.paths.collection, "collection.tsv")

    @property
    def manifests_dir(self) -> Path:
        return self.resolve(None, "manifests")

    @property
    def plans_dir(self) -> Path:
        return self.resolve(self.paths.plans, "plans")

    @property
    def checkpoints_dir(self) -> Path:
        return self.resolve(self.paths.checkpoints, "checkpoints")

    @property
    def reports_dir(self) -> Path:
        return self.resolve(self.paths.reports, "reports")

    @property
    def exclusions_path(self) -> Optional[Path]:
        if self.variant == "raw" or not self.paths.exclusions:
            return None
        return self.resolve(self.paths.exclusions, "")

    def fold_indices(self) -> list[int]:
        return list(range(self.split.k)) if self.folds is None else sorted(set(self.folds))

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data.pop("base_dir")
        return data

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form, recorded in every artifact."""
        return sha256_text(json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")))

    def provenance(self) -> dict:
        return {"config_digest": self.digest(), "seed": self.seed, "variant": self.variant}


@dataclass
class ClassSignature:
    """Procedural texture of one synthetic class."""
    frequency: float = 4.0                # stripe cycles per image width
    shape: str = "none"                   # none | blobs | ring


def _default_signatures() -> dict[str, ClassSignature]:
    return {
        "normal": ClassSignature(frequency=3.0, shape="none"),
        "pneumonia": ClassSignature(frequency=7.0, shape="blobs"),
        "covid19": ClassSignature(frequency=12.0, shape="ring"),
    }


@dataclass
class ConfoundConfig:
    enabled: bool = False
    label: str = "covid19"
    fraction: float = 1.0


@dataclass
class SyntheticCorpusSpec:
    counts: dict[str, int] = field(default_factory=lambda: {label: 100 for label in RAW_LABELS})
    image_size: int = 96
    signatures: dict[str, ClassSignature] = field(default_factory=_default_signatures)
    noise_level: float = 0.05
    signal_strength: float = 1.0
    confound: ConfoundConfig = field(default_factory=ConfoundConfig)
    seed: int = 7
    k: int = 5

    def validate(self) -> None:
        if set(self.counts) != set(RAW_LABELS):
            raise ConfigError(f"counts must name exactly {', '.join(RAW_LABELS)}")
        if set(self.signatures) != set(RAW_LABELS):
            raise ConfigError(f"signatures must name exactly {', '.join(RAW_LABELS)}")
        for label, sig in self.signatures.items():
            if sig.shape not in ("none", "blobs", "ring"):
                raise ConfigError(f"signatures.{label}.shape must be none, blobs or ring")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        if self.confound.label not in RAW_LABELS:
            raise ConfigError(f"confound.label must be one of {', '.join(RAW_LABELS)}")
        if not 0.0 <= self.confound.fraction <= 1.0:
            raise ConfigError("confound.fraction must lie in [0, 1]")
        if self.noise_level < 0 or self.signal_strength < 0:
            raise ConfigError("noise_level and signal_strength must be non-negative")


def _coerce(tp: Any, value: Any, key: str) -> Any:
    """Convert a YAML value into the annotated field type, rejecting unknown keys."""
    origin = get_origin(tp)
    args = get_args(tp)

    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, key)
    if origin is Optional or (origin is not None and type(None) in args):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(inner, value, key)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list")
        return [_coerce(args[0], v, f"{key}[{i}]") for i, v in enumerate(value)]
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} values")
        return tuple(_coerce(a, v, key) for a, v in zip(args, value))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping")
        return {str(k): _coerce(args[1], v, f"{key}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, (str, int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return str(value)
    return value


def from_dict(cls, data: Optional[dict], prefix: str = ""):
    """Build a config dataclass from a mapping; unknown keys are fatal."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    hints = get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    unknown = sorted(set(data) - set(known))
    if unknown:
        names = ", ".join(f"{prefix}.{k}" if prefix else str(k) for k in unknown)
        raise ConfigError(f"unknown config key(s): {names}")
    kwargs = {}
    for name, value in data.items():
        key = f"{prefix}.{name}" if prefix else name
        kwargs[name] = _coerce(hints[name], value, key)
        # a partial nested block overrides only the keys it names
        factory = known[name].default_factory
        if dataclasses.is_dataclass(hints[name]) and isinstance(value, dict) and factory is not dataclasses.MISSING:
            kwargs[name] = dataclasses.replace(factory(), **{k: getattr(kwargs[name], k) for k in value})
    return cls(**kwargs)


def _load_yaml(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from None
    return data or {}


def load_run_config(path: Path) -> RunConfig:
    """Load and validate a run configuration; relative paths resolve against its directory."""
    path = Path(path)
    cfg = from_dict(RunConfig, _load_yaml(path))
    cfg.base_dir = str(path.resolve().parent)
    cfg.validate()
    return cfg


def load_corpus_spec(path: Path) -> SyntheticCorpusSpec:
    spec = from_dict(SyntheticCorpusSpec, _load_yaml(Path(path)))
    spec.validate()
    return spec
