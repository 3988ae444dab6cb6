"""
Data models and curation logic for chest X-ray collections.

Ingests labelled source folders, removes byte-identical duplicates, applies
artifact-exclusion lists and composes the four training datasets (schemes A-D).
"""

import logging
import os
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from PIL import Image, UnidentifiedImageError

from .config import RAW_LABELS, source_timestamp
from .errors import DataError
from .utils import Table, parse_bool, read_table, sha256_file, sha256_text, write_table

log = logging.getLogger(__name__)

# scheme -> (ordered class names, raw label -> class name)
SCHEMES: dict[str, tuple[tuple[str, ...], dict[str, str]]] = {
    "A": (("normal", "diseased"),
          {"normal": "normal", "pneumonia": "diseased", "covid19": "diseased"}),
    "B": (("non-pneumonia", "pneumonia"),
          {"normal": "non-pneumonia", "pneumonia": "pneumonia", "covid19": "non-pneumonia"}),
    "C": (("non-covid19", "covid19"),
          {"normal": "non-covid19", "pneumonia": "non-covid19", "covid19": "covid19"}),
    "D": (RAW_LABELS, {label: label for label in RAW_LABELS}),
}

RE_SOURCE = re.compile(r"^(?P<dir>.+):(?P<label>[A-Za-z0-9_-]+):(?P<source>[A-Za-z0-9_.-]+)$")

COLLECTION_COLUMNS = ["id", "path", "source", "raw_label", "hash", "width", "height", "excluded", "reason"]
MANIFEST_COLUMNS = ["id", "path", "label", "hash", "excluded", "reason"]


@dataclass(frozen=True)
class SourceSpec:
    """One labelled input folder."""
    directory: Path
    raw_label: str
    source_id: str

    @classmethod
    def parse(cls, text: str) -> "SourceSpec":
        """Parse '<dir>:<label>:<source_id>' (the directory may itself contain colons)."""
        m = RE_SOURCE.match(text.strip())
        if not m:
            raise DataError(f"source must look like <dir>:<label>:<source_id>, got {text!r}")
        return cls(Path(m.group("dir")), m.group("label"), m.group("source"))


@dataclass(frozen=True)
class ImageRecord:
    """A single curated image."""
    id: str                 # "<source_id>/<relative path>"
    path: str
    source_id: str
    raw_label: str
    content_hash: str       # SHA-256 of file bytes
    width: int
    height: int
    excluded: bool = False
    exclusion_reason: Optional[str] = None


@dataclass(frozen=True)
class ImageCollection:
    """Immutable, id-sorted set of records plus the files that failed to decode."""
    records: tuple[ImageRecord, ...]
    skipped: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if ids != sorted(ids):
            object.__setattr__(self, "records", tuple(sorted(self.records, key=lambda r: r.id)))
        dupes = [i for i, n in Counter(ids).items() if n > 1]
        if dupes:
            raise DataError(f"duplicate record id(s): {', '.join(sorted(dupes)[:5])}")

    def __len__(self) -> int:
        return len(self.records)

    def active(self) -> list[ImageRecord]:
        return [r for r in self.records if not r.excluded]

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def counts(self, active_only: bool = True) -> dict[str, int]:
        recs = self.active() if active_only else self.records
        tally = Counter(r.raw_label for r in recs)
        return {label: tally.get(label, 0) for label in RAW_LABELS}

    def digest(self) -> str:
        """Digest over (id, hash, excluded) of every record; stable across path moves."""
        lines = [f"{r.id}\t{r.content_hash}\t{int(r.excluded)}" for r in self.records]
        return sha256_text("\n".join(lines))


@dataclass(frozen=True)
class ExclusionEntry:
    image_id: str
    reason: str = "artifact"


@dataclass
class CurationReport:
    """What dedup/exclusion did to a collection."""
    duplicates_removed: list[tuple[str, list[str]]] = field(default_factory=list)
    excluded: list[tuple[str, str]] = field(default_factory=list)
    stale_ids: list[str] = field(default_factory=list)
    counts_before: dict[str, int] = field(default_factory=dict)
    counts_after: dict[str, int] = field(default_factory=dict)

    @property
    def removed_count(self) -> int:
        return sum(len(r) for _, r in self.duplicates_removed)


@dataclass(frozen=True)
class Provenance:
    collection_digest: str
    exclusion_digest: str
    created: str


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    path: str
    label: str
    content_hash: str


@dataclass(frozen=True)
class DatasetManifest:
    """A relabelled view of the active collection under one scheme."""
    scheme: str
    entries: tuple[ManifestEntry, ...]
    class_names: tuple[str, ...]
    class_counts: dict[str, int]
    provenance: Provenance
    excluded: tuple[tuple[ManifestEntry, str], ...] = ()

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    def labels(self) -> list[int]:
        index = {name: i for i, name in enumerate(self.class_names)}
        return [index[e.label] for e in self.entries]

    def subset(self, ids: Iterable[str]) -> "DatasetManifest":
        """Restrict to the given ids (kept in manifest order); counts are re-tallied."""
        wanted = set(ids)
        missing = wanted - set(self.ids())
        if missing:
            raise DataError(f"{len(missing)} id(s) not in manifest {self.scheme}, e.g. {sorted(missing)[0]}")
        entries = tuple(e for e in self.entries if e.image_id in wanted)
        return replace(self, entries=entries, class_counts=_tally(entries, self.class_names), excluded=())


def _tally(entries: Sequence[ManifestEntry], class_names: Sequence[str]) -> dict[str, int]:
    counts = Counter(e.label for e in entries)
    return {name: counts.get(name, 0) for name in class_names}


def _list_files(directory: Path) -> list[Path]:
    files = []
    for root, dirs, names in os.walk(directory):
        dirs[:] = sorted(d for d in dirs if not d.startswith("."))
        files.extend(Path(root) / n for n in sorted(names) if not n.startswith("."))
    return sorted(files, key=lambda p: p.relative_to(directory).as_posix())


def _probe_file(path: Path) -> tuple[Optional[tuple[int, int]], Optional[str], str]:
    """Decode a file fully and hash it. Returns (size or None, error or None, hash)."""
    digest = sha256_file(path)
    try:
        with Image.open(path) as img:
            img.load()
            return img.size, None, digest
    except (UnidentifiedImageError, Image.DecompressionBombError, OSError, SyntaxError, ValueError) as e:
        return None, f"undecodable: {type(e).__name__}", digest


def ingest_sources(specs: Sequence[SourceSpec], workers: int = 0) -> ImageCollection:
    """
    Build a collection from labelled folders.

    Args:
        specs: Source folders with their raw label and source id
        workers: Thread count for decoding/hashing (0 = sequential)

    Returns:
        ImageCollection with one record per decodable file; failures go to `skipped`
    """
    if not specs:
        raise DataError("no sources given")

    jobs: list[tuple[SourceSpec, Path]] = []
    for spec in specs:
        if spec.raw_label not in RAW_LABELS:
            raise DataError(f"unknown raw label {spec.raw_label!r} for {spec.directory} "
                            f"(expected one of {', '.join(RAW_LABELS)})")
        if not spec.directory.is_dir():
            raise DataError(f"source directory not found: {spec.directory}")
        files = _list_files(spec.directory)
        log.info("[Ingest] %s (%s, %s): %d file(s)", spec.directory, spec.raw_label, spec.source_id, len(files))
        jobs.extend((spec, f) for f in files)

    paths = [f for _, f in jobs]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            probes = list(pool.map(_probe_file, paths))
    else:
        probes = [_probe_file(p) for p in paths]

    records: list[ImageRecord] = []
    skipped: list[tuple[str, str]] = []
    for (spec, f), (size, error, digest) in zip(jobs, probes):
        if size is None:
            log.warning("[Ingest] skipped %s (%s)", f, error)
            skipped.append((str(f), error))
            continue
        rel = f.relative_to(spec.directory).as_posix()
        records.append(ImageRecord(
            id=f"{spec.source_id}/{rel}",
            path=str(f),
            source_id=spec.source_id,
            raw_label=spec.raw_label,
            content_hash=digest,
            width=size[0],
            height=size[1],
        ))

    if not records:
        raise DataError(f"no decodable images found in {len(specs)} source(s)")

    collection = ImageCollection(tuple(records), tuple(sorted(skipped)))
    log.info("[Ingest] %d record(s), %d skipped; counts %s", len(collection), len(skipped), collection.counts())
    return collection


def deduplicate(collection: ImageCollection) -> tuple[ImageCollection, CurationReport]:
    """
    Keep one record per content hash: the lexicographically smallest id survives.
    """
    if not len(collection):
        raise DataError("cannot deduplicate an empty collection")

    kept: dict[str, ImageRecord] = {}
    removed: dict[str, list[str]] = {}
    for rec in collection.records:          # already sorted by id
        survivor = kept.get(rec.content_hash)
        if survivor is None:
            kept[rec.content_hash] = rec
        else:
            removed.setdefault(survivor.id, []).append(rec.id)

    survivors = tuple(sorted(kept.values(), key=lambda r: r.id))
    out = ImageCollection(survivors, collection.skipped)
    report = CurationReport(
        duplicates_removed=sorted(removed.items()),
        counts_before=collection.counts(),
        counts_after=out.counts(),
    )
    log.info("[Dedup] removed %d duplicate(s); counts %s", report.removed_count, report.counts_after)
    return out, report


def load_exclusion_list(path: Path) -> list[ExclusionEntry]:
    """
    Read an exclusion file: one id per line, optional tab-separated reason, '#' comments.
    """
    if not Path(path).is_file():
        raise DataError(f"exclusion list not found: {path}")
    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        image_id, _, reason = line.partition("\t")
        entries.append(ExclusionEntry(image_id.strip(), reason.strip() or "artifact"))
    return entries


def exclusion_digest(entries: Sequence[ExclusionEntry]) -> str:
    if not entries:
        return "none"
    return sha256_text("\n".join(f"{e.image_id}\t{e.reason}" for e in sorted(entries, key=lambda e: e.image_id)))


def apply_exclusions(collection: ImageCollection,
                     exclusions: Sequence[ExclusionEntry]) -> tuple[ImageCollection, CurationReport]:
    """
    Mark listed records as excluded. Unknown ids are reported as stale, never fatal.
    An empty list yields the raw variant unchanged.
    """
    by_id = {e.image_id: e for e in exclusions}
    known = set(collection.ids())
    stale = sorted(set(by_id) - known)
    for image_id in stale:
        log.warning("[Exclude] stale id not in collection: %s", image_id)

    records = []
    excluded = []
    for rec in collection.records:
        entry = by_id.get(rec.id)
        if entry is not None and not rec.excluded:
            rec = replace(rec, excluded=True, exclusion_reason=entry.reason)
            excluded.append((rec.id, entry.reason))
        records.append(rec)

    out = ImageCollection(tuple(records), collection.skipped)
    report = CurationReport(
        excluded=excluded,
        stale_ids=stale,
        counts_before=collection.counts(),
        counts_after=out.counts(),
    )
    log.info("[Exclude] %d excluded, %d stale; counts %s", len(excluded), len(stale), report.counts_after)
    return out, report


def compose_dataset(collection: ImageCollection, scheme: str,
                    exclusions_digest: str = "none") -> DatasetManifest:
    """
    Relabel the active collection under a scheme (A, B, C or D).

    Raises:
        DataError: unknown scheme, or a raw label / scheme class without members
    """
    if scheme not in SCHEMES:
        raise DataError(f"unknown scheme {scheme!r} (expected A, B, C or D)")
    class_names, mapping = SCHEMES[scheme]

    raw_counts = collection.counts()
    missing = [label for label, n in raw_counts.items() if n == 0]
    if missing:
        raise DataError(f"scheme {scheme}: no active images for {', '.join(missing)}; counts {raw_counts}")

    entries = tuple(
        ManifestEntry(r.id, r.path, mapping[r.raw_label], r.content_hash) for r in collection.active()
    )
    counts = _tally(entries, class_names)
    empty = [name for name, n in counts.items() if n == 0]
    if empty:
        raise DataError(f"scheme {scheme}: empty class(es) {', '.join(empty)}; counts {counts}")

    excluded = tuple(
        (ManifestEntry(r.id, r.path, mapping[r.raw_label], r.content_hash), r.exclusion_reason or "")
        for r in collection.records if r.excluded
    )
    manifest = DatasetManifest(
        scheme=scheme,
        entries=entries,
        class_names=class_names,
        class_counts=counts,
        provenance=Provenance(collection.digest(), exclusions_digest, source_timestamp()),
        excluded=excluded,
    )
    log.info("[Compose] scheme %s: %s", scheme, counts)
    return manifest


# File formats

def write_collection(path: Path, collection: ImageCollection,
                     reports: Sequence[CurationReport] = ()) -> None:
    """Write a collection; the curation reports ride along as '#' metadata lines."""
    meta = [("kind", "collection"), ("digest", collection.digest())]
    for report in reports:
        meta += [("duplicate", f"{kept} <- {','.join(ids)}") for kept, ids in report.duplicates_removed]
        meta += [("stale", image_id) for image_id in report.stale_ids]
    meta += [("skipped", f"{p} ({reason})") for p, reason in collection.skipped]
    rows = [[r.id, r.path, r.source_id, r.raw_label, r.content_hash, str(r.width), str(r.height),
             str(r.excluded).lower(), r.exclusion_reason or ""] for r in collection.records]
    write_table(Path(path), Table(COLLECTION_COLUMNS, rows, meta))


def read_collection(path: Path) -> ImageCollection:
    table = read_table(Path(path))
    if table.header != COLLECTION_COLUMNS:
        raise DataError(f"{path}: not a collection file (header {table.header})")
    records = []
    for row in table.rows:
        rid, p, source, label, digest, w, h, excluded, reason = row
        if label not in RAW_LABELS:
            raise DataError(f"{path}: unknown raw label {label!r} for {rid}")
        try:
            width, height = int(w), int(h)
        except ValueError:
            raise DataError(f"{path}: bad image size {w!r}x{h!r} for {rid}") from None
        records.append(ImageRecord(rid, p, source, label, digest, width, height,
                                   parse_bool(excluded), reason or None))
    skipped = []
    for value in table.meta_values("skipped"):
        p, _, reason = value.rpartition(" (")
        skipped.append((p, reason.rstrip(")")))
    return ImageCollection(tuple(records), tuple(skipped))


def write_manifest(path: Path, manifest: DatasetManifest, extra_meta: Sequence[tuple[str, str]] = ()) -> None:
    """Write a manifest: active rows plus excluded rows flagged, sorted by id."""
    meta = [
        ("kind", "manifest"),
        ("scheme", manifest.scheme),
        ("classes", ",".join(manifest.class_names)),
        ("counts", ",".join(f"{k}={v}" for k, v in manifest.class_counts.items())),
        ("collection_digest", manifest.provenance.collection_digest),
        ("exclusion_digest", manifest.provenance.exclusion_digest),
        ("created", manifest.provenance.created),
    ] + list(extra_meta)
    rows = [[e.image_id, e.path, e.label, e.content_hash, "false", ""] for e in manifest.entries]
    rows += [[e.image_id, e.path, e.label, e.content_hash, "true", reason] for e, reason in manifest.excluded]
    rows.sort(key=lambda row: row[0])
    write_table(Path(path), Table(MANIFEST_COLUMNS, rows, meta))


def read_manifest(path: Path) -> DatasetManifest:
    table = read_table(Path(path))
    if table.header != MANIFEST_COLUMNS or table.meta_value("kind") != "manifest":
        raise DataError(f"{path}: not a manifest file")
    scheme = table.meta_value("scheme", "")
    class_names = tuple((table.meta_value("classes") or "").split(","))
    entries, excluded = [], []
    for rid, p, label, digest, flag, reason in table.rows:
        if label not in class_names:
            raise DataError(f"{path}: label {label!r} of {rid} not in classes {class_names}")
        entry = ManifestEntry(rid, p, label, digest)
        if parse_bool(flag):
            excluded.append((entry, reason))
        else:
            entries.append(entry)
    provenance = Provenance(
        table.meta_value("collection_digest", ""),
        table.meta_value("exclusion_digest", "none"),
        table.meta_value("created", ""),
    )
    return DatasetManifest(scheme, tuple(entries), class_names, _tally(entries, class_names),
                           provenance, tuple(excluded))
