"""
Run orchestration: data preparation, the per-fold training order (sub-models a/b/c,
baseline A, ensembles), held-out evaluation, fold aggregation and the report.
"""

import dataclasses
import logging
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import (
    CHECKPOINT_SUFFIX,
    ENSEMBLE_MEMBERS,
    MAIN_MODELS,
    RAW_LABELS,
    SUB_MODEL_SCHEMES,
    RunConfig,
    SyntheticCorpusSpec,
    TrainConfig,
    loader_workers,
)
from .curation import (
    DatasetManifest,
    ManifestEntry,
    SourceSpec,
    apply_exclusions,
    compose_dataset,
    deduplicate,
    exclusion_digest,
    ingest_sources,
    load_exclusion_list,
    read_manifest,
    write_collection,
    write_manifest,
)
from .errors import ConfigError, DataError, ModelError
from .evaluation import EvalReport, aggregate_folds, evaluate_model, mean_ppv, read_report, write_report
from .models import Model, assemble_ensemble, attach_head, build_extractor, strip_and_freeze
from .report import (
    FULL_ENSEMBLE_ID,
    ReportDocument,
    render_comparison,
    render_report,
    write_comparison_files,
    write_report_files,
)
from .sampling import (
    FoldPlan,
    SplitPlan,
    XrayDataset,
    eval_loader,
    holdout_split,
    make_folds,
    oversample_weights,
    read_fold_plan,
    read_split_plan,
    train_loader,
    uniform_plan,
    write_fold_plan,
    write_split_plan,
)
from .synth import generate_synthetic_corpus
from .training import TrainingHistory, class_weights, fit
from .utils import Table, sha256_file, write_table

log = logging.getLogger(__name__)

SCHEMES = ("A", "B", "C", "D")
SPLIT_FILE = "split.tsv"
FOLDS_FILE = "folds.tsv"
TEST_MANIFEST_FILE = "test_D.tsv"

# seed offsets keep every model's initialization and sampling streams distinct
MODEL_SEED_OFFSETS = {"a": 1, "b": 2, "c": 3, "A": 4, "B_ab": 5, "C_ac": 6, "D_bc": 7, "E_abc": 8}


@dataclass
class PipelineContext:
    """Everything a fold needs: config, the four scheme manifests and the plans."""
    config: RunConfig
    manifests: dict[str, DatasetManifest]
    split: SplitPlan
    folds: FoldPlan
    workers: int = 0

    @property
    def test_manifest(self) -> DatasetManifest:
        return self.manifests["D"].subset(self.split.test_ids)

    def fold_dir(self, fold: int) -> Path:
        return self.config.checkpoints_dir / f"fold{fold}"

    def checkpoint_path(self, model_id: str, fold: int) -> Path:
        return self.fold_dir(fold) / f"{model_id}{CHECKPOINT_SUFFIX}"

    def history_path(self, model_id: str, fold: int) -> Path:
        return self.fold_dir(fold) / f"{model_id}.history.tsv"

    def report_dir(self, fold: int) -> Path:
        return self.config.reports_dir / f"fold{fold}"


def model_seed(run_seed: int, model_id: str, fold: int) -> int:
    state = np.random.SeedSequence([run_seed, MODEL_SEED_OFFSETS[model_id], fold]).generate_state(1)[0]
    return int(state) & 0x7FFFFFFF


def ensemble_id_for(members: Sequence[str]) -> str:
    """Map member names (any order) to the ensemble id, e.g. ('b', 'a') -> 'B_ab'."""
    wanted = sorted(m.strip() for m in members)
    for ensemble_id, names in ENSEMBLE_MEMBERS.items():
        if sorted(names) == wanted:
            return ensemble_id
    raise ConfigError(f"no ensemble with members {','.join(members)} "
                      f"(known: {', '.join('+'.join(v) for v in ENSEMBLE_MEMBERS.values())})")


def _meta(config: RunConfig, **extra) -> list[tuple[str, str]]:
    pairs = [(k, str(v)) for k, v in config.provenance().items()]
    return pairs + [(k, str(v)) for k, v in extra.items()]


# Data preparation

def _source_specs(config: RunConfig) -> list[SourceSpec]:
    if not config.paths.sources:
        raise ConfigError("paths.sources is empty")
    specs = []
    for text in config.paths.sources:
        spec = SourceSpec.parse(text)
        if not spec.directory.is_absolute():
            spec = replace(spec, directory=Path(config.base_dir) / spec.directory)
        specs.append(spec)
    return specs


def prepare_data(config: RunConfig, workers: Optional[int] = None) -> PipelineContext:
    """Ingest, deduplicate, exclude (refined variant), compose A-D and plan the split and folds."""
    workers = loader_workers() if workers is None else workers
    collection = ingest_sources(_source_specs(config), workers=workers)
    collection, dedup_report = deduplicate(collection)
    reports = [dedup_report]

    digest = "none"
    if config.exclusions_path is not None:
        exclusions = load_exclusion_list(config.exclusions_path)
        collection, excl_report = apply_exclusions(collection, exclusions)
        digest = exclusion_digest(exclusions)
        reports.append(excl_report)
    write_collection(config.collection_path, collection, reports)

    manifests = {}
    for scheme in SCHEMES:
        manifests[scheme] = compose_dataset(collection, scheme, digest)
        write_manifest(config.manifests_dir / f"scheme_{scheme}.tsv", manifests[scheme], _meta(config))

    split = holdout_split(manifests["D"], config.split.ratio, config.split_seed)
    train_m = manifests["D"].subset(split.train_ids)
    folds = make_folds(train_m.ids(), train_m.labels(), config.split.k, config.split_seed)
    plans = config.plans_dir
    write_split_plan(plans / SPLIT_FILE, split, _meta(config))
    write_fold_plan(plans / FOLDS_FILE, folds, _meta(config))
    write_manifest(plans / TEST_MANIFEST_FILE, manifests["D"].subset(split.test_ids), _meta(config))
    log.info("[Plan] %d train / %d test images, %d folds", len(split.train_ids), len(split.test_ids), folds.k)
    return PipelineContext(config, manifests, split, folds, workers)


def prepared_files(config: RunConfig) -> list[Path]:
    """The manifests and plans every train-* step reads."""
    files = [config.manifests_dir / f"scheme_{scheme}.tsv" for scheme in SCHEMES]
    return files + [config.plans_dir / name for name in (SPLIT_FILE, FOLDS_FILE, TEST_MANIFEST_FILE)]


def load_context(config: RunConfig, workers: Optional[int] = None,
                 prepare_missing: bool = False) -> PipelineContext:
    """
    Reload manifests and plans written by prepare_data.

    With prepare_missing, a work directory lacking any of them is prepared first.
    """
    missing = [p for p in prepared_files(config) if not p.is_file()]
    if missing and prepare_missing:
        log.info("[Plan] %s not found; preparing the work directory", missing[0])
        return prepare_data(config, workers)
    if missing:
        raise DataError(f"{missing[0]} not found; run `xens prepare` (or `xens run-all`) first")
    manifests = {scheme: read_manifest(config.manifests_dir / f"scheme_{scheme}.tsv") for scheme in SCHEMES}
    split = read_split_plan(config.plans_dir / SPLIT_FILE)
    folds = read_fold_plan(config.plans_dir / FOLDS_FILE)
    if folds.k != config.split.k:
        raise ConfigError(f"fold plan has k={folds.k} but config says k={config.split.k}")
    return PipelineContext(config, manifests, split, folds, loader_workers() if workers is None else workers)


# Training

def _backbone_init(config: RunConfig, seed: int):
    if config.backbone.pretrained:
        return config.resolve(config.backbone.pretrained, "")
    if config.backbone.arch == "resnet18":
        log.warning("[Model] no pretrained archive configured; resnet18 starts from random init")
    return seed


def _fit_on_fold(ctx: PipelineContext, model: Model, scheme: str, fold: int, train_cfg: TrainConfig,
                 seed: int) -> tuple[Model, TrainingHistory]:
    manifest = ctx.manifests[scheme]
    train_ids, val_ids = ctx.folds.round(fold)
    train_m, val_m = manifest.subset(train_ids), manifest.subset(val_ids)
    aug = ctx.config.augmentation
    cfg = replace(train_cfg, seed=seed)

    labels = train_m.labels()
    if cfg.oversample:
        plan = oversample_weights(train_m.ids(), labels, manifest.num_classes)
    else:
        plan = uniform_plan(train_m.ids())
    dataset = XrayDataset(train_m, aug, train=True)
    val_set = eval_loader(XrayDataset(val_m, aug, train=False), cfg.batch_size, ctx.workers)
    weights = class_weights([train_m.class_counts[name] for name in manifest.class_names])
    log.info("[Train] %s fold %d on scheme %s: %d train / %d val, weights %s", model.model_id, fold, scheme,
             len(train_ids), len(val_ids), ", ".join(f"{w:.3f}" for w in weights.w))

    def stream(epoch: int):
        return train_loader(dataset, plan, cfg.batch_size, seed, epoch, ctx.workers)

    return fit(model, stream, val_set, cfg, weights)


def _save(ctx: PipelineContext, model: Model, history: TrainingHistory, fold: int, seed: int) -> Checkpoint:
    provenance = {**ctx.config.provenance(), "fold": fold, "model_seed": seed,
                  "best_epoch": history.best_epoch}
    history.write(ctx.history_path(model.model_id, fold), _meta(ctx.config, model_id=model.model_id, fold=fold))
    return save_checkpoint(model, ctx.checkpoint_path(model.model_id, fold), provenance)


def train_sub_model(ctx: PipelineContext, member: str, fold: int) -> Checkpoint:
    """Fine-tune binary sub-model a, b or c (all parameters) on its scheme."""
    if member not in SUB_MODEL_SCHEMES:
        raise ConfigError(f"unknown sub-model {member!r} (expected a, b or c)")
    scheme = SUB_MODEL_SCHEMES[member]
    manifest = ctx.manifests[scheme]
    seed = model_seed(ctx.config.seed, member, fold)
    backbone = ctx.config.backbone
    extractor = build_extractor(backbone.arch, _backbone_init(ctx.config, seed), backbone.feature_dim)
    model = attach_head(extractor, manifest.num_classes, seed, member, manifest.class_names)
    model, history = _fit_on_fold(ctx, model, scheme, fold, ctx.config.sub_models, seed)
    return _save(ctx, model, history, fold, seed)


def train_baseline(ctx: PipelineContext, fold: int) -> Checkpoint:
    """Model A: a single network fine-tuned on scheme D (three classes)."""
    manifest = ctx.manifests["D"]
    seed = model_seed(ctx.config.seed, "A", fold)
    backbone = ctx.config.backbone
    extractor = build_extractor(backbone.arch, _backbone_init(ctx.config, seed), backbone.feature_dim)
    model = attach_head(extractor, manifest.num_classes, seed, "A", manifest.class_names)
    model, history = _fit_on_fold(ctx, model, "D", fold, ctx.config.baseline, seed)
    return _save(ctx, model, history, fold, seed)


def train_ensemble(ctx: PipelineContext, members: Sequence[str], fold: int) -> Checkpoint:
    """Assemble frozen sub-model extractors under a new head and fit it on scheme D."""
    ensemble_id = ensemble_id_for(members)
    ordered = ENSEMBLE_MEMBERS[ensemble_id]
    extractors = []
    for member in ordered:
        path = ctx.checkpoint_path(member, fold)
        if not path.is_file():
            raise ModelError(f"sub-model checkpoint for {member} (fold {fold}) not found: {path}")
        extractors.append(strip_and_freeze(load_checkpoint(path)))
    manifest = ctx.manifests["D"]
    seed = model_seed(ctx.config.seed, ensemble_id, fold)
    model = assemble_ensemble(extractors, manifest.num_classes, seed, ensemble_id, manifest.class_names, ordered)
    model, history = _fit_on_fold(ctx, model, "D", fold, ctx.config.ensembles, seed)
    return _save(ctx, model, history, fold, seed)


def _init_sub_model_worker(threads: int) -> None:
    torch.set_num_threads(threads)


def _train_sub_model_job(ctx: PipelineContext, member: str, fold: int) -> Checkpoint:
    return train_sub_model(ctx, member, fold)


def run_pipeline(ctx: PipelineContext, fold: int) -> dict[str, Checkpoint]:
    """
    One fold of the full training order: a, b, c, then A, then every ensemble.

    Returns:
        model id -> checkpoint for the three sub-models and the five main models
    """
    checkpoints: dict[str, Checkpoint] = {}
    members = list(SUB_MODEL_SCHEMES)
    if ctx.config.parallel_sub_models:
        # spawned, not forked: a forked child inherits the parent's torch thread pool state
        threads = max(1, (os.cpu_count() or 1) // len(members))
        with ProcessPoolExecutor(max_workers=len(members), mp_context=multiprocessing.get_context("spawn"),
                                 initializer=_init_sub_model_worker, initargs=(threads,)) as pool:
            futures = {m: pool.submit(_train_sub_model_job, ctx, m, fold) for m in members}
            for m in members:
                checkpoints[m] = futures[m].result()
    else:
        for m in members:
            checkpoints[m] = train_sub_model(ctx, m, fold)

    checkpoints["A"] = train_baseline(ctx, fold)
    for ensemble_id, names in ENSEMBLE_MEMBERS.items():
        checkpoints[ensemble_id] = train_ensemble(ctx, names, fold)
    log.info("[Pipeline] fold %d done: %s", fold, ", ".join(checkpoints))
    return checkpoints


# Evaluation and report

def evaluate_checkpoint(ctx: PipelineContext, model_id: str, fold: int) -> EvalReport:
    model = load_checkpoint(ctx.checkpoint_path(model_id, fold), expected_num_classes=3)
    report = evaluate_model(model, ctx.test_manifest, ctx.config.augmentation, ctx.config.eval_batch_size,
                            ctx.workers, dataset_id="test-D",
                            provenance={**ctx.config.provenance(), "fold": fold})
    write_report(report, ctx.report_dir(fold))
    return report


def build_report(reports_by_model: dict[str, list[EvalReport]], meta: Sequence[tuple[str, str]] = (),
                 out_dir: Optional[Path] = None) -> ReportDocument:
    """Aggregate per-fold reports, average PPVs over folds and render (and optionally write) the tables."""
    missing = [m for m in MAIN_MODELS if not reports_by_model.get(m)]
    if missing:
        raise DataError(f"missing report(s) for model(s): {', '.join(missing)}")
    aggregates = {m: aggregate_folds(reports_by_model[m]) for m in MAIN_MODELS}
    ppvs = {m: mean_ppv(reports_by_model[m]) for m in MAIN_MODELS}
    document = render_report(aggregates, ppvs, MAIN_MODELS, meta)
    if out_dir is not None:
        write_report_files(document, out_dir)
    return document


def collect_reports(reports_dir: Path) -> dict[str, list[EvalReport]]:
    """Read <reports_dir>/fold*/<model>.report.yaml for every main model, fold order."""
    reports_dir = Path(reports_dir)
    fold_dirs = sorted((p for p in reports_dir.glob("fold*") if p.is_dir()),
                       key=lambda p: int(p.name[4:]) if p.name[4:].isdigit() else -1)
    if not fold_dirs:
        raise DataError(f"no fold*/ report directories under {reports_dir}")
    reports: dict[str, list[EvalReport]] = {m: [] for m in MAIN_MODELS}
    for fold_dir in fold_dirs:
        for m in MAIN_MODELS:
            path = fold_dir / f"{m}.report.yaml"
            if not path.is_file():
                raise DataError(f"missing report for model {m}: {path}")
            reports[m].append(read_report(path))
    return reports


def run_all(config: RunConfig) -> list[Path]:
    """Prepare data, train every selected fold, evaluate on the held-out set and write the report."""
    folds = config.fold_indices()
    if len(folds) < 2:
        raise ConfigError(f"run-all needs at least 2 folds to aggregate, got {folds}")
    ctx = prepare_data(config)
    reports: dict[str, list[EvalReport]] = {m: [] for m in MAIN_MODELS}
    for fold in folds:
        run_pipeline(ctx, fold)
        for m in MAIN_MODELS:
            reports[m].append(evaluate_checkpoint(ctx, m, fold))
    meta = _meta(config, folds=",".join(str(f) for f in folds))
    build_report(reports, meta, config.reports_dir)
    return [config.reports_dir / name for name in ("summary.tsv", "ttest.tsv", "report.txt")]


def compare_runs(raw_reports: Path, refined_reports: Path, out_dir: Path,
                 meta: Sequence[tuple[str, str]] = ()) -> list[Path]:
    """Aggregate the fold reports of a raw and a refined run and write the side-by-side table."""
    raw = {m: aggregate_folds(rs) for m, rs in collect_reports(raw_reports).items()}
    refined = {m: aggregate_folds(rs) for m, rs in collect_reports(refined_reports).items()}
    table = render_comparison(raw, refined, MAIN_MODELS, meta)
    covid = [row for row in table.rows if row[0] == FULL_ENSEMBLE_ID and row[1] == "covid19.f1"]
    if covid:
        log.info("[Compare] %s covid19 F1 raw %s, refined %s (%s)", FULL_ENSEMBLE_ID, *covid[0][2:])
    return write_comparison_files(table, out_dir)


# Confound reenactment

@dataclass(frozen=True)
class ConfoundResult:
    accuracy_marked: float
    accuracy_stripped: float
    n_test: int

    @property
    def drop(self) -> float:
        return self.accuracy_marked - self.accuracy_stripped


def _stripped_manifest(manifest: DatasetManifest, marked_root: Path, stripped_root: Path) -> DatasetManifest:
    entries = []
    for e in manifest.entries:
        twin = stripped_root / Path(e.path).relative_to(marked_root)
        entries.append(ManifestEntry(e.image_id, str(twin), e.label, sha256_file(twin)))
    return replace(manifest, entries=tuple(entries))


def run_confound(config: RunConfig, spec: SyntheticCorpusSpec, out: Path, fold: int = 0) -> ConfoundResult:
    """
    Train baseline A on a corpus where one class carries a marker glyph, then score it
    on the marked test images and on their marker-stripped twins.
    """
    out = Path(out).resolve()
    spec = replace(spec, confound=replace(spec.confound, enabled=True), k=config.split.k)
    marked_root, stripped_root = out / "corpus", out / "corpus_stripped"
    generate_synthetic_corpus(spec, marked_root)
    generate_synthetic_corpus(spec, stripped_root, strip_markers=True)

    paths = dataclasses.replace(
        config.paths,
        sources=[f"{marked_root / label}:{label}:synth" for label in RAW_LABELS],
        exclusions=None, work=str(out / "work"),
        collection=None, plans=None, checkpoints=None, reports=None,
    )
    run_config = replace(config, paths=paths, variant="raw")
    run_config.validate()
    ctx = prepare_data(run_config)
    train_baseline(ctx, fold)
    model = load_checkpoint(ctx.checkpoint_path("A", fold), expected_num_classes=3)

    aug, batch = run_config.augmentation, run_config.eval_batch_size
    marked = evaluate_model(model, ctx.test_manifest, aug, batch, ctx.workers, dataset_id="test-marked")
    stripped_m = _stripped_manifest(ctx.test_manifest, marked_root, stripped_root)
    stripped = evaluate_model(model, stripped_m, aug, batch, ctx.workers, dataset_id="test-stripped")
    result = ConfoundResult(marked.accuracy, stripped.accuracy, len(marked.ppv))

    rows = [["marked", f"{result.accuracy_marked:.6f}"], ["stripped", f"{result.accuracy_stripped:.6f}"],
            ["drop", f"{result.drop:.6f}"]]
    write_table(out / "confound.tsv",
                Table(["test_set", "accuracy"], rows,
                      _meta(run_config, confound_label=spec.confound.label, fold=fold, n_test=result.n_test)))
    log.info("[Confound] accuracy marked %.3f, stripped %.3f (drop %.3f)",
             result.accuracy_marked, result.accuracy_stripped, result.drop)
    return result
