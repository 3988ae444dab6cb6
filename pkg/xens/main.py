"""
Main entry point for xens.

Exit codes: 0 success, 1 runtime failure (one `xens: error:` line on stderr), 2 usage error.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import (
    LOG_LEVEL,
    SUB_MODEL_SCHEMES,
    RunConfig,
    loader_workers,
    load_corpus_spec,
    load_run_config,
)
from .checkpoint import load_checkpoint
from .curation import (
    SourceSpec,
    apply_exclusions,
    compose_dataset,
    deduplicate,
    exclusion_digest,
    ingest_sources,
    load_exclusion_list,
    read_collection,
    read_manifest,
    write_collection,
    write_manifest,
)
from .errors import ConfigError, XensError
from .evaluation import evaluate_model, read_report, write_report
from .pipeline import (
    FOLDS_FILE,
    SPLIT_FILE,
    build_report,
    collect_reports,
    compare_runs,
    load_context,
    prepare_data,
    prepared_files,
    run_all,
    run_confound,
    train_baseline,
    train_ensemble,
    train_sub_model,
)
from .sampling import holdout_split, make_folds, write_fold_plan, write_split_plan
from .stats import TTestResult, pooled_t_test, ttest_from_summary
from .synth import generate_synthetic_corpus, probe_separability
from .utils import ensure_output_dir, setup_logging

log = logging.getLogger(__name__)

SCHEME_TO_MEMBER = {scheme: member for member, scheme in SUB_MODEL_SCHEMES.items()}


def _global_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, help="Run configuration (YAML)")
    parent.add_argument("--seed", type=int, help="Override the run seed")
    parent.add_argument("--out", type=Path, help="Output path for the command")
    parent.add_argument("--variant", choices=("raw", "refined"), help="Dataset variant")
    parent.add_argument("--log-level", default=LOG_LEVEL, help="Logging level (default: XENS_LOG_LEVEL or INFO)")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _global_flags()
    parser = argparse.ArgumentParser(
        prog="xens",
        description="Ensemble transfer learning for 3-class chest X-ray screening",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("ingest", parents=[parent], help="Ingest labelled folders and remove duplicates")
    p.add_argument("--source", action="append", required=True, metavar="DIR:LABEL:SOURCE_ID",
                   help="Labelled source folder (repeatable)")
    p.add_argument("--workers", type=int, default=None, help="Decode/hash threads (default: XENS_WORKERS)")

    p = sub.add_parser("compose", parents=[parent], help="Compose a scheme manifest from a collection")
    p.add_argument("--collection", type=Path, required=True)
    p.add_argument("--scheme", choices=("A", "B", "C", "D"), required=True)
    p.add_argument("--exclusions", default="none", help="Exclusion list file, or 'none' for the raw variant")

    p = sub.add_parser("split", parents=[parent], help="Stratified holdout split and k folds")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ratio", type=float, default=0.9)
    p.add_argument("--folds", type=int, default=5)

    p = sub.add_parser("train-sub", parents=[parent], help="Fine-tune sub-model a, b or c")
    p.add_argument("--scheme", choices=tuple(SCHEME_TO_MEMBER), required=True)
    p.add_argument("--fold", type=int, required=True)

    p = sub.add_parser("train-baseline", parents=[parent], help="Fine-tune the single-network baseline A")
    p.add_argument("--fold", type=int, required=True)

    p = sub.add_parser("train-ensemble", parents=[parent], help="Fit an ensemble head over frozen sub-models")
    p.add_argument("--members", required=True, help="Comma-separated sub-models, e.g. a,b,c")
    p.add_argument("--fold", type=int, required=True)

    p = sub.add_parser("evaluate", parents=[parent], help="Score a checkpoint on a manifest")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)

    p = sub.add_parser("ttest", parents=[parent], help="Pooled one-sided t-test on PPVs")
    p.add_argument("--candidate", type=Path, help="Candidate report (.report.yaml or its directory)")
    p.add_argument("--baseline", type=Path, help="Baseline report")
    p.add_argument("--summary-candidate", metavar="MEAN,STD,N", help="Candidate summary statistics")
    p.add_argument("--summary-baseline", metavar="MEAN,STD,N", help="Baseline summary statistics")

    p = sub.add_parser("report", parents=[parent], help="Render the cross-validated summary tables")
    p.add_argument("--reports", type=Path, required=True, help="Directory holding fold*/<model>.report.yaml")

    p = sub.add_parser("synth", parents=[parent], help="Generate the synthetic corpus")
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--no-probe", action="store_true", help="Skip the separability self-test")

    sub.add_parser("prepare", parents=[parent], help="Curate and write manifests and plans")

    sub.add_parser("run-all", parents=[parent], help="Curate, train every fold, evaluate and report")

    p = sub.add_parser("compare", parents=[parent], help="Raw vs refined side-by-side table")
    p.add_argument("--raw", type=Path, required=True, help="Reports directory of the raw run")
    p.add_argument("--refined", type=Path, required=True, help="Reports directory of the refined run")

    p = sub.add_parser("confound", parents=[parent], help="Marker-confound reenactment on a synthetic corpus")
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--fold", type=int, default=0)
    return parser


def _require(args: argparse.Namespace, parser: argparse.ArgumentParser, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        parser.error(f"{args.command}: missing required option(s) {', '.join(missing)}")


def _run_config(args: argparse.Namespace) -> RunConfig:
    """Load --config and apply the global overrides."""
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.variant is not None:
        cfg = replace(cfg, variant=args.variant)
    if args.out is not None:
        paths = replace(cfg.paths, work=str(args.out.resolve()), collection=None, plans=None,
                        checkpoints=None, reports=None)
        cfg = replace(cfg, paths=paths)
    cfg.validate()
    return cfg


def _parse_summary(text: str, flag: str) -> tuple[float, float, int]:
    try:
        mean, std, n = text.split(",")
        return float(mean), float(std), int(n)
    except ValueError:
        raise ConfigError(f"{flag} must look like MEAN,STD,N, got {text!r}") from None


def _format_ttest(result: TTestResult) -> str:
    return (f"t={result.t:.6f} df={result.df} p={result.p:.6g} "
            f"mean_1={result.mean_1:.6f} mean_2={result.mean_2:.6f} n_1={result.n_1} n_2={result.n_2}")


def _cmd_ingest(args) -> list[Path]:
    workers = loader_workers() if args.workers is None else args.workers
    collection = ingest_sources([SourceSpec.parse(s) for s in args.source], workers=workers)
    collection, report = deduplicate(collection)
    write_collection(args.out, collection, [report])
    return [args.out]


def _cmd_compose(args) -> list[Path]:
    collection = read_collection(args.collection)
    digest, reports = "none", []
    if args.exclusions != "none":
        entries = load_exclusion_list(Path(args.exclusions))
        collection, report = apply_exclusions(collection, entries)
        digest, reports = exclusion_digest(entries), [report]
    elif args.variant == "refined":
        raise ConfigError("variant 'refined' requires --exclusions")
    manifest = compose_dataset(collection, args.scheme, digest)
    meta = [("stale", i) for r in reports for i in r.stale_ids]
    write_manifest(args.out, manifest, meta)
    return [args.out]


def _cmd_split(args) -> list[Path]:
    manifest = read_manifest(args.manifest)
    seed = args.seed if args.seed is not None else 0
    split = holdout_split(manifest, args.ratio, seed)
    train = manifest.subset(split.train_ids)
    folds = make_folds(train.ids(), train.labels(), args.folds, seed)
    out = ensure_output_dir(args.out)
    meta = [("manifest_scheme", manifest.scheme), ("collection_digest", manifest.provenance.collection_digest)]
    write_split_plan(out / SPLIT_FILE, split, meta)
    write_fold_plan(out / FOLDS_FILE, folds, meta)
    return [out / SPLIT_FILE, out / FOLDS_FILE]


def _cmd_prepare(args) -> list[Path]:
    config = _run_config(args)
    prepare_data(config)
    return prepared_files(config)


def _cmd_train(args) -> list[Path]:
    ctx = load_context(_run_config(args), prepare_missing=True)
    if args.command == "train-sub":
        ckpt = train_sub_model(ctx, SCHEME_TO_MEMBER[args.scheme], args.fold)
    elif args.command == "train-baseline":
        ckpt = train_baseline(ctx, args.fold)
    else:
        ckpt = train_ensemble(ctx, args.members.split(","), args.fold)
    return [ckpt.path]


def _cmd_evaluate(args) -> list[Path]:
    model = load_checkpoint(args.model)
    manifest = read_manifest(args.manifest)
    cfg = _run_config(args) if args.config else None
    aug = cfg.augmentation if cfg else RunConfig().augmentation
    batch = cfg.eval_batch_size if cfg else RunConfig().eval_batch_size
    provenance = cfg.provenance() if cfg else {}
    report = evaluate_model(model, manifest, aug, batch, loader_workers(), dataset_id=args.manifest.stem,
                            provenance=provenance)
    return [write_report(report, ensure_output_dir(args.out))]


def _cmd_ttest(args, parser) -> list[str]:
    if args.candidate is not None or args.baseline is not None:
        _require(args, parser, "candidate", "baseline")
        result = pooled_t_test(read_report(args.candidate).ppv, read_report(args.baseline).ppv)
    else:
        _require(args, parser, "summary_candidate", "summary_baseline")
        m1, s1, n1 = _parse_summary(args.summary_candidate, "--summary-candidate")
        m2, s2, n2 = _parse_summary(args.summary_baseline, "--summary-baseline")
        result = ttest_from_summary(m1, s1, n1, m2, s2, n2)
    return [_format_ttest(result)]


def _cmd_report(args) -> list[Path]:
    meta = _run_config(args).provenance().items() if args.config else ()
    out = ensure_output_dir(args.out)
    build_report(collect_reports(args.reports), [(k, str(v)) for k, v in meta], out)
    return [out / "summary.tsv", out / "ttest.tsv", out / "report.txt"]


def _cmd_compare(args) -> list[Path]:
    meta = [(k, str(v)) for k, v in _run_config(args).provenance().items()] if args.config else []
    meta += [("raw_reports", str(args.raw)), ("refined_reports", str(args.refined))]
    return compare_runs(args.raw, args.refined, ensure_output_dir(args.out), meta)


def _cmd_synth(args) -> list[Path]:
    spec = load_corpus_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    truth = generate_synthetic_corpus(spec, args.out)
    if not args.no_probe:
        accuracy = probe_separability(args.out, truth)
        if accuracy <= 0.9:
            log.warning("[Synth] probe accuracy %.3f <= 0.9; class signatures may be too weak", accuracy)
    return [truth]


def _cmd_confound(args) -> list[str]:
    result = run_confound(_run_config(args), load_corpus_spec(args.spec), args.out, args.fold)
    return [f"marked={result.accuracy_marked:.6f} stripped={result.accuracy_stripped:.6f} drop={result.drop:.6f}"]


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and return the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(args.log_level)

    needs_config = ("prepare", "train-sub", "train-baseline", "train-ensemble", "run-all", "confound")
    needs_out = ("ingest", "compose", "split", "evaluate", "report", "compare", "synth", "confound")
    try:
        if args.command in needs_config:
            _require(args, parser, "config")
        if args.command in needs_out:
            _require(args, parser, "out")
    except SystemExit as e:
        return int(e.code or 2)

    try:
        if args.command == "ingest":
            results = _cmd_ingest(args)
        elif args.command == "compose":
            results = _cmd_compose(args)
        elif args.command == "split":
            results = _cmd_split(args)
        elif args.command == "prepare":
            results = _cmd_prepare(args)
        elif args.command in ("train-sub", "train-baseline", "train-ensemble"):
            results = _cmd_train(args)
        elif args.command == "evaluate":
            results = _cmd_evaluate(args)
        elif args.command == "ttest":
            results = _cmd_ttest(args, parser)
        elif args.command == "report":
            results = _cmd_report(args)
        elif args.command == "synth":
            results = _cmd_synth(args)
        elif args.command == "run-all":
            results = run_all(_run_config(args))
        elif args.command == "compare":
            results = _cmd_compare(args)
        else:
            results = _cmd_confound(args)
    except (XensError, OSError, ValueError) as e:
        print(f"xens: error: {type(e).__name__}: {e}", file=sys.stderr)
        log.debug("[Main] %s failed", args.command, exc_info=True)
        return 1
    except SystemExit as e:
        return int(e.code or 2)

    for item in results:
        print(item)
    return 0


def main():
    """Main entry point."""
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
