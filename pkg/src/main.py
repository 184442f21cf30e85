import os
import sys
import json
import logging
import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional

# Add the project root to the Python path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from pydantic import ValidationError

from src.config import env_defaults, log_level
from src.models import RunConfig
from src.services.evaluation_service import EvaluationService
from src.services.pipeline_service import PipelineService
from src.services.report_service import ReportService, build_provenance, write_error_json
from src.utils.synthetic import build_roi_masks, generate_synthetic_cohort, synthetic_scores, write_synthetic_dataset
from src.utils.validation import (
    ERROR_ICON,
    EXIT_OK,
    INFO_ICON,
    PENDING_ICON,
    SUCCESS_ICON,
    AnalysisError,
    InputValidationError,
    VlsmError,
    read_json_file,
)
from src.utils.volume import write_nifti

logger = logging.getLogger(__name__)

# flag dest -> RunConfig field
FLAG_FIELDS = {
    "manifest": "manifest",
    "scores": "scores",
    "roi": "roi",
    "null_cache": "null_cache",
    "invert_scores": "invert_scores",
    "reference_rows": "include_reference_rows",
    "perms": "n_perms",
    "seed": "seed",
    "alpha": "alpha",
    "v": "v_list",
    "p_thresholds": "p_threshold_list",
    "tails": "tails",
    "connectivity": "connectivity",
    "correction": "correction",
    "q": "fdr_q",
    "fdr_dependency": "fdr_dependency",
    "t_clamp": "t_clamp",
    "min_lesioned": "min_lesioned",
    "min_intact": "min_intact",
    "exclude_identity": "exclude_identity",
    "workers": "workers",
    "out": "out",
    "quiet": "quiet",
    "experiment": "experiment",
    "fractions": "fractions",
    "repeats": "n_repeats",
    "holdout_perms": "holdout_perms",
}

# flag dest -> SyntheticSpec field
SYNTHETIC_FIELDS = {
    "subjects": "n_subjects",
    "dims": "dims",
    "noise_sd": "noise_sd",
    "lesion_mu": "lesion_log_mu",
    "lesion_sigma": "lesion_log_sigma",
    "gradient_decay": "gradient_decay",
    "envelope": "envelope",
    "sim_seed": "seed",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlsm",
        description="Voxel-based lesion-symptom mapping with permutation-based multiple-comparison corrections",
    )
    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    common = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    common.add_argument("--config", default=None, help="JSON config file (flags override its values)")
    common.add_argument("--dump-config", default=None, help="Write the resolved config to this path and exit")
    common.add_argument("--out", default=S, help="Output directory")
    common.add_argument("--seed", type=int, default=S, help="Permutation seed")
    common.add_argument("--perms", type=int, default=S, help="Number of permutations (default 1000)")
    common.add_argument("--workers", type=int, default=S, help="Parallel workers; -1 uses all cores")
    common.add_argument("--alpha", type=float, default=S, help="Family-wise level (default 0.05)")
    common.add_argument("--v", type=int, nargs="+", default=S, help="Critical voxel ranks for continuous FWER")
    common.add_argument("--p-thresholds", type=float, nargs="+", default=S,
                        help="Voxel-wise cluster-forming p-thresholds, most permissive first")
    common.add_argument("--tails", choices=["one-tailed", "two-tailed"], default=S)
    common.add_argument("--connectivity", type=int, choices=[6, 18, 26], default=S)
    common.add_argument("--correction", choices=["cluster-all", "cluster-max", "cfwer", "fdr", "all"], default=S)
    common.add_argument("--q", type=float, default=S, help="FDR level")
    common.add_argument("--fdr-dependency", choices=["independent", "arbitrary"], default=S)
    common.add_argument("--t-clamp", type=float, default=S,
                        help="Clamp zero-variance voxels with a mean difference to +/- this t")
    common.add_argument("--min-lesioned", type=int, default=S, help="Mask cutoff: lesioned subjects per voxel")
    common.add_argument("--min-intact", type=int, default=S, help="Mask cutoff: intact subjects per voxel")
    common.add_argument("--exclude-identity", action="store_true", default=S,
                        help="Re-draw identity orders in the permutation plan")
    common.add_argument("--quiet", action="store_true", default=S, help="Only warnings and errors")

    synthetic = argparse.ArgumentParser(add_help=False)
    synthetic.add_argument("--subjects", type=int, default=S, help="Synthetic cohort size")
    synthetic.add_argument("--dims", type=int, nargs=3, default=S, help="Synthetic grid dims")
    synthetic.add_argument("--noise-sd", type=float, default=S, help="Gaussian noise added to scores")
    synthetic.add_argument("--lesion-mu", type=float, default=S, help="Mean of log lesion size")
    synthetic.add_argument("--lesion-sigma", type=float, default=S, help="SD of log lesion size")
    synthetic.add_argument("--gradient-decay", type=float, default=S, help="Seed-placement decay length (voxels)")
    synthetic.add_argument("--envelope", choices=["left-hemisphere", "grid"], default=S)
    synthetic.add_argument("--sim-seed", type=int, default=S, help="Synthetic cohort seed")

    subparsers.add_parser("simulate", parents=[common, synthetic], help="Write a synthetic cohort to disk")

    run_parser = subparsers.add_parser("run", parents=[common], help="Run the analysis on a cohort")
    run_parser.add_argument("--manifest", default=S, help="Cohort manifest JSON")
    run_parser.add_argument("--scores", default=S, help="Scores CSV (subject_id,score)")
    run_parser.add_argument("--roi", default=S, help="Optional ground-truth ROI (NIfTI or JSON index list)")
    run_parser.add_argument("--null-cache", default=S, help="Null distribution cache file")
    run_parser.add_argument("--invert-scores", action="store_true", default=S,
                            help="Negate scores where higher means better")
    run_parser.add_argument("--reference-rows", action="store_true", default=S,
                            help="Append documentation-only reference rows to the comparison table")

    evaluate_parser = subparsers.add_parser("evaluate", parents=[common, synthetic],
                                            help="Run the synthetic evaluation experiments")
    evaluate_parser.add_argument("--experiment", choices=["cluster-fpr", "spillover", "method-comparison", "all"],
                                 default=S)
    evaluate_parser.add_argument("--fractions", type=float, nargs="+", default=S, help="Sub-sample fractions")
    evaluate_parser.add_argument("--repeats", type=int, default=S, help="Sub-samples per fraction")
    evaluate_parser.add_argument("--holdout-perms", type=int, default=S, help="Held-out permutations for FPR")

    subparsers.add_parser("report", parents=[common], help="Re-render plots and summary from a report directory")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge environment, --config file and flags (flags win) into a RunConfig"""
    values: Dict[str, Any] = dict(env_defaults())
    if args.config:
        loaded = read_json_file(args.config)
        if not isinstance(loaded, dict):
            raise InputValidationError("Config file must hold a JSON object", path=args.config)
        values.update(loaded)

    given = vars(args)
    for flag, name in FLAG_FIELDS.items():
        if flag in given:
            values[name] = given[flag]
    synthetic = dict(values.get("synthetic") or {})
    for flag, name in SYNTHETIC_FIELDS.items():
        if flag in given:
            synthetic[name] = given[flag]
    if synthetic:
        values["synthetic"] = synthetic
    values["subcommand"] = args.command

    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        errors = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        raise InputValidationError(f"Invalid configuration: {errors}", path=args.config)


def cmd_simulate(config: RunConfig) -> int:
    spec = config.synthetic
    out_dir = Path(config.out)
    print(f"\n{INFO_ICON} SIMULATING SYNTHETIC COHORT")
    print(f"{'-'*60}")
    print(f"Subjects: {spec.n_subjects}, grid: {spec.dims}, seed: {spec.seed}")
    print(f"Regions: {', '.join(spec.rois)} (primary: {spec.primary_roi})")
    print(f"{'-'*60}")

    cohort, _ = generate_synthetic_cohort(spec)
    rois = build_roi_masks(spec)
    scores = synthetic_scores(cohort, spec, rois)
    manifest = write_synthetic_dataset(cohort, scores, rois, out_dir)
    write_nifti(cohort.overlap_volume(), out_dir / "overlap.nii.gz")
    (out_dir / "synthetic_spec.json").write_text(spec.model_dump_json(indent=2) + "\n", encoding="utf-8")

    print(f"\n{SUCCESS_ICON} SYNTHETIC COHORT WRITTEN")
    print(f"Manifest: {manifest}")
    for name in scores:
        print(f"Scores ({name}): {out_dir / f'scores_{name}.csv'}")
    print(f"{'-'*60}")
    return EXIT_OK


def cmd_run(config: RunConfig) -> int:
    PipelineService(config).run()
    return EXIT_OK


def cmd_evaluate(config: RunConfig) -> int:
    print(f"\n{INFO_ICON} EVALUATION: {config.experiment}")
    print(f"{'-'*60}")
    print(f"Synthetic cohort: N={config.synthetic.n_subjects}, grid {config.synthetic.dims}")
    print(f"Permutations: {config.n_perms}, alpha={config.alpha}, workers={config.workers}")
    print(f"{'-'*60}")

    print(f"{PENDING_ICON} Running experiments")
    report = EvaluationService(config).run()
    writer = ReportService(config.out, build_provenance(config))
    writer.write_tables(report.tables)
    writer.write_plots(report.tables)
    writer.write_summary(report.tables)
    writer.write_manifest({"sections": sorted(report.tables)})

    print(f"\n{SUCCESS_ICON} EVALUATION COMPLETE")
    print(f"Report: {config.out} ({len(report.tables)} tables)")
    print(f"{'-'*60}")
    return EXIT_OK


def cmd_report(config: RunConfig) -> int:
    print(f"\n{INFO_ICON} RE-RENDERING REPORT: {config.out}")
    print(f"{'-'*60}")
    writer = ReportService(config.out, {})
    tables = writer.load_tables()
    writer.write_plots(tables)
    writer.write_summary(tables)
    writer.write_manifest({"sections": sorted(tables)})
    print(f"{SUCCESS_ICON} Rendered {len(writer.files)} files from {len(tables)} tables")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "run": cmd_run,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def _fail(error: VlsmError, out_dir: Optional[str]) -> int:
    print(f"\n{ERROR_ICON} {type(error).__name__.upper()}")
    print(f"{'-'*60}")
    print(f"Error details: {error.message}")
    if error.path:
        print(f"File: {error.path}")
    print(f"{'-'*60}")
    sys.stderr.write(json.dumps(error.to_dict()) + "\n")
    write_error_json(error, out_dir)
    return error.exit_code


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 2

    quiet = getattr(args, "quiet", False)
    logging.basicConfig(
        level=logging.WARNING if quiet else log_level(),
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )

    out_dir = getattr(args, "out", None)
    try:
        config = resolve_config(args)
        out_dir = config.out
        if args.dump_config:
            Path(args.dump_config).parent.mkdir(parents=True, exist_ok=True)
            Path(args.dump_config).write_text(config.model_dump_json(indent=2) + "\n", encoding="utf-8")
            print(f"{SUCCESS_ICON} Config written to {args.dump_config}")
            return EXIT_OK
        return COMMANDS[args.command](config)
    except VlsmError as e:
        return _fail(e, out_dir)
    except Exception as e:
        logger.exception("Unexpected failure")
        return _fail(AnalysisError(f"{type(e).__name__}: {e}"), out_dir)


if __name__ == "__main__":
    sys.exit(main())
