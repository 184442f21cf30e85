import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from src.models import ComparisonRow, CorrectionResult, RunConfig
from src.services.evaluation_service import spillover_metrics
from src.services.report_service import ReportService, build_provenance
from src.utils.cluster import ClusterLabeling
from src.utils.cohort import CohortMatrix, RoiMask, ScoreVector, load_cohort, load_roi, load_scores, mask_cohort
from src.utils.correction import (
    REFERENCE_ROWS,
    apply_cluster_correction,
    apply_fdr,
    apply_t_threshold,
    cfwer_threshold,
    cluster_size_threshold,
    compare_cfwer_fdr,
    format_percent,
    observed_clusters,
)
from src.utils.null_cache import content_hash, load_null, read_metadata, save_null
from src.utils.nullengine import (
    CollectSpec,
    NullDistribution,
    PermutationPlan,
    default_k,
    generate_permutations,
    run_permutation_pass,
)
from src.utils.validation import (
    INFO_ICON,
    PENDING_ICON,
    SUCCESS_ICON,
    WARNING_ICON,
    InputValidationError,
    NullCacheError,
)
from src.utils.volume import Volume3D
from src.utils.voxelstats import StatMap, voxel_t_map

logger = logging.getLogger(__name__)


@dataclass
class RunOutcome:
    """Everything a `run` produced, before and after it is written out"""

    cohort: CohortMatrix
    scores: ScoreVector
    observed: StatMap
    null: NullDistribution
    null_hash: str
    results: List[CorrectionResult] = field(default_factory=list)
    comparison: List[ComparisonRow] = field(default_factory=list)
    labelings: Dict[float, ClusterLabeling] = field(default_factory=dict)
    roi: Optional[RoiMask] = None


def _p_label(p: float) -> str:
    return f"{p:.10g}"


def comparison_frame(rows: List[ComparisonRow], include_reference: bool = False) -> pd.DataFrame:
    """Comparison table; documentation-only reference rows are appended when asked"""
    rows = list(rows) + (list(REFERENCE_ROWS) if include_reference else [])
    records = []
    for row in rows:
        record = row.model_dump()
        record["effective_q_percent"] = format_percent(row.effective_q) if row.effective_q is not None else ""
        records.append(record)
    columns = list(ComparisonRow.model_fields) + ["effective_q_percent"]
    return pd.DataFrame(records, columns=columns)


def corrections_frame(results: List[CorrectionResult], roi: Optional[RoiMask] = None) -> pd.DataFrame:
    records = []
    for result in results:
        record = {
            "method": result.method,
            "v": result.parameters.get("v"),
            "p_threshold": result.parameters.get("p_threshold"),
            "q": result.parameters.get("q"),
            "alpha": result.parameters.get("alpha"),
            "critical_value": result.critical_value,
            "n_supra": result.n_supra,
            "effective_q": result.effective_q,
            "effective_q_percent": format_percent(result.effective_q) if result.effective_q is not None else "",
        }
        if roi is not None:
            record.update(spillover_metrics(result, roi))
        records.append(record)
    return pd.DataFrame(records)


def null_summary_frame(null: NullDistribution) -> pd.DataFrame:
    """One row per permutation: largest t and largest cluster at each p-threshold"""
    frame = pd.DataFrame({"perm_index": np.arange(null.n_perms), "max_t": null.kth_values(1)})
    for p in null.p_thresholds:
        frame[f"max_cluster_p{_p_label(p)}"] = null.max_sizes(p)
    return frame


class PipelineService:
    """Cohort -> t map -> permutation null (or cache) -> corrections -> outputs"""

    def __init__(self, config: RunConfig):
        self.config = config

    def load_inputs(self):
        config = self.config
        if not config.manifest or not config.scores:
            raise InputValidationError("run needs --manifest and --scores")
        cohort = load_cohort(config.manifest)
        scores = load_scores(config.scores, cohort.subject_ids, invert=config.invert_scores)
        roi = load_roi(config.roi, cohort.grid) if config.roi else None
        masked = mask_cohort(cohort, config.min_lesioned, config.min_intact)
        return masked, scores, roi

    def plan(self, cohort: CohortMatrix) -> PermutationPlan:
        return generate_permutations(
            cohort.n_subjects, self.config.n_perms, self.config.seed, exclude_identity=self.config.exclude_identity
        )

    def collect_spec(self, cohort: CohortMatrix) -> CollectSpec:
        config = self.config
        return CollectSpec(
            k=default_k(config.v_list, cohort.n_voxels),
            p_thresholds=tuple(config.p_threshold_list),
            tails=config.tails,
            connectivity=config.connectivity,
        )

    def null_distribution(self, cohort: CohortMatrix, scores: ScoreVector):
        """Load the null from the cache when its hash matches, otherwise compute (and cache) it"""
        config = self.config
        plan = self.plan(cohort)
        collect = self.collect_spec(cohort)
        null_hash = content_hash(cohort, scores, collect, plan, config.t_clamp)
        cache = Path(config.null_cache) if config.null_cache else None

        if cache is not None and cache.exists():
            try:
                null = load_null(cache, expected_hash=null_hash)
                print(f"{SUCCESS_ICON} Loaded cached null distribution ({null.n_perms} permutations)")
                return null, null_hash
            except NullCacheError as e:
                cached = None
                try:
                    cached = read_metadata(cache.read_bytes(), cache).get("content_hash")
                except NullCacheError:
                    pass
                logger.warning(f"{WARNING_ICON} Ignoring null cache ({e.message}); cached hash {cached}")

        print(f"{PENDING_ICON} Running {plan.n_perms} permutations (K={collect.k})")
        null = run_permutation_pass(
            cohort, scores, plan, collect, workers=config.workers, t_clamp=config.t_clamp,
            show_progress=not config.quiet,
        )
        if cache is not None:
            save_null(null, cache, null_hash)
        return null, null_hash

    def corrections(self, observed: StatMap, null: NullDistribution, provenance: Dict) -> List[CorrectionResult]:
        config = self.config
        method = config.correction
        results = []
        for variant in ("all", "max"):
            if method not in (f"cluster-{variant}", "all"):
                continue
            for p in config.p_threshold_list:
                size_threshold = cluster_size_threshold(null, p, variant, config.alpha)
                results.append(apply_cluster_correction(
                    observed, p, size_threshold, config.connectivity, variant=variant, alpha=config.alpha,
                    provenance=provenance,
                ))
        if method in ("cfwer", "all"):
            for v in config.v_list:
                if v > null.k:
                    logger.warning(f"{WARNING_ICON} v={v} exceeds the {null.k} in-mask voxels; skipped")
                    continue
                t_crit = cfwer_threshold(null, v, config.alpha)
                results.append(apply_t_threshold(
                    observed, t_crit, method="cfwer", parameters={"v": v, "alpha": config.alpha},
                    provenance=provenance,
                ))
        if method in ("fdr", "all"):
            results.append(apply_fdr(observed, config.fdr_q, config.fdr_dependency, provenance=provenance))
        return results

    def execute(self) -> RunOutcome:
        config = self.config
        print(f"\n{INFO_ICON} LESION-SYMPTOM MAPPING RUN")
        print(f"{'-'*60}")
        print(f"Manifest: {config.manifest}")
        print(f"Scores: {config.scores}")
        print(f"Correction: {config.correction}, alpha={config.alpha}, permutations={config.n_perms}")
        print(f"{'-'*60}")

        cohort, scores, roi = self.load_inputs()
        observed = voxel_t_map(cohort, scores, config.tails, t_clamp=config.t_clamp)
        null, null_hash = self.null_distribution(cohort, scores)
        provenance = build_provenance(config, null_hash=null_hash)

        outcome = RunOutcome(
            cohort=cohort, scores=scores, observed=observed, null=null, null_hash=null_hash, roi=roi,
            results=self.corrections(observed, null, provenance),
        )
        if config.correction in ("cfwer", "fdr", "all"):
            outcome.comparison = compare_cfwer_fdr(observed, null, config.correction_config())
        if config.correction in ("cluster-all", "cluster-max", "all"):
            outcome.labelings = {p: observed_clusters(observed, p, config.connectivity) for p in config.p_threshold_list}
        return outcome

    def write(self, outcome: RunOutcome) -> Path:
        config = self.config
        out_dir = Path(config.out)
        report = ReportService(out_dir, build_provenance(config, null_hash=outcome.null_hash))

        tables = {
            "corrections": corrections_frame(outcome.results, outcome.roi),
            "null_summary": null_summary_frame(outcome.null),
        }
        if outcome.comparison:
            tables["comparison"] = comparison_frame(outcome.comparison, config.include_reference_rows)
        report.write_tables(tables)
        report.write_plots(tables)

        grid = outcome.cohort.grid
        report.write_volume("tmap", outcome.observed.to_volume())
        report.write_volume("mask", outcome.cohort.mask_volume())
        for result in outcome.results:
            values = np.zeros(grid.n_voxels, dtype=np.uint8)
            values[np.asarray(result.supra_indices, dtype=np.int64)] = 1
            name = self._result_name(result)
            report.write_volume(f"supra_{name}", Volume3D.from_linear(grid, values, datatype="binary"))
        for p, labeling in outcome.labelings.items():
            report.write_volume(f"clusters_p{_p_label(p)}", labeling.to_volume(grid))

        report.write_summary(tables)
        report.write_manifest({"null_hash": outcome.null_hash})
        print(f"\n{SUCCESS_ICON} RUN COMPLETE")
        print(f"{'-'*60}")
        for result in outcome.results:
            print(f"{self._result_name(result)}: critical value {result.critical_value}, {result.n_supra} voxels")
        print(f"Outputs: {out_dir}")
        print(f"{'-'*60}")
        return out_dir

    @staticmethod
    def _result_name(result: CorrectionResult) -> str:
        if result.method == "cfwer":
            return f"cfwer_v{result.parameters['v']}"
        if result.method.startswith("cluster"):
            return f"{result.method.replace('-', '_')}_p{_p_label(result.parameters['p_threshold'])}"
        return f"fdr_q{_p_label(result.parameters['q'])}"

    def run(self) -> RunOutcome:
        outcome = self.execute()
        self.write(outcome)
        return outcome
