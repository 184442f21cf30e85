import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed, effective_n_jobs
from scipy import stats

from src.models import ComparisonRow, CorrectionConfig, CorrectionResult, RunConfig, SyntheticSpec
from src.utils.cohort import CohortMatrix, RoiMask, ScoreVector, mask_cohort, subsample
from src.utils.correction import (
    apply_cluster_correction,
    apply_t_threshold,
    cfwer_threshold,
    cluster_size_threshold,
    compare_cfwer_fdr,
    format_percent,
)
from src.utils.nullengine import (
    CollectSpec,
    NullDistribution,
    default_k,
    derive_seed,
    generate_permutations,
    run_permutation_pass,
)
from src.utils.synthetic import build_roi_masks, generate_synthetic_cohort, synthetic_scores
from src.utils.validation import CohortError, DegenerateScoresError, EmptyMaskError, INFO_ICON, WARNING_ICON
from src.utils.voxelstats import voxel_t_map

logger = logging.getLogger(__name__)

# Clamp for zero-variance voxels in noiseless simulations
SIMULATION_T_CLAMP = 100.0

HOLDOUT_STREAM = 1
SUBSAMPLE_STREAM = 2
PLAN_STREAM = 3


@dataclass
class EvalReport:
    """Tables per experiment section plus the configuration they came from"""

    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    provenance: Dict[str, Any] = field(default_factory=dict)

    def add(self, section: Dict[str, pd.DataFrame]) -> None:
        self.tables.update(section)


def false_positive_rate(null: NullDistribution, p_threshold: float, size_threshold: int,
                        holdout: Optional[NullDistribution] = None) -> float:
    """Share of permutations with at least one cluster strictly larger than size_threshold

    Evaluated on `holdout` when given, otherwise in-sample on `null`.
    """
    evaluated = holdout if holdout is not None else null
    maxima = evaluated.max_sizes(p_threshold)
    return float(np.count_nonzero(maxima > size_threshold)) / evaluated.n_perms


def spillover_metrics(result: CorrectionResult, roi: RoiMask) -> Dict[str, float]:
    """Extent and overlap of a corrected supra-threshold set against the true region"""
    supra = np.asarray(result.supra_indices, dtype=np.int64)
    n_in = int(np.isin(supra, roi.indices).sum())
    n_supra = int(supra.size)
    return {
        "n_supra": n_supra,
        "n_in_roi": n_in,
        "n_out_roi": n_supra - n_in,
        "extent_ratio": n_supra / roi.size,
        "dice": 2.0 * n_in / (n_supra + roi.size),
        "out_fraction": (n_supra - n_in) / n_supra if n_supra else 0.0,
    }


def binomial_interval(alpha: float, n: int, level: float = 0.99) -> Tuple[float, float]:
    """Central interval of the observed rate k/n when k ~ Binomial(n, alpha)"""
    tail = (1.0 - level) / 2.0
    low = stats.binom.ppf(tail, n, alpha)
    high = stats.binom.isf(tail, n, alpha)
    return float(low) / n, float(high) / n


def mean_interval(values: Sequence[float], level: float = 0.95) -> Tuple[float, float, float]:
    """Mean and t-distribution confidence interval; NaN bounds below two values"""
    values = np.asarray([v for v in values if v is not None and np.isfinite(v)], dtype=np.float64)
    if values.size == 0:
        return math.nan, math.nan, math.nan
    mean = float(values.mean())
    if values.size < 2:
        return mean, math.nan, math.nan
    half = stats.t.ppf(0.5 + level / 2.0, values.size - 1) * values.std(ddof=1) / math.sqrt(values.size)
    return mean, mean - half, mean + half


@dataclass(frozen=True)
class StatSettings:
    """Statistical settings shared by every experiment"""

    tails: str = "one-tailed"
    connectivity: int = 26
    min_lesioned: Optional[int] = None
    min_intact: Optional[int] = None
    t_clamp: float = SIMULATION_T_CLAMP
    exclude_identity: bool = False
    workers: int = 1

    @classmethod
    def from_config(cls, config: RunConfig) -> "StatSettings":
        return cls(
            tails=config.tails,
            connectivity=config.connectivity,
            min_lesioned=config.min_lesioned,
            min_intact=config.min_intact,
            t_clamp=config.t_clamp or SIMULATION_T_CLAMP,
            exclude_identity=config.exclude_identity,
            workers=config.workers,
        )


def _prepare(spec: SyntheticSpec) -> Tuple[CohortMatrix, Dict[str, RoiMask], Dict[str, ScoreVector]]:
    cohort, _ = generate_synthetic_cohort(spec)
    rois = build_roi_masks(spec)
    return cohort, rois, synthetic_scores(cohort, spec, rois)


def _null(cohort: CohortMatrix, scores: ScoreVector, n_perms: int, seed: int, collect: CollectSpec,
          settings: StatSettings, exclude_identity: Optional[bool] = None, workers: Optional[int] = None,
          show_progress: bool = True) -> NullDistribution:
    plan = generate_permutations(
        cohort.n_subjects, n_perms, seed,
        exclude_identity=settings.exclude_identity if exclude_identity is None else exclude_identity,
    )
    return run_permutation_pass(
        cohort, scores, plan, collect,
        workers=settings.workers if workers is None else workers,
        t_clamp=settings.t_clamp,
        show_progress=show_progress,
    )


def run_cluster_fpr_experiment(spec: SyntheticSpec, n_perms: int, p_threshold_list: Sequence[float],
                               alpha: float = 0.05, holdout_perms: Optional[int] = None, seed: int = 20180827,
                               settings: StatSettings = StatSettings()) -> Dict[str, pd.DataFrame]:
    """Family-wise false-positive rate of the all-clusters and maximal-cluster variants

    The defining permutations set each size threshold; a disjoint held-out
    set (identity excluded, so it is purely null) measures how the
    threshold generalizes. In-sample rates are reported alongside.

    Returns:
        {"cluster_fpr": one row per region x p-threshold x variant}
    """
    holdout_perms = holdout_perms or n_perms
    cohort, rois, scores = _prepare(spec)
    masked = mask_cohort(cohort, settings.min_lesioned, settings.min_intact)
    collect = CollectSpec(k=1, p_thresholds=tuple(p_threshold_list), tails=settings.tails,
                          connectivity=settings.connectivity)
    low, high = binomial_interval(alpha, holdout_perms)

    rows = []
    for name in rois:
        logger.info(f"{INFO_ICON} Cluster FPR: region '{name}', {n_perms} defining + {holdout_perms} held-out")
        defining = _null(masked, scores[name], n_perms, seed, collect, settings)
        held_out = _null(masked, scores[name], holdout_perms, derive_seed(seed, HOLDOUT_STREAM), collect,
                         settings, exclude_identity=True)
        for p in collect.p_thresholds:
            for variant in ("all", "max"):
                threshold = cluster_size_threshold(defining, p, variant, alpha)
                rows.append({
                    "roi": name,
                    "p_threshold": p,
                    "variant": variant,
                    "size_threshold": threshold,
                    "fpr_in_sample": false_positive_rate(defining, p, threshold),
                    "fpr_held_out": false_positive_rate(defining, p, threshold, holdout=held_out),
                    "n_defining": defining.n_perms,
                    "n_held_out": held_out.n_perms,
                    "binomial_low": low,
                    "binomial_high": high,
                    "n_subjects": masked.n_subjects,
                    "mask_voxels": masked.n_voxels,
                })
    return {"cluster_fpr": pd.DataFrame(rows)}


def run_spillover_experiment(spec: SyntheticSpec, n_perms: int, p_threshold: float, v_list: Sequence[int],
                             alpha: float = 0.05, seed: int = 20180827,
                             settings: StatSettings = StatSettings()) -> Dict[str, pd.DataFrame]:
    """Extent of corrected regions against the true region

    Compares the maximal-cluster correction at one voxel threshold with the
    continuous FWER correction at every v.

    Returns:
        {"spillover": one row per region x method}
    """
    cohort, rois, scores = _prepare(spec)
    masked = mask_cohort(cohort, settings.min_lesioned, settings.min_intact)
    k = default_k(v_list, masked.n_voxels)
    collect = CollectSpec(k=k, p_thresholds=(p_threshold,), tails=settings.tails, connectivity=settings.connectivity)

    rows = []
    for name, roi in rois.items():
        logger.info(f"{INFO_ICON} Spill-over: region '{name}' ({roi.size} voxels), p < {p_threshold}")
        observed = voxel_t_map(masked, scores[name], settings.tails, t_clamp=settings.t_clamp)
        null = _null(masked, scores[name], n_perms, seed, collect, settings)

        size_threshold = cluster_size_threshold(null, p_threshold, "max", alpha)
        results = [("cluster-max", None, apply_cluster_correction(
            observed, p_threshold, size_threshold, settings.connectivity, variant="max", alpha=alpha))]
        for v in v_list:
            if v > null.k:
                logger.warning(f"{WARNING_ICON} v={v} exceeds K={null.k}; skipped")
                continue
            t_crit = cfwer_threshold(null, v, alpha)
            results.append(("cfwer", v, apply_t_threshold(observed, t_crit, parameters={"v": v, "alpha": alpha})))

        for method, v, result in results:
            rows.append({
                "roi": name,
                "method": method,
                "v": v,
                "p_threshold": p_threshold if method.startswith("cluster") else None,
                "critical_value": result.critical_value,
                "roi_voxels": roi.size,
                **spillover_metrics(result, roi),
            })
    return {"spillover": pd.DataFrame(rows)}


def _comparison_task(cohort: CohortMatrix, scores: ScoreVector, fraction: float, position: int, repeat: int,
                     config: CorrectionConfig, n_perms: int, seed: int, settings: StatSettings,
                     roi_name: str) -> List[Dict[str, Any]]:
    tag = {"roi": roi_name, "fraction": fraction, "repeat": repeat}
    try:
        subset, subset_scores = subsample(
            cohort, scores, fraction, derive_seed(seed, SUBSAMPLE_STREAM, position, repeat),
            settings.min_lesioned, settings.min_intact,
        )
        observed = voxel_t_map(subset, subset_scores, settings.tails, t_clamp=settings.t_clamp)
        collect = CollectSpec(
            k=default_k(config.v_list, subset.n_voxels),
            p_thresholds=(config.p_threshold_list[-1],),
            tails=settings.tails,
            connectivity=settings.connectivity,
        )
        null = _null(subset, subset_scores, n_perms, derive_seed(seed, PLAN_STREAM, position, repeat), collect,
                     settings, workers=1, show_progress=False)
    except (DegenerateScoresError, EmptyMaskError, CohortError) as e:
        logger.warning(f"{WARNING_ICON} Skipping fraction {fraction} repeat {repeat}: {e.message}")
        return [
            {**tag, "n_subjects": None, "mask_voxels": None,
             **ComparisonRow(v=v, note=f"skipped: {e.message}").model_dump(exclude={"reference"}),
             "effective_q_percent": ""}
            for v in config.v_list
        ]

    rows = []
    for row in compare_cfwer_fdr(observed, null, config):
        record = row.model_dump(exclude={"reference"})
        record["effective_q_percent"] = format_percent(row.effective_q) if row.effective_q is not None else ""
        rows.append({**tag, "n_subjects": subset.n_subjects, "mask_voxels": subset.n_voxels, **record})
    return rows


def summarize_comparison(comparison: pd.DataFrame) -> pd.DataFrame:
    """Per region, fraction and v: mean thresholds with 95% intervals and the FDR-below-CFWER share"""
    rows = []
    if comparison.empty:
        return pd.DataFrame(rows)
    for (roi, fraction, v), group in comparison.groupby(["roi", "fraction", "v"], sort=True):
        valid = group.dropna(subset=["t_cfwer", "t_fdr"])
        valid = valid[np.isfinite(valid["t_fdr"].astype(float))]
        cfwer = mean_interval(valid["t_cfwer"].astype(float))
        fdr = mean_interval(valid["t_fdr"].astype(float))
        rows.append({
            "roi": roi,
            "fraction": fraction,
            "v": int(v),
            "n_repeats": int(group["repeat"].nunique()),
            "n_valid": int(len(valid)),
            "t_cfwer_mean": cfwer[0],
            "t_cfwer_low": cfwer[1],
            "t_cfwer_high": cfwer[2],
            "t_fdr_mean": fdr[0],
            "t_fdr_low": fdr[1],
            "t_fdr_high": fdr[2],
            "fdr_below_cfwer": float((valid["t_fdr"] < valid["t_cfwer"]).mean()) if len(valid) else math.nan,
        })
    return pd.DataFrame(rows)


def run_method_comparison(spec: SyntheticSpec, subsample_fractions: Sequence[float], n_repeats: int,
                          v_list: Sequence[int], alpha: float = 0.05, n_perms: int = 1000, seed: int = 20180827,
                          settings: StatSettings = StatSettings(),
                          config: Optional[CorrectionConfig] = None) -> Dict[str, pd.DataFrame]:
    """CFWER versus FDR thresholds across random sub-samples

    Fraction 1.0 is evaluated once since every repeat would draw the same
    subjects. Repeats run in parallel; each carries its own seeds, so the
    tables do not depend on the worker count.

    Returns:
        {"method_comparison": per repeat x v rows, "method_summary": aggregates,
         "effective_q": the effective-q-versus-v rows}
    """
    config = config or CorrectionConfig(alpha=alpha, v_list=list(v_list))
    cohort, rois, scores = _prepare(spec)
    tasks = []
    for name in rois:
        for position, fraction in enumerate(subsample_fractions):
            repeats = 1 if fraction >= 1.0 else n_repeats
            tasks.extend((name, fraction, position, repeat) for repeat in range(repeats))

    n_jobs = min(effective_n_jobs(settings.workers), len(tasks))
    logger.info(f"{INFO_ICON} Method comparison: {len(tasks)} sub-samples on {n_jobs} worker(s)")
    run = delayed(_comparison_task)
    batches = Parallel(n_jobs=n_jobs)(
        run(cohort, scores[name], fraction, position, repeat, config, n_perms, seed, settings, name)
        for name, fraction, position, repeat in tasks
    )
    comparison = pd.DataFrame([row for batch in batches for row in batch])
    effective = comparison[[c for c in ("roi", "fraction", "repeat", "n_subjects", "v", "n_supra_cfwer",
                                        "effective_q", "effective_q_percent") if c in comparison.columns]]
    return {
        "method_comparison": comparison,
        "method_summary": summarize_comparison(comparison),
        "effective_q": effective.copy(),
    }


class EvaluationService:
    """Runs the requested experiments for a RunConfig and collects an EvalReport"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.settings = StatSettings.from_config(config)

    def run(self) -> EvalReport:
        config = self.config
        experiment = config.experiment
        report = EvalReport(config=config.model_dump(mode="json"))

        if experiment in ("cluster-fpr", "all"):
            report.add(run_cluster_fpr_experiment(
                config.synthetic, config.n_perms, config.p_threshold_list, config.alpha,
                holdout_perms=config.holdout_perms, seed=config.seed, settings=self.settings,
            ))
        if experiment in ("spillover", "all"):
            report.add(run_spillover_experiment(
                config.synthetic, config.n_perms, config.p_threshold_list[-1], config.v_list, config.alpha,
                seed=config.seed, settings=self.settings,
            ))
        if experiment in ("method-comparison", "all"):
            report.add(run_method_comparison(
                config.synthetic, config.fractions, config.n_repeats, config.v_list, config.alpha,
                n_perms=config.n_perms, seed=config.seed, settings=self.settings,
                config=config.correction_config(),
            ))
        return report
