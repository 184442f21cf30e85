import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from src.models import ComparisonRow, CorrectionConfig, CorrectionResult
from src.utils.cluster import ClusterLabeling, label_components
from src.utils.nullengine import NullDistribution
from src.utils.validation import InputValidationError, NullConfigurationError
from src.utils.voxelstats import PValueMap, StatMap, p_threshold_to_t, p_value_map

logger = logging.getLogger(__name__)

NOT_APPLICABLE = None

# Documentation-only magnitudes from a real speech-recognition analysis; never computed here.
REFERENCE_ROWS = [
    ComparisonRow(v=1, t_cfwer=5.45, n_supra_cfwer=57, note="reference: speech recognition scores, v=1",
                  reference=True),
    ComparisonRow(v=100, n_supra_cfwer=1527, effective_q=100 / 1527, note="reference: speech recognition scores",
                  reference=True),
    ComparisonRow(v=0, effective_q=0.018, t_fdr=4.37, n_supra_fdr=1703,
                  note="reference: speech recognition scores, FDR at q=0.018", reference=True),
]


def percentile_threshold(null_values: Sequence[float], alpha: float) -> float:
    """Order statistic at rank ceil((1 - alpha) * n) of the null values

    Observed values pass only when strictly greater, so at most
    floor(alpha * n) of the defining null values exceed the threshold.
    """
    values = np.asarray(null_values, dtype=np.float64).ravel()
    if values.size == 0:
        raise InputValidationError("Cannot take a percentile of an empty null distribution")
    if not 0.0 < alpha < 1.0:
        raise InputValidationError(f"alpha must lie in (0, 1), got {alpha}")
    n = values.size
    rank = min(n, max(1, math.ceil((1.0 - alpha) * n - 1e-9)))
    return float(np.partition(values, rank - 1)[rank - 1])


def cluster_size_threshold(null: NullDistribution, p_threshold: float, variant: str = "max",
                           alpha: float = 0.05) -> int:
    """Cluster-extent threshold from the all-clusters or maximal-cluster null

    Args:
        null: Null distribution collected at p_threshold
        p_threshold: Voxel-wise cluster-forming threshold
        variant: "all" pools every cluster of every permutation; "max" uses one maximum per permutation
        alpha: Family-wise level

    Returns:
        Size that an observed cluster must strictly exceed
    """
    if variant == "max":
        values = null.max_sizes(p_threshold)
    elif variant == "all":
        values = null.pooled_sizes(p_threshold)
        if values.size == 0:
            return 0
    else:
        raise InputValidationError(f"Unknown cluster variant {variant!r}")
    return int(percentile_threshold(values, alpha))


def observed_clusters(observed: StatMap, p_threshold: float, connectivity: int = 26) -> ClusterLabeling:
    """Clusters of the observed map at a voxel-wise p-threshold"""
    _require_grid(observed)
    cutoff = p_threshold_to_t(p_threshold, observed.df, observed.tails)
    supra = observed.mask_index[observed.statistic() > cutoff]
    return label_components(supra, observed.grid, connectivity, mask_index=observed.mask_index)


def apply_cluster_correction(observed: StatMap, p_threshold: float, size_threshold: int, connectivity: int = 26,
                             variant: str = "max", alpha: float = 0.05,
                             provenance: Optional[Dict[str, Any]] = None) -> CorrectionResult:
    """Keep observed clusters strictly larger than size_threshold"""
    labeling = observed_clusters(observed, p_threshold, connectivity)
    keep_labels = np.flatnonzero(labeling.sizes > size_threshold) + 1
    supra = labeling.voxel_index[np.isin(labeling.labels, keep_labels)]
    return CorrectionResult(
        method=f"cluster-{variant}",
        parameters={
            "p_threshold": p_threshold,
            "alpha": alpha,
            "connectivity": connectivity,
            "variant": variant,
            "n_clusters_observed": labeling.n_clusters,
            "n_clusters_retained": int(keep_labels.size),
        },
        critical_value=float(size_threshold),
        supra_indices=[int(i) for i in supra],
        n_supra=int(supra.size),
        provenance=provenance or {},
    )


def cfwer_threshold(null: NullDistribution, v: int, alpha: float = 0.05) -> float:
    """Continuous FWER critical t from the v-th largest statistic per permutation

    v = 1 is the standard maximum-statistic FWER threshold.
    """
    if v > null.k:
        raise NullConfigurationError(f"v={v} exceeds the K={null.k} statistics collected")
    return percentile_threshold(null.kth_values(v), alpha)


def _require_grid(observed: StatMap) -> None:
    if observed.mask_index is None or observed.grid is None:
        raise InputValidationError("Observed StatMap must carry its mask index and grid")


def _supra_indices(observed: StatMap, selected: np.ndarray) -> List[int]:
    if observed.mask_index is None:
        return [int(i) for i in np.flatnonzero(selected)]
    return [int(i) for i in observed.mask_index[selected]]


def apply_t_threshold(observed: StatMap, t_crit: float, method: str = "cfwer",
                      parameters: Optional[Dict[str, Any]] = None,
                      provenance: Optional[Dict[str, Any]] = None) -> CorrectionResult:
    """Voxels whose statistic strictly exceeds t_crit"""
    selected = observed.statistic() > t_crit
    supra = _supra_indices(observed, selected)
    parameters = dict(parameters or {})
    v = parameters.get("v")
    return CorrectionResult(
        method=method,
        parameters=parameters,
        critical_value=float(t_crit),
        supra_indices=supra,
        n_supra=len(supra),
        effective_q=effective_q(v, len(supra)) if (v is not None and supra) else None,
        provenance=provenance or {},
    )


def effective_q(v: int, n_supra: int) -> Optional[float]:
    """v / n_supra; not applicable (None) without supra-threshold voxels"""
    if n_supra <= 0:
        return NOT_APPLICABLE
    return v / n_supra


def format_percent(q: Optional[float]) -> str:
    return "n/a" if q is None else f"{q * 100:.1f}%"


@dataclass(frozen=True)
class FdrThreshold:
    p_crit: Optional[float]
    t_crit: Optional[float]
    n_supra: int
    rank: int
    supra: np.ndarray


def fdr_threshold(p_map: PValueMap, q: float, df: int, dependency: str = "independent") -> FdrThreshold:
    """Benjamini-Hochberg step-up threshold

    Args:
        p_map: Voxel-wise p-values
        q: Nominal false discovery rate in (0, 1)
        df: Degrees of freedom for converting p_crit back to a t threshold
        dependency: "independent" uses c(V)=1; "arbitrary" uses c(V)=sum(1/i)

    Returns:
        FdrThreshold; p_crit and t_crit are None when nothing is rejected
    """
    if not 0.0 < q < 1.0:
        raise InputValidationError(f"q must lie in (0, 1), got {q}")
    p_values = np.asarray(p_map.p_values, dtype=np.float64)
    m = p_values.size
    if m < 1:
        raise InputValidationError("FDR needs at least one p-value")
    if dependency == "independent":
        c_m = 1.0
    elif dependency == "arbitrary":
        c_m = float(np.sum(1.0 / np.arange(1, m + 1)))
    else:
        raise InputValidationError(f"Unknown FDR dependency variant {dependency!r}")

    ordered = np.sort(p_values, kind="stable")
    bounds = np.arange(1, m + 1) * q / (m * c_m)
    passing = np.flatnonzero(ordered <= bounds)
    if passing.size == 0:
        return FdrThreshold(p_crit=None, t_crit=None, n_supra=0, rank=0, supra=np.zeros(m, dtype=bool))

    rank = int(passing[-1]) + 1
    p_crit = float(ordered[rank - 1])
    supra = p_values <= p_crit
    if p_crit >= 1.0:
        t_crit = -math.inf
    elif p_crit <= 0.0:
        t_crit = math.inf
    else:
        t_crit = p_threshold_to_t(p_crit, df, p_map.tails)
    return FdrThreshold(p_crit=p_crit, t_crit=t_crit, n_supra=int(supra.sum()), rank=rank, supra=supra)


def apply_fdr(observed: StatMap, q: float, dependency: str = "independent",
              provenance: Optional[Dict[str, Any]] = None) -> CorrectionResult:
    threshold = fdr_threshold(p_value_map(observed), q, observed.df, dependency)
    supra = _supra_indices(observed, threshold.supra)
    return CorrectionResult(
        method="fdr",
        parameters={"q": q, "dependency": dependency, "p_crit": threshold.p_crit, "rank": threshold.rank},
        critical_value=threshold.t_crit,
        supra_indices=supra,
        n_supra=len(supra),
        provenance=provenance or {},
    )


def compare_cfwer_fdr(observed: StatMap, null: NullDistribution, config: CorrectionConfig) -> List[ComparisonRow]:
    """One row per v: CFWER threshold, its effective q, and the FDR threshold at that q

    Rows without supra-threshold voxels, or whose effective q is >= 1, carry
    no FDR values; v beyond the collected K yields an empty row with a note.
    """
    p_map = p_value_map(observed)
    statistic = observed.statistic()
    rows = []
    for v in config.v_list:
        if v > null.k:
            rows.append(ComparisonRow(v=v, note=f"v exceeds collected K={null.k}"))
            continue
        t_cfwer = cfwer_threshold(null, v, config.alpha)
        n_cfwer = int(np.count_nonzero(statistic > t_cfwer))
        q = effective_q(v, n_cfwer)
        if q is None:
            rows.append(ComparisonRow(v=v, t_cfwer=t_cfwer, n_supra_cfwer=0, note="no supra-threshold voxels"))
            continue
        if q >= 1.0:
            rows.append(ComparisonRow(v=v, t_cfwer=t_cfwer, n_supra_cfwer=n_cfwer, effective_q=q,
                                      note="effective q >= 1"))
            continue
        fdr = fdr_threshold(p_map, q, observed.df, config.fdr_dependency)
        rows.append(ComparisonRow(
            v=v,
            t_cfwer=t_cfwer,
            n_supra_cfwer=n_cfwer,
            effective_q=q,
            t_fdr=fdr.t_crit,
            n_supra_fdr=fdr.n_supra,
            note="" if fdr.p_crit is not None else "FDR rejects nothing",
        ))
    return rows
