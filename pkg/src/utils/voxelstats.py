import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import stats

from src.utils.cohort import CohortMatrix, ScoreVector
from src.utils.validation import AnalysisError, CohortError, DegenerateVoxelError, InputValidationError
from src.utils.volume import Grid, Volume3D

logger = logging.getLogger(__name__)

TAILS = ("one-tailed", "two-tailed")


def _check_tails(tails: str) -> str:
    if tails not in TAILS:
        raise InputValidationError(f"tails must be one of {TAILS}, got {tails!r}")
    return tails


@dataclass(frozen=True)
class StatMap:
    """Voxel-wise t statistics over the analysis mask"""

    t_values: np.ndarray
    df: int
    tails: str = "one-tailed"
    mask_index: Optional[np.ndarray] = None
    grid: Optional[Grid] = None

    def __post_init__(self):
        _check_tails(self.tails)
        t_values = np.array(self.t_values, dtype=np.float64)
        if not np.all(np.isfinite(t_values)):
            raise AnalysisError("t map contains non-finite values")
        if self.df < 1:
            raise AnalysisError(f"Degrees of freedom must be >= 1, got {self.df}")
        if self.mask_index is not None and len(self.mask_index) != t_values.size:
            raise AnalysisError("t map length differs from the mask size")
        t_values.flags.writeable = False
        object.__setattr__(self, "t_values", t_values)

    def __len__(self) -> int:
        return int(self.t_values.size)

    def statistic(self) -> np.ndarray:
        """Value compared against critical thresholds: t, or |t| when two-tailed"""
        return np_statistic(self.t_values, self.tails)

    def to_volume(self) -> Volume3D:
        """Full-grid float32 volume; out-of-mask voxels are 0"""
        if self.grid is None or self.mask_index is None:
            raise AnalysisError("StatMap carries no grid to export onto")
        values = np.zeros(self.grid.n_voxels, dtype=np.float32)
        values[self.mask_index] = self.t_values
        return Volume3D.from_linear(self.grid, values, datatype="float32")


@dataclass(frozen=True)
class PValueMap:
    p_values: np.ndarray
    tails: str = "one-tailed"

    def __len__(self) -> int:
        return int(self.p_values.size)


def np_statistic(t_values: np.ndarray, tails: str) -> np.ndarray:
    return np.abs(t_values) if tails == "two-tailed" else t_values


class TMapComputer:
    """Pooled-variance two-sample t over every mask voxel for a given score order.

    Holds the lesion design once so repeated evaluations (one per
    permutation) only redo the score-dependent work. Per-voxel sums run over
    subjects in row order, so a voxel's t never depends on other voxels or
    on how permutations are scheduled.
    """

    def __init__(self, cohort: CohortMatrix, t_clamp: Optional[float] = None):
        if cohort.n_subjects < 3:
            raise CohortError(f"Need at least 3 subjects for df >= 1, got {cohort.n_subjects}")
        self.n_subjects = cohort.n_subjects
        self.df = cohort.n_subjects - 2
        self.lesioned = cohort.lesion_bits
        self.design = cohort.lesion_bits.astype(np.float64)
        self.n_lesioned = self.design.sum(axis=0)
        self.n_intact = self.n_subjects - self.n_lesioned
        if np.any(self.n_lesioned == 0) or np.any(self.n_intact == 0):
            raise CohortError("Every voxel needs at least one lesioned and one intact subject")
        self.t_clamp = t_clamp

    def compute(self, score_values: np.ndarray) -> np.ndarray:
        """t per voxel; positive when lesioned subjects score worse (higher)"""
        y = np.asarray(score_values, dtype=np.float64)
        if y.size != self.n_subjects:
            raise CohortError(f"{y.size} scores for {self.n_subjects} subjects")

        centred = y - y.mean()
        scale = np.sqrt(np.mean(centred ** 2))
        if scale == 0:
            raise AnalysisError("Scores have zero variance")
        z = centred / scale

        weighted = self.design * z[:, None]
        sum_lesioned = weighted.sum(axis=0)
        sum_intact = (z[:, None] - weighted).sum(axis=0)
        mean_lesioned = sum_lesioned / self.n_lesioned
        mean_intact = sum_intact / self.n_intact

        # second pass: within-group squared deviations
        residuals = z[:, None] - np.where(self.lesioned, mean_lesioned, mean_intact)
        ss_within = (residuals ** 2).sum(axis=0)

        diff = mean_lesioned - mean_intact
        se = np.sqrt(ss_within / self.df * (1.0 / self.n_lesioned + 1.0 / self.n_intact))

        eps = np.finfo(np.float64).eps * self.n_subjects
        degenerate = ss_within <= eps ** 2
        t_values = np.zeros_like(diff)
        ok = ~degenerate
        t_values[ok] = diff[ok] / se[ok]

        separated = degenerate & (np.abs(diff) > eps)
        if separated.any():
            if self.t_clamp is None:
                raise DegenerateVoxelError(
                    f"{int(separated.sum())} voxels have zero within-group variance with a non-zero "
                    f"mean difference (first at mask position {int(np.flatnonzero(separated)[0])}); "
                    f"set t_clamp to clamp them"
                )
            t_values[separated] = np.sign(diff[separated]) * self.t_clamp
        return t_values


def voxel_t_map(cohort: CohortMatrix, scores: ScoreVector, tails: str = "one-tailed",
                t_clamp: Optional[float] = None) -> StatMap:
    """Voxel-wise pooled-variance t map with df = N - 2

    Args:
        cohort: Masked cohort (every voxel has both groups populated)
        scores: Deficit scores aligned to cohort rows
        tails: one-tailed (positive t) or two-tailed (|t|) thresholding
        t_clamp: When set, zero-variance voxels with a mean difference get +/- t_clamp instead of an error

    Returns:
        StatMap over the cohort's mask
    """
    if len(scores) != cohort.n_subjects:
        raise CohortError(f"{len(scores)} scores for {cohort.n_subjects} subjects")
    computer = TMapComputer(cohort, t_clamp=t_clamp)
    return StatMap(
        t_values=computer.compute(scores.values),
        df=computer.df,
        tails=_check_tails(tails),
        mask_index=cohort.mask_index,
        grid=cohort.grid,
    )


def t_to_p(t: Union[float, np.ndarray], df: int, tails: str = "one-tailed") -> Union[float, np.ndarray]:
    """Upper-tail Student-t probability (doubled on |t| when two-tailed)"""
    if df < 1:
        raise InputValidationError(f"df must be >= 1, got {df}")
    if _check_tails(tails) == "two-tailed":
        p = np.minimum(1.0, 2.0 * stats.t.sf(np.abs(t), df))
    else:
        p = stats.t.sf(t, df)
    return float(p) if np.ndim(p) == 0 else p


def p_threshold_to_t(p: float, df: int, tails: str = "one-tailed") -> float:
    """Critical t whose tail probability equals p"""
    if not 0.0 < p < 1.0:
        raise InputValidationError(f"p must lie in (0, 1), got {p}")
    if df < 1:
        raise InputValidationError(f"df must be >= 1, got {df}")
    if _check_tails(tails) == "two-tailed":
        return float(stats.t.isf(p / 2.0, df))
    return float(stats.t.isf(p, df))


def p_value_map(stat_map: StatMap) -> PValueMap:
    p_values = np.asarray(t_to_p(stat_map.t_values, stat_map.df, stat_map.tails), dtype=np.float64)
    return PValueMap(p_values=np.atleast_1d(p_values), tails=stat_map.tails)
