import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.models import RoiBox
from src.utils.validation import (
    CohortError,
    DegenerateScoresError,
    EmptyMaskError,
    InputValidationError,
    check_manifest_entries,
    check_scores_frame,
    read_json_file,
)
from src.utils.volume import Grid, Volume3D, read_nifti

logger = logging.getLogger(__name__)


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class CohortMatrix:
    """Per-subject binary lesion status over an ordered voxel index.

    Rows follow `subject_ids`; columns follow `mask_index` (ascending linear
    grid indices). Shared read-only across permutation workers.
    """

    subject_ids: Tuple[str, ...]
    grid: Grid
    mask_index: np.ndarray
    lesion_bits: np.ndarray
    min_lesioned: Optional[int] = None
    min_intact: Optional[int] = None

    def __post_init__(self):
        subject_ids = tuple(str(s) for s in self.subject_ids)
        if not subject_ids:
            raise CohortError("A cohort needs at least one subject")
        if len(set(subject_ids)) != len(subject_ids):
            raise CohortError("Subject ids must be unique")
        bits = np.asarray(self.lesion_bits, dtype=bool)
        mask_index = np.asarray(self.mask_index, dtype=np.int64)
        if bits.ndim != 2 or bits.shape != (len(subject_ids), mask_index.size):
            raise CohortError(
                f"lesion_bits shape {bits.shape} does not match {len(subject_ids)} subjects x {mask_index.size} voxels"
            )
        if mask_index.size and (mask_index.min() < 0 or mask_index.max() >= self.grid.n_voxels):
            raise CohortError("Mask index outside the grid")
        if np.any(np.diff(mask_index) <= 0):
            raise CohortError("Mask index must be strictly increasing")
        object.__setattr__(self, "subject_ids", subject_ids)
        object.__setattr__(self, "lesion_bits", _readonly(bits))
        object.__setattr__(self, "mask_index", _readonly(mask_index))

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_voxels(self) -> int:
        return int(self.mask_index.size)

    def lesion_counts(self) -> np.ndarray:
        """Number of lesioned subjects per column"""
        return self.lesion_bits.sum(axis=0, dtype=np.int64)

    def overlap_volume(self) -> Volume3D:
        """Voxel-wise lesion overlap counts on the full grid"""
        counts = np.zeros(self.grid.n_voxels, dtype=np.int16)
        counts[self.mask_index] = self.lesion_counts()
        return Volume3D.from_linear(self.grid, counts, datatype="int16")

    def mask_volume(self) -> Volume3D:
        values = np.zeros(self.grid.n_voxels, dtype=np.uint8)
        values[self.mask_index] = 1
        return Volume3D.from_linear(self.grid, values, datatype="binary")


@dataclass(frozen=True)
class ScoreVector:
    """One continuous deficit score per subject; higher is worse"""

    values: np.ndarray
    orientation: str = field(default="higher-is-worse")

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if values.size == 0:
            raise DegenerateScoresError("Score vector is empty")
        if not np.all(np.isfinite(values)):
            raise DegenerateScoresError("Scores must be finite")
        if np.all(values == values[0]):
            raise DegenerateScoresError("All scores are identical; no association can be tested")
        object.__setattr__(self, "values", _readonly(values))

    def __len__(self) -> int:
        return int(self.values.size)

    def permuted(self, order: np.ndarray) -> "ScoreVector":
        return ScoreVector(self.values[np.asarray(order)])


@dataclass(frozen=True)
class RoiMask:
    """Ground-truth region as a set of linear grid indices"""

    grid: Grid
    indices: np.ndarray

    def __post_init__(self):
        indices = np.unique(np.asarray(self.indices, dtype=np.int64))
        if indices.size == 0:
            raise InputValidationError("ROI is empty")
        if indices.min() < 0 or indices.max() >= self.grid.n_voxels:
            raise InputValidationError("ROI indices fall outside the grid")
        object.__setattr__(self, "indices", _readonly(indices))

    @property
    def size(self) -> int:
        return int(self.indices.size)


def default_mask_cutoff(n_subjects: int) -> int:
    """max(2, ceil(5% of N)) lesioned and intact subjects per voxel"""
    return max(2, math.ceil(0.05 * n_subjects - 1e-9))


def build_cohort(volumes: Sequence[Volume3D], subject_ids: Sequence[str]) -> CohortMatrix:
    """Stack binary lesion volumes into a cohort over every grid voxel

    Args:
        volumes: One binary lesion volume per subject, all on one grid
        subject_ids: Unique subject identifiers, in row order

    Returns:
        Unmasked CohortMatrix (mask_index covers the whole grid)
    """
    if len(volumes) != len(subject_ids):
        raise CohortError(f"{len(volumes)} volumes but {len(subject_ids)} subject ids")
    if not volumes:
        raise CohortError("No lesion volumes supplied")
    if len(set(map(str, subject_ids))) != len(subject_ids):
        raise CohortError("Duplicate subject id")

    grid = volumes[0].grid
    rows = []
    for subject_id, volume in zip(subject_ids, volumes):
        if volume.grid != grid:
            raise CohortError(
                f"Subject {subject_id} has grid {volume.dims} / {volume.voxel_size_mm}, expected "
                f"{grid.dims} / {grid.voxel_size_mm}"
            )
        values = volume.linear_values()
        if not np.isin(values, (0, 1)).all():
            raise CohortError(f"Lesion volume for {subject_id} is not binary")
        rows.append(values.astype(bool))

    return CohortMatrix(
        subject_ids=tuple(map(str, subject_ids)),
        grid=grid,
        mask_index=np.arange(grid.n_voxels, dtype=np.int64),
        lesion_bits=np.vstack(rows),
    )


def compute_analysis_mask(cohort: CohortMatrix, min_lesioned: int, min_intact: int) -> np.ndarray:
    """Linear indices of voxels with enough lesioned and intact subjects

    min_intact may be 0 only for inspecting overlap; the t map itself
    requires both groups populated.

    Args:
        cohort: Cohort over the grid (or a superset of the wanted mask)
        min_lesioned: Minimum lesioned subjects per kept voxel, >= 1
        min_intact: Minimum intact subjects per kept voxel, >= 0

    Returns:
        Ascending linear indices of the kept voxels
    """
    if min_lesioned < 1 or min_intact < 0:
        raise InputValidationError("Mask cutoffs must be >= 1 lesioned and >= 0 intact")
    lesioned = cohort.lesion_counts()
    keep = (lesioned >= min_lesioned) & (cohort.n_subjects - lesioned >= min_intact)
    mask_index = cohort.mask_index[keep]
    if mask_index.size == 0:
        raise EmptyMaskError(
            f"No voxel has >= {min_lesioned} lesioned and >= {min_intact} intact subjects "
            f"(N={cohort.n_subjects})"
        )
    return mask_index


def apply_mask(cohort: CohortMatrix, mask_index: np.ndarray,
               min_lesioned: Optional[int] = None, min_intact: Optional[int] = None) -> CohortMatrix:
    """Restrict a cohort to a subset of its columns"""
    columns = np.searchsorted(cohort.mask_index, mask_index)
    if np.any(columns >= cohort.n_voxels) or not np.array_equal(cohort.mask_index[columns], mask_index):
        raise CohortError("Mask contains voxels the cohort does not hold")
    return CohortMatrix(
        subject_ids=cohort.subject_ids,
        grid=cohort.grid,
        mask_index=mask_index,
        lesion_bits=cohort.lesion_bits[:, columns],
        min_lesioned=min_lesioned,
        min_intact=min_intact,
    )


def mask_cohort(cohort: CohortMatrix, min_lesioned: Optional[int] = None,
                min_intact: Optional[int] = None) -> CohortMatrix:
    """Compute the analysis mask and apply it

    Args:
        cohort: Unmasked cohort
        min_lesioned: Cutoff, or None for default_mask_cutoff(N)
        min_intact: Cutoff, or None for default_mask_cutoff(N)

    Returns:
        CohortMatrix restricted to the analysis mask
    """
    if min_lesioned is None:
        min_lesioned = default_mask_cutoff(cohort.n_subjects)
    if min_intact is None:
        min_intact = default_mask_cutoff(cohort.n_subjects)
    mask_index = compute_analysis_mask(cohort, min_lesioned, min_intact)
    logger.info(
        f"Analysis mask: {mask_index.size} voxels with >= {min_lesioned} lesioned / >= {min_intact} intact "
        f"of N={cohort.n_subjects}"
    )
    return apply_mask(cohort, mask_index, min_lesioned, min_intact)


def percent_damage_score(cohort: CohortMatrix, roi: RoiMask) -> ScoreVector:
    """Fraction of the ROI lesioned in each subject

    The cohort must hold every ROI voxel (compute this before masking).

    Returns:
        ScoreVector of values in [0, 1], one per subject
    """
    if roi.size == 0:
        raise InputValidationError("ROI is empty")
    if roi.grid != cohort.grid:
        raise CohortError("ROI grid differs from the cohort grid")
    columns = np.searchsorted(cohort.mask_index, roi.indices)
    inside = columns < cohort.n_voxels
    inside[inside] = cohort.mask_index[columns[inside]] == roi.indices[inside]
    if not inside.all():
        raise CohortError(
            f"{int((~inside).sum())} ROI voxels are not held by the cohort; compute percent damage before masking"
        )
    damaged = cohort.lesion_bits[:, columns].sum(axis=1, dtype=np.int64)
    return ScoreVector(damaged / roi.size)


def add_noise(scores: ScoreVector, sd: float, seed: int) -> ScoreVector:
    """Add Gaussian noise with standard deviation sd, reproducible from seed

    Args:
        scores: Noise-free scores
        sd: Noise standard deviation, >= 0 (0 returns a copy)
        seed: Seed for the noise draw
    """
    if sd < 0:
        raise InputValidationError("Noise sd must be non-negative")
    if sd == 0:
        return ScoreVector(scores.values.copy())
    rng = np.random.default_rng(seed)
    return ScoreVector(scores.values + rng.normal(0.0, sd, size=len(scores)))


def subsample(cohort: CohortMatrix, scores: ScoreVector, fraction: float, seed: int,
              min_lesioned: Optional[int] = None,
              min_intact: Optional[int] = None) -> Tuple[CohortMatrix, ScoreVector]:
    """Random subject subset without replacement, re-masked on the subset

    Subject order of the original cohort is preserved. Pass the unmasked (or
    minimally masked) cohort so voxels can enter the subset's mask.

    Args:
        cohort: Source cohort
        scores: Scores aligned to the cohort's rows
        fraction: Share of subjects to keep, in (0, 1]
        seed: Random seed for the subset draw
        min_lesioned: Mask cutoff; default rule on the subset size when None
        min_intact: Mask cutoff; default rule on the subset size when None

    Returns:
        Tuple of (masked subset cohort, subset scores)
    """
    if not 0.0 < fraction <= 1.0:
        raise InputValidationError(f"Subsample fraction must lie in (0, 1], got {fraction}")
    if len(scores) != cohort.n_subjects:
        raise CohortError("Scores and cohort disagree on subject count")

    n_keep = int(math.floor(fraction * cohort.n_subjects + 0.5))
    if n_keep < 2:
        raise CohortError(f"Subsample of {n_keep} subjects is too small")
    if n_keep == cohort.n_subjects:
        rows = np.arange(cohort.n_subjects)
    else:
        rng = np.random.default_rng(seed)
        rows = np.sort(rng.choice(cohort.n_subjects, size=n_keep, replace=False))

    subset = CohortMatrix(
        subject_ids=tuple(cohort.subject_ids[r] for r in rows),
        grid=cohort.grid,
        mask_index=cohort.mask_index,
        lesion_bits=cohort.lesion_bits[rows],
    )
    return mask_cohort(subset, min_lesioned, min_intact), ScoreVector(scores.values[rows])


def load_cohort(manifest_path: Union[str, Path]) -> CohortMatrix:
    """Read a cohort manifest and its lesion files into an unmasked cohort"""
    entries = check_manifest_entries(read_json_file(manifest_path), manifest_path)
    volumes = []
    for entry in entries:
        volume = read_nifti(entry["lesion_path"])
        if volume.datatype != "binary":
            raise CohortError(f"Lesion map for {entry['subject_id']} is not binary", path=entry["lesion_path"])
        volumes.append(volume)
    logger.info(f"Loaded {len(volumes)} lesion maps from {manifest_path}")
    return build_cohort(volumes, [entry["subject_id"] for entry in entries])


def load_scores(path: Union[str, Path], subject_ids: Sequence[str], invert: bool = False) -> ScoreVector:
    """Read a `subject_id,score` CSV aligned to the cohort's subject order

    Args:
        path: CSV file
        subject_ids: Cohort row order
        invert: Negate scores for measures where higher means better

    Returns:
        ScoreVector in cohort row order; extra subjects in the CSV are ignored
    """
    try:
        frame = pd.read_csv(path, dtype={"subject_id": str}, encoding="utf-8")
    except FileNotFoundError:
        raise InputValidationError("File not found", path=path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputValidationError(f"Unreadable scores CSV: {e}", path=path)
    frame = check_scores_frame(frame, path).set_index("subject_id")

    missing = [s for s in subject_ids if s not in frame.index]
    if missing:
        raise InputValidationError(f"Scores missing for subjects {missing[:5]}", path=path)
    extra = sorted(set(frame.index) - set(subject_ids))
    if extra:
        logger.warning(f"Ignoring scores for {len(extra)} subjects not in the cohort")

    values = frame.loc[list(subject_ids), "score"].to_numpy(dtype=float)
    try:
        return ScoreVector(-values if invert else values)
    except DegenerateScoresError as e:
        raise DegenerateScoresError(e.message, path=path)


def write_scores(scores: ScoreVector, subject_ids: Sequence[str], path: Union[str, Path]) -> None:
    frame = pd.DataFrame({"subject_id": list(subject_ids), "score": scores.values})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8", lineterminator="\n")


def roi_from_box(box: RoiBox, grid: Grid) -> RoiMask:
    (ci, cj, ck), (si, sj, sk) = box.corner, box.size
    ii, jj, kk = np.meshgrid(
        np.arange(ci, ci + si), np.arange(cj, cj + sj), np.arange(ck, ck + sk), indexing="ij"
    )
    nx, ny, _ = grid.dims
    return RoiMask(grid=grid, indices=(ii + nx * (jj + ny * kk)).ravel())


def load_roi(path: Union[str, Path], grid: Grid) -> RoiMask:
    """ROI from a binary NIfTI volume or a JSON list of linear voxel indices"""
    path = Path(path)
    if path.suffix.lower() == ".json":
        indices = read_json_file(path)
        if isinstance(indices, dict):
            indices = indices.get("indices")
        if not isinstance(indices, list) or not all(isinstance(i, int) for i in indices):
            raise InputValidationError("ROI JSON must be a list of integer voxel indices", path=path)
        return RoiMask(grid=grid, indices=np.asarray(indices, dtype=np.int64))

    volume = read_nifti(path)
    if volume.grid != grid:
        raise CohortError(f"ROI grid {volume.dims} differs from cohort grid {grid.dims}", path=path)
    return RoiMask(grid=grid, indices=np.flatnonzero(volume.linear_values() > 0))


def write_manifest(entries: List[dict], path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        json.dump(entries, file, indent=2)
        file.write("\n")
