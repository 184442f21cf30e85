"""
Synthetic stroke cohorts with known ground truth.

Each subject carries one lesion: a seed voxel drawn from a territory
gradient (probability decaying with distance from a centre, restricted to
a brain envelope), grown by repeatedly adding a uniformly chosen voxel
from the 26-connected frontier until a log-normally drawn size is reached.
Deficit scores are the percent damage of a ground-truth region.
"""

import logging
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from src.models import SyntheticSpec
from src.utils.cohort import (
    CohortMatrix,
    RoiMask,
    ScoreVector,
    add_noise,
    percent_damage_score,
    roi_from_box,
    write_manifest,
    write_scores,
)
from src.utils.nullengine import derive_seed
from src.utils.validation import InputValidationError
from src.utils.volume import Grid, Volume3D, write_nifti

logger = logging.getLogger(__name__)

NEIGHBOUR_OFFSETS = np.array(
    [(di, dj, dk) for dk in (-1, 0, 1) for dj in (-1, 0, 1) for di in (-1, 0, 1) if (di, dj, dk) != (0, 0, 0)],
    dtype=np.int64,
)

# stream keys below the subject range
NOISE_STREAM = 1_000_000


def spec_grid(spec: SyntheticSpec) -> Grid:
    return Grid(dims=spec.dims, voxel_size_mm=spec.voxel_size_mm)


def envelope_mask(spec: SyntheticSpec) -> np.ndarray:
    """Boolean (nx, ny, nz) array of voxels lesions may occupy

    The left-hemisphere envelope is an ellipsoid centred at (nx/4, ny/2, nz/2)
    with semi-axes (nx/4, 0.4*ny, 0.4*nz).
    """
    nx, ny, nz = spec.dims
    if spec.envelope == "grid":
        return np.ones(spec.dims, dtype=bool)
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    centre = (nx / 4.0, ny / 2.0, nz / 2.0)
    axes = (max(nx / 4.0, 0.5), max(0.4 * ny, 0.5), max(0.4 * nz, 0.5))
    radius = ((ii - centre[0]) / axes[0]) ** 2 + ((jj - centre[1]) / axes[1]) ** 2 + ((kk - centre[2]) / axes[2]) ** 2
    return radius <= 1.0


def gradient_centre(spec: SyntheticSpec) -> Tuple[float, float, float]:
    if spec.gradient_center is not None:
        return tuple(float(c) for c in spec.gradient_center)
    nx, ny, nz = spec.dims
    if spec.envelope == "grid":
        return ((nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0)
    return (nx / 4.0, ny / 2.0, nz / 2.0)


def placement_weights(spec: SyntheticSpec, envelope: np.ndarray) -> np.ndarray:
    """Seed-placement probability per voxel (3D, sums to 1)"""
    nx, ny, nz = spec.dims
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    ci, cj, ck = gradient_centre(spec)
    distance = np.sqrt((ii - ci) ** 2 + (jj - cj) ** 2 + (kk - ck) ** 2)
    weights = np.where(envelope, np.exp(-distance / spec.gradient_decay), 0.0)
    total = weights.sum()
    if total <= 0:
        raise InputValidationError("Territory gradient assigns zero probability to every envelope voxel")
    return weights / total


def grow_lesion(seed_coord: Tuple[int, int, int], target_size: int, allowed: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
    """Grow a 26-connected region from seed_coord by frontier-uniform accretion

    Growth stops early when the frontier empties (the region fills its
    connected part of `allowed`).

    Returns:
        Boolean array shaped like `allowed`
    """
    shape = np.array(allowed.shape)
    region = np.zeros(allowed.shape, dtype=bool)
    queued = np.zeros(allowed.shape, dtype=bool)
    frontier = []

    def accept(coord):
        region[coord] = True
        neighbours = np.asarray(coord) + NEIGHBOUR_OFFSETS
        inside = np.all((neighbours >= 0) & (neighbours < shape), axis=1)
        for n in map(tuple, neighbours[inside]):
            if allowed[n] and not region[n] and not queued[n]:
                queued[n] = True
                frontier.append(n)

    accept(tuple(int(c) for c in seed_coord))
    size = 1
    while size < target_size and frontier:
        pick = int(rng.integers(len(frontier)))
        frontier[pick], frontier[-1] = frontier[-1], frontier[pick]
        accept(frontier.pop())
        size += 1
    return region


def draw_lesion_size(spec: SyntheticSpec, rng: np.random.Generator, limit: int) -> int:
    size = int(np.rint(rng.lognormal(spec.lesion_log_mu, spec.lesion_log_sigma)))
    return int(min(max(size, 1), limit))


def build_roi_masks(spec: SyntheticSpec) -> Dict[str, RoiMask]:
    grid = spec_grid(spec)
    return {name: roi_from_box(box, grid) for name, box in spec.rois.items()}


def generate_synthetic_cohort(spec: SyntheticSpec) -> Tuple[CohortMatrix, RoiMask]:
    """Synthetic cohort over the whole grid plus its primary ground-truth region

    Args:
        spec: Grid, cohort size, lesion-size and territory-gradient parameters

    Returns:
        Tuple of (unmasked CohortMatrix, primary RoiMask)
    """
    grid = spec_grid(spec)
    envelope = envelope_mask(spec)
    weights = placement_weights(spec, envelope)
    flat_weights = grid.flatten(weights)
    cdf = np.cumsum(flat_weights)
    cdf /= cdf[-1]

    rois = build_roi_masks(spec)
    for name, roi in rois.items():
        if not np.any(flat_weights[roi.indices] > 0):
            logger.warning(f"ROI '{name}' has zero seed-placement probability; it may stay unlesioned")

    limit = int(envelope.sum())
    bits = np.zeros((spec.n_subjects, grid.n_voxels), dtype=bool)
    for subject in range(spec.n_subjects):
        rng = np.random.default_rng(derive_seed(spec.seed, subject))
        target = draw_lesion_size(spec, rng, limit)
        seed_index = int(np.searchsorted(cdf, rng.random(), side="right"))
        seed_index = min(seed_index, grid.n_voxels - 1)
        region = grow_lesion(grid.from_linear(seed_index), target, envelope, rng)
        bits[subject] = grid.flatten(region)

    sizes = bits.sum(axis=1)
    logger.info(
        f"Synthetic cohort: {spec.n_subjects} subjects on {grid.dims}, lesion size "
        f"mean {sizes.mean():.1f} (min {sizes.min()}, max {sizes.max()})"
    )
    cohort = CohortMatrix(
        subject_ids=tuple(f"sub-{s + 1:03d}" for s in range(spec.n_subjects)),
        grid=grid,
        mask_index=np.arange(grid.n_voxels, dtype=np.int64),
        lesion_bits=bits,
    )
    return cohort, rois[spec.primary_roi]


def synthetic_scores(cohort: CohortMatrix, spec: SyntheticSpec,
                     rois: Dict[str, RoiMask] = None) -> Dict[str, ScoreVector]:
    """Percent-damage score per region, with Gaussian noise when noise_sd > 0"""
    rois = rois or build_roi_masks(spec)
    scores = {}
    for position, (name, roi) in enumerate(rois.items()):
        clean = percent_damage_score(cohort, roi)
        scores[name] = add_noise(clean, spec.noise_sd, derive_seed(spec.seed, NOISE_STREAM, position))
    return scores


def write_synthetic_dataset(cohort: CohortMatrix, scores: Dict[str, ScoreVector], rois: Dict[str, RoiMask],
                            out_dir: Union[str, Path]) -> Path:
    """Lesion volumes, manifest, per-region scores CSVs and ROI volumes

    Manifest lesion paths are relative to the manifest, so the directory
    can be moved and its checksums depend only on content.

    Returns:
        Path of the written manifest
    """
    out_dir = Path(out_dir)
    entries = []
    for row, subject_id in enumerate(cohort.subject_ids):
        values = np.zeros(cohort.grid.n_voxels, dtype=np.uint8)
        values[cohort.mask_index[cohort.lesion_bits[row]]] = 1
        relative = f"lesions/{subject_id}.nii.gz"
        write_nifti(Volume3D.from_linear(cohort.grid, values, datatype="binary"), out_dir / relative)
        entries.append({"subject_id": subject_id, "lesion_path": relative})

    manifest_path = out_dir / "manifest.json"
    write_manifest(entries, manifest_path)
    for name, vector in scores.items():
        write_scores(vector, cohort.subject_ids, out_dir / f"scores_{name}.csv")
    for name, roi in rois.items():
        values = np.zeros(roi.grid.n_voxels, dtype=np.uint8)
        values[roi.indices] = 1
        write_nifti(Volume3D.from_linear(roi.grid, values, datatype="binary"), out_dir / f"roi_{name}.nii.gz")
    logger.info(f"Wrote {len(entries)} lesion maps and {len(scores)} score files to {out_dir}")
    return manifest_path
