import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import ndimage

from src.utils.validation import InputValidationError
from src.utils.volume import Grid, Volume3D

logger = logging.getLogger(__name__)

# neighbourhood -> scipy.ndimage connectivity rank
CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


@lru_cache(maxsize=None)
def _structure(connectivity: int) -> np.ndarray:
    if connectivity not in CONNECTIVITY_RANK:
        raise InputValidationError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])


@dataclass(frozen=True)
class ClusterLabeling:
    """Connected components of a supra-threshold voxel set.

    `labels` is aligned with `voxel_index` (linear grid indices): 0 marks
    background, 1..n_clusters label clusters ordered by their smallest
    linear index. `sizes[label - 1]` is that cluster's voxel count.
    """

    voxel_index: np.ndarray
    labels: np.ndarray
    sizes: np.ndarray

    @property
    def n_clusters(self) -> int:
        return int(self.sizes.size)

    def cluster_indices(self, label: int) -> np.ndarray:
        return self.voxel_index[self.labels == label]

    def to_volume(self, grid: Grid) -> Volume3D:
        """int16 label volume on the full grid"""
        values = np.zeros(grid.n_voxels, dtype=np.int16)
        values[self.voxel_index] = self.labels
        return Volume3D.from_linear(grid, values, datatype="int16")


def label_components(supra: np.ndarray, grid: Grid, connectivity: int = 26,
                     mask_index: Optional[np.ndarray] = None) -> ClusterLabeling:
    """Label maximal connected components of a voxel set

    Args:
        supra: Linear grid indices of supra-threshold voxels
        grid: Grid the indices live on
        connectivity: 6, 18 or 26 neighbourhood
        mask_index: When given, labels are reported for every mask voxel (0 off the supra set);
            otherwise for the sorted supra voxels only

    Returns:
        ClusterLabeling with dense labels in ascending-minimum-index order
    """
    structure = _structure(connectivity)
    supra = np.unique(np.asarray(supra, dtype=np.int64))
    voxel_index = supra if mask_index is None else np.asarray(mask_index, dtype=np.int64)
    if supra.size == 0:
        return ClusterLabeling(
            voxel_index=voxel_index,
            labels=np.zeros(voxel_index.size, dtype=np.int32),
            sizes=np.zeros(0, dtype=np.int64),
        )
    if supra[0] < 0 or supra[-1] >= grid.n_voxels:
        raise InputValidationError("Supra-threshold indices fall outside the grid")

    occupied = np.zeros(grid.n_voxels, dtype=bool)
    occupied[supra] = True
    raw, n_raw = ndimage.label(grid.unflatten(occupied), structure=structure)
    raw_at_supra = grid.flatten(raw)[supra]

    # supra is ascending, so first occurrence == smallest linear index of each component
    _, first = np.unique(raw_at_supra, return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.zeros(n_raw + 1, dtype=np.int32)
    remap[np.unique(raw_at_supra)[order]] = np.arange(1, order.size + 1, dtype=np.int32)

    labels_full = remap[grid.flatten(raw)]
    labels = labels_full[voxel_index]
    sizes = np.bincount(remap[raw_at_supra], minlength=order.size + 1)[1:].astype(np.int64)
    return ClusterLabeling(voxel_index=voxel_index, labels=labels, sizes=sizes)


def cluster_sizes(supra_mask: np.ndarray, grid: Grid, mask_index: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Sizes of the clusters formed by a boolean selection over mask voxels

    Used inside the permutation loop, where only sizes are needed.
    """
    if not supra_mask.any():
        return np.zeros(0, dtype=np.int64)
    occupied = np.zeros(grid.n_voxels, dtype=bool)
    occupied[mask_index[supra_mask]] = True
    raw, n_raw = ndimage.label(grid.unflatten(occupied), structure=_structure(connectivity))
    sizes = np.bincount(raw.ravel(), minlength=n_raw + 1)[1:]
    return np.sort(sizes)[::-1].astype(np.int64)


def max_cluster_size(labeling: ClusterLabeling) -> int:
    """Largest cluster's voxel count, 0 without clusters"""
    return int(labeling.sizes.max()) if labeling.n_clusters else 0
