from collections import deque

import numpy as np
import pytest

from src.models import RoiBox, SyntheticSpec
from src.utils.cohort import CohortMatrix, ScoreVector, mask_cohort
from src.utils.nullengine import NullDistribution
from src.utils.volume import Grid


def make_cohort(bits: np.ndarray, dims, subject_ids=None) -> CohortMatrix:
    """Unmasked cohort from an (n_subjects, n_voxels) lesion matrix"""
    bits = np.asarray(bits, dtype=bool)
    grid = Grid(dims=tuple(dims))
    return CohortMatrix(
        subject_ids=tuple(subject_ids or (f"s{i:03d}" for i in range(bits.shape[0]))),
        grid=grid,
        mask_index=np.arange(grid.n_voxels, dtype=np.int64),
        lesion_bits=bits,
    )


def random_masked_cohort(rng: np.random.Generator, n_subjects: int, dims=(4, 4, 3), density: float = 0.4):
    """Random lesions, masked so every voxel has both groups populated"""
    grid = Grid(dims=dims)
    bits = rng.random((n_subjects, grid.n_voxels)) < density
    return mask_cohort(make_cohort(bits, dims), 1, 1)


def flood_fill_components(occupied: np.ndarray, connectivity: int):
    """Reference labeling: list of sets of (i, j, k) via breadth-first search"""
    offsets = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            for dk in (-1, 0, 1):
                order = abs(di) + abs(dj) + abs(dk)
                if order == 0:
                    continue
                if connectivity == 6 and order > 1:
                    continue
                if connectivity == 18 and order > 2:
                    continue
                offsets.append((di, dj, dk))
    seen = np.zeros(occupied.shape, dtype=bool)
    components = []
    for start in zip(*np.nonzero(occupied)):
        if seen[start]:
            continue
        seen[start] = True
        queue = deque([start])
        component = set()
        while queue:
            voxel = queue.popleft()
            component.add(tuple(int(c) for c in voxel))
            for offset in offsets:
                n = tuple(v + o for v, o in zip(voxel, offset))
                if all(0 <= n[a] < occupied.shape[a] for a in range(3)) and occupied[n] and not seen[n]:
                    seen[n] = True
                    queue.append(n)
        components.append(component)
    return components


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_cohort(rng):
    """Five subjects on a 3x3x3 grid with continuous scores"""
    cohort = random_masked_cohort(rng, 5, dims=(3, 3, 3), density=0.5)
    scores = ScoreVector(rng.normal(size=5))
    return cohort, scores


@pytest.fixture
def small_cohort(rng):
    """Twenty subjects on a 6x6x5 grid with continuous scores"""
    cohort = random_masked_cohort(rng, 20, dims=(6, 6, 5), density=0.35)
    scores = ScoreVector(rng.normal(size=20))
    return cohort, scores


@pytest.fixture
def tiny_spec():
    """Whole-grid envelope, centred regions; small enough for fast experiments"""
    return SyntheticSpec(
        dims=(12, 12, 12),
        n_subjects=20,
        lesion_log_mu=3.5,
        lesion_log_sigma=0.3,
        gradient_decay=3.0,
        envelope="grid",
        rois={
            "anterior": RoiBox(corner=(5, 6, 5), size=(2, 2, 2)),
            "posterior": RoiBox(corner=(4, 4, 6), size=(2, 2, 2)),
        },
        seed=7,
    )


def make_null(top_t, cluster_sizes=None) -> NullDistribution:
    """NullDistribution from explicit per-permutation values

    Args:
        top_t: (n_perms, K) statistics, each row descending
        cluster_sizes: {p_threshold: [sizes of permutation 0, sizes of permutation 1, ...]}
    """
    top_t = np.asarray(top_t, dtype=np.float64)
    if top_t.ndim == 1:
        top_t = top_t[:, None]
    cluster_sizes = cluster_sizes or {0.01: [[] for _ in range(top_t.shape[0])]}
    sizes, offsets = {}, {}
    for p, per_perm in cluster_sizes.items():
        counts = [len(s) for s in per_perm]
        offsets[p] = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        flat = [size for s in per_perm for size in s]
        sizes[p] = np.asarray(flat, dtype=np.int64)
    return NullDistribution(top_t=top_t, p_thresholds=tuple(cluster_sizes), sizes=sizes, offsets=offsets)
