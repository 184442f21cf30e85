import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed, effective_n_jobs
from tqdm import tqdm

from src.utils.cluster import cluster_sizes
from src.utils.cohort import CohortMatrix, ScoreVector
from src.utils.validation import (
    DegenerateScoresError,
    InputValidationError,
    NullConfigurationError,
)
from src.utils.voxelstats import TMapComputer, np_statistic, p_threshold_to_t

logger = logging.getLogger(__name__)

SEED_MASK = (1 << 64) - 1
DEFAULT_K = 1000


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for a named sub-stream (repeat, fraction, subject, ...)"""
    stream = np.random.SeedSequence(entropy=int(seed) & SEED_MASK, spawn_key=tuple(int(k) for k in keys))
    return int(stream.generate_state(1, dtype=np.uint64)[0])


def permutation_order(seed: int, index: int, n_subjects: int, exclude_identity: bool = False) -> np.ndarray:
    """Subject order number `index` of the plan seeded by `seed`

    Each order comes from its own spawned stream, so it depends on
    (seed, index) alone and can be generated by any worker in any order.

    Args:
        seed: Plan seed
        index: Permutation index within the plan
        n_subjects: Length of the order
        exclude_identity: Redraw from the same stream while the order is the identity

    Returns:
        Permutation of range(n_subjects)
    """
    stream = np.random.SeedSequence(entropy=int(seed) & SEED_MASK, spawn_key=(int(index),))
    rng = np.random.default_rng(stream)
    order = rng.permutation(n_subjects)
    if exclude_identity and n_subjects > 1:
        identity = np.arange(n_subjects)
        while np.array_equal(order, identity):
            order = rng.permutation(n_subjects)
    return order


@dataclass(frozen=True)
class PermutationPlan:
    seed: int
    n_perms: int
    n_subjects: int
    exclude_identity: bool = False
    orders: np.ndarray = field(default=None, repr=False)

    def order(self, index: int) -> np.ndarray:
        return self.orders[index]


def generate_permutations(n_subjects: int, n_perms: int, seed: int,
                          exclude_identity: bool = False) -> PermutationPlan:
    """Independent uniform shuffles (duplicates allowed, identity included by default)

    Args:
        n_subjects: Cohort size
        n_perms: Number of orders to draw
        seed: Plan seed; a longer plan with the same seed extends a shorter one
        exclude_identity: Never emit the identity order (needs n_subjects > 1)

    Returns:
        PermutationPlan with a read-only (n_perms, n_subjects) order array
    """
    if n_subjects < 1:
        raise InputValidationError("n_subjects must be >= 1")
    if n_perms < 1:
        raise InputValidationError("n_perms must be >= 1")
    orders = np.empty((n_perms, n_subjects), dtype=np.int64)
    for index in range(n_perms):
        orders[index] = permutation_order(seed, index, n_subjects, exclude_identity)
    orders.flags.writeable = False
    return PermutationPlan(
        seed=int(seed),
        n_perms=int(n_perms),
        n_subjects=int(n_subjects),
        exclude_identity=exclude_identity,
        orders=orders,
    )


@dataclass(frozen=True)
class CollectSpec:
    """What each permutation contributes to the null distribution"""

    k: int
    p_thresholds: Tuple[float, ...]
    tails: str = "one-tailed"
    connectivity: int = 26

    def __post_init__(self):
        object.__setattr__(self, "p_thresholds", tuple(float(p) for p in self.p_thresholds))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k": int(self.k),
            "p_thresholds": list(self.p_thresholds),
            "tails": self.tails,
            "connectivity": int(self.connectivity),
        }


@dataclass(frozen=True)
class NullRecord:
    perm_index: int
    top_t: np.ndarray
    cluster_sizes: Dict[float, np.ndarray]
    max_cluster_size: Dict[float, int]


@dataclass(frozen=True)
class NullDistribution:
    """Per-permutation summaries stored column-wise and indexed by permutation.

    `top_t[i]` holds the K largest statistics of permutation i (descending);
    cluster sizes for threshold p are `sizes[p][offsets[p][i]:offsets[p][i + 1]]`.
    """

    top_t: np.ndarray
    p_thresholds: Tuple[float, ...]
    sizes: Dict[float, np.ndarray]
    offsets: Dict[float, np.ndarray]
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_perms(self) -> int:
        return int(self.top_t.shape[0])

    @property
    def k(self) -> int:
        return int(self.top_t.shape[1])

    def _key(self, p_threshold: float) -> float:
        for p in self.p_thresholds:
            if np.isclose(p, p_threshold, rtol=1e-12, atol=0.0):
                return p
        raise NullConfigurationError(
            f"p-threshold {p_threshold} was not collected; available {list(self.p_thresholds)}"
        )

    def cluster_sizes_for(self, p_threshold: float, perm_index: int) -> np.ndarray:
        key = self._key(p_threshold)
        offsets = self.offsets[key]
        return self.sizes[key][offsets[perm_index]:offsets[perm_index + 1]]

    def pooled_sizes(self, p_threshold: float) -> np.ndarray:
        """Every cluster size from every permutation"""
        return self.sizes[self._key(p_threshold)]

    def max_sizes(self, p_threshold: float) -> np.ndarray:
        """Largest cluster per permutation (0 when a permutation has none)"""
        key = self._key(p_threshold)
        offsets = self.offsets[key]
        sizes = self.sizes[key]
        maxima = np.zeros(self.n_perms, dtype=np.int64)
        counts = np.diff(offsets)
        has = counts > 0
        if has.any():
            maxima[has] = np.maximum.reduceat(sizes, offsets[:-1][has])
        return maxima

    def kth_values(self, v: int) -> np.ndarray:
        """The v-th largest statistic of every permutation"""
        if not 1 <= v <= self.k:
            raise NullConfigurationError(f"v={v} exceeds the {self.k} statistics collected per permutation")
        return self.top_t[:, v - 1]

    def record(self, perm_index: int) -> NullRecord:
        sizes = {p: self.cluster_sizes_for(p, perm_index) for p in self.p_thresholds}
        return NullRecord(
            perm_index=perm_index,
            top_t=self.top_t[perm_index],
            cluster_sizes=sizes,
            max_cluster_size={p: int(s.max()) if s.size else 0 for p, s in sizes.items()},
        )

    def records(self) -> Iterator[NullRecord]:
        for index in range(self.n_perms):
            yield self.record(index)

    def __len__(self) -> int:
        return self.n_perms


def kth_largest(values: Sequence[float], k: int) -> float:
    """k-th largest value, duplicates counted with multiplicity

    Raises:
        ValueError: k outside [1, len(values)]
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if not 1 <= k <= values.size:
        raise ValueError(f"k must lie in [1, {values.size}], got {k}")
    return float(np.partition(values, values.size - k)[values.size - k])


def top_k_descending(values: np.ndarray, k: int) -> np.ndarray:
    n = values.size
    return np.sort(np.partition(values, n - k)[n - k:])[::-1]


def default_k(v_list: Sequence[int], n_voxels: int) -> int:
    """Largest requested v (at least 1000 when unspecified), capped at the mask size"""
    largest = max(v_list) if v_list else DEFAULT_K
    return int(min(largest, n_voxels))


def _run_chunk(cohort: CohortMatrix, score_values: np.ndarray, orders: np.ndarray, collect: CollectSpec,
               cutoffs: Sequence[float], t_clamp: Optional[float]) -> Tuple[np.ndarray, List[List[np.ndarray]]]:
    computer = TMapComputer(cohort, t_clamp=t_clamp)
    top = np.empty((len(orders), collect.k), dtype=np.float64)
    sizes: List[List[np.ndarray]] = [[] for _ in cutoffs]
    for row, order in enumerate(orders):
        stat = np_statistic(computer.compute(score_values[order]), collect.tails)
        top[row] = top_k_descending(stat, collect.k)
        for position, cutoff in enumerate(cutoffs):
            sizes[position].append(cluster_sizes(stat > cutoff, cohort.grid, cohort.mask_index, collect.connectivity))
    return top, sizes


def run_permutation_pass(cohort: CohortMatrix, scores: ScoreVector, plan: PermutationPlan, collect: CollectSpec,
                         workers: int = 1, t_clamp: Optional[float] = None,
                         show_progress: bool = True) -> NullDistribution:
    """Relabel scores by every planned order and collect top-K t and cluster sizes

    One pass serves every p-threshold and every v. Permutations are split into
    contiguous chunks that workers evaluate independently; results are placed
    by permutation index, so the output does not depend on `workers`.

    Args:
        cohort: Masked cohort
        scores: Observed scores aligned to cohort rows
        plan: Permutation plan for this cohort size
        collect: K, p-thresholds, tails and connectivity to record
        workers: joblib worker count (-1 for all cores)
        t_clamp: Clamp value for zero-variance voxels (None raises)
        show_progress: Show a tqdm bar for sequential runs

    Returns:
        NullDistribution with one record per planned permutation
    """
    if plan.n_subjects != cohort.n_subjects:
        raise NullConfigurationError(f"Plan is for {plan.n_subjects} subjects, cohort has {cohort.n_subjects}")
    if len(scores) != cohort.n_subjects:
        raise NullConfigurationError("Scores and cohort disagree on subject count")
    if np.all(scores.values == scores.values[0]):
        raise DegenerateScoresError("All scores are identical")
    if not 1 <= collect.k <= cohort.n_voxels:
        raise NullConfigurationError(f"K={collect.k} must lie in [1, {cohort.n_voxels}] (mask size)")
    if not collect.p_thresholds or any(not 0.0 < p < 1.0 for p in collect.p_thresholds):
        raise NullConfigurationError("p-threshold list must be non-empty with values in (0, 1)")

    df = cohort.n_subjects - 2
    cutoffs = [p_threshold_to_t(p, df, collect.tails) for p in collect.p_thresholds]
    n_jobs = effective_n_jobs(workers)
    n_chunks = max(1, min(plan.n_perms, n_jobs * 4 if n_jobs > 1 else int(np.ceil(plan.n_perms / 25))))
    bounds = np.linspace(0, plan.n_perms, n_chunks + 1).astype(int)
    chunks = [(start, stop) for start, stop in zip(bounds[:-1], bounds[1:]) if stop > start]
    score_values = np.asarray(scores.values)

    logger.info(
        f"Permutation pass: {plan.n_perms} permutations, K={collect.k}, "
        f"{len(collect.p_thresholds)} p-thresholds, {len(chunks)} chunks on {n_jobs} worker(s)"
    )
    if n_jobs == 1:
        iterator = tqdm(chunks, desc="Permutations", unit="chunk", disable=not show_progress)
        results = [
            _run_chunk(cohort, score_values, plan.orders[start:stop], collect, cutoffs, t_clamp)
            for start, stop in iterator
        ]
    else:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_run_chunk)(cohort, score_values, plan.orders[start:stop], collect, cutoffs, t_clamp)
            for start, stop in chunks
        )

    top_t = np.vstack([top for top, _ in results])
    sizes: Dict[float, np.ndarray] = {}
    offsets: Dict[float, np.ndarray] = {}
    for position, p in enumerate(collect.p_thresholds):
        per_perm = [s for _, chunk_sizes in results for s in chunk_sizes[position]]
        counts = np.array([s.size for s in per_perm], dtype=np.int64)
        offsets[p] = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        sizes[p] = np.concatenate(per_perm).astype(np.int64) if counts.sum() else np.zeros(0, dtype=np.int64)

    config = {
        **collect.to_dict(),
        "seed": plan.seed,
        "n_perms": plan.n_perms,
        "exclude_identity": plan.exclude_identity,
        "df": df,
        "t_cutoffs": [float(c) for c in cutoffs],
        "t_clamp": t_clamp,
    }
    return NullDistribution(
        top_t=top_t,
        p_thresholds=collect.p_thresholds,
        sizes=sizes,
        offsets=offsets,
        config=config,
    )
