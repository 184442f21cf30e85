"""
Null distribution cache container.

Layout (format version 1, all integers little-endian):

    bytes 0-7    magic b"VLSMNULL"
    bytes 8-11   uint32 format version
    bytes 12-15  uint32 length L of the metadata block
    next L bytes UTF-8 JSON metadata (sorted keys): content_hash, config echo,
                 and an "arrays" list of {name, dtype, shape} in storage order
    remainder    the arrays, back to back, C order, in the dtypes listed
                 ("<f8" for top_t, "<i8" for offsets and sizes)

Array names: "top_t" (n_perms x K), then per p-threshold position i
"offsets_i" (n_perms + 1) and "sizes_i" (total cluster count).
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from src.utils.cohort import CohortMatrix, ScoreVector
from src.utils.nullengine import CollectSpec, NullDistribution, PermutationPlan
from src.utils.validation import NullCacheError

logger = logging.getLogger(__name__)

MAGIC = b"VLSMNULL"
FORMAT_VERSION = 1


def content_hash(cohort: CohortMatrix, scores: ScoreVector, collect: CollectSpec, plan: PermutationPlan,
                 t_clamp: Optional[float] = None) -> str:
    """SHA-256 over everything a null distribution depends on"""
    digest = hashlib.sha256()
    digest.update(json.dumps({
        "dims": list(cohort.grid.dims),
        "voxel_size_mm": list(cohort.grid.voxel_size_mm),
        "n_subjects": cohort.n_subjects,
        "collect": collect.to_dict(),
        "seed": plan.seed,
        "n_perms": plan.n_perms,
        "exclude_identity": plan.exclude_identity,
        "t_clamp": t_clamp,
    }, sort_keys=True).encode("utf-8"))
    digest.update(cohort.mask_index.astype("<i8").tobytes())
    digest.update(np.packbits(cohort.lesion_bits, axis=None).tobytes())
    digest.update(scores.values.astype("<f8").tobytes())
    return digest.hexdigest()


def save_null(null: NullDistribution, path: Union[str, Path], null_hash: str) -> None:
    """Write a null distribution to the cache container"""
    arrays = [("top_t", null.top_t.astype("<f8"))]
    for position, p in enumerate(null.p_thresholds):
        arrays.append((f"offsets_{position}", null.offsets[p].astype("<i8")))
        arrays.append((f"sizes_{position}", null.sizes[p].astype("<i8")))

    metadata = {
        "format_version": FORMAT_VERSION,
        "content_hash": null_hash,
        "config": null.config,
        "p_thresholds": list(null.p_thresholds),
        "arrays": [{"name": name, "dtype": array.dtype.str, "shape": list(array.shape)} for name, array in arrays],
    }
    block = json.dumps(metadata, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as file:
        file.write(MAGIC)
        file.write(FORMAT_VERSION.to_bytes(4, "little"))
        file.write(len(block).to_bytes(4, "little"))
        file.write(block)
        for _, array in arrays:
            file.write(np.ascontiguousarray(array).tobytes())
    logger.info(f"Cached null distribution ({null.n_perms} permutations) at {path}")


def read_metadata(raw: bytes, path: Union[str, Path]) -> Dict[str, Any]:
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise NullCacheError("Not a null cache file", path=path)
    version = int.from_bytes(raw[8:12], "little")
    if version != FORMAT_VERSION:
        raise NullCacheError(f"Unsupported null cache version {version}", path=path)
    length = int.from_bytes(raw[12:16], "little")
    try:
        return json.loads(raw[16:16 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise NullCacheError(f"Corrupt metadata block: {e}", path=path)


def load_null(path: Union[str, Path], expected_hash: Optional[str] = None) -> NullDistribution:
    """Read a cached null distribution, optionally checking its content hash

    Raises:
        NullCacheError: when the file is malformed or the hash differs
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise NullCacheError("Null cache not found", path=path)

    metadata = read_metadata(raw, path)
    if expected_hash is not None and metadata.get("content_hash") != expected_hash:
        raise NullCacheError(
            f"Null cache hash {metadata.get('content_hash')} does not match the current inputs {expected_hash}",
            path=path,
        )

    offset = 16 + int.from_bytes(raw[12:16], "little")
    arrays: Dict[str, np.ndarray] = {}
    for spec in metadata["arrays"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise NullCacheError(f"Truncated array {spec['name']}", path=path)
        arrays[spec["name"]] = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(spec["shape"])
        offset += nbytes

    p_thresholds = tuple(float(p) for p in metadata["p_thresholds"])
    return NullDistribution(
        top_t=arrays["top_t"].astype(np.float64),
        p_thresholds=p_thresholds,
        sizes={p: arrays[f"sizes_{i}"].astype(np.int64) for i, p in enumerate(p_thresholds)},
        offsets={p: arrays[f"offsets_{i}"].astype(np.int64) for i, p in enumerate(p_thresholds)},
        config=metadata["config"],
    )


def cache_hash(path: Union[str, Path]) -> str:
    path = Path(path)
    return read_metadata(path.read_bytes(), path)["content_hash"]
