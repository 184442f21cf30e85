import gzip
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Tuple, Union

import nibabel as nib
import numpy as np

from src.utils.validation import InputValidationError, NiftiFormatError

logger = logging.getLogger(__name__)

NIFTI1_HEADER_SIZE = 348
NIFTI1_VOX_OFFSET = 352
NIFTI1_MAGIC = b"n+1\x00"
GZIP_MAGIC = b"\x1f\x8b"

# datatype tag -> on-disk dtype
DATATYPES = {
    "binary": np.dtype(np.uint8),
    "int16": np.dtype(np.int16),
    "float32": np.dtype(np.float32),
}
SUPPORTED_DISK_DTYPES = {np.dtype(np.uint8), np.dtype(np.int16), np.dtype(np.float32)}


class VoxelCoord(NamedTuple):
    i: int
    j: int
    k: int


@dataclass(frozen=True)
class Grid:
    """Voxel grid shared by every volume of a cohort.

    Linear voxel indices run x-fastest: index = i + nx * (j + ny * k).
    """

    dims: Tuple[int, int, int]
    voxel_size_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise InputValidationError(f"Grid dims must be three positive integers, got {self.dims}")
        if len(self.voxel_size_mm) != 3 or any(not float(s) > 0 for s in self.voxel_size_mm):
            raise InputValidationError(f"Voxel sizes must be positive, got {self.voxel_size_mm}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "voxel_size_mm", tuple(float(s) for s in self.voxel_size_mm))

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def to_linear(self, coord: VoxelCoord) -> int:
        nx, ny, nz = self.dims
        i, j, k = coord
        if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
            raise InputValidationError(f"Voxel {tuple(coord)} outside grid {self.dims}")
        return int(i + nx * (j + ny * k))

    def from_linear(self, index: int) -> VoxelCoord:
        nx, ny, _ = self.dims
        index = int(index)
        return VoxelCoord(index % nx, (index // nx) % ny, index // (nx * ny))

    def coords(self, indices: np.ndarray) -> np.ndarray:
        """(n, 3) array of voxel coordinates for linear indices"""
        return np.stack(np.unravel_index(np.asarray(indices, dtype=np.int64), self.dims, order="F"), axis=1)

    def unflatten(self, linear_values: np.ndarray) -> np.ndarray:
        return np.asarray(linear_values).reshape(self.dims, order="F")

    def flatten(self, array: np.ndarray) -> np.ndarray:
        return np.asarray(array).ravel(order="F")


@dataclass(frozen=True)
class Volume3D:
    """Immutable 3D scalar or binary volume."""

    grid: Grid
    values: np.ndarray
    datatype: str = "float32"
    affine: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.datatype not in DATATYPES:
            raise InputValidationError(f"Unsupported datatype tag: {self.datatype}")
        values = np.asarray(self.values)
        if values.size != self.grid.n_voxels:
            raise InputValidationError(
                f"Volume has {values.size} values but grid {self.grid.dims} needs {self.grid.n_voxels}"
            )
        values = values.reshape(self.grid.dims, order="F") if values.ndim != 3 else values
        if values.shape != self.grid.dims:
            raise InputValidationError(f"Value array shape {values.shape} does not match grid {self.grid.dims}")
        if self.datatype == "binary" and not np.isin(values, (0, 1)).all():
            raise InputValidationError("Binary volume contains values other than 0 and 1")
        values = np.array(values, dtype=DATATYPES[self.datatype])
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

        affine = self.affine
        if affine is None:
            affine = np.diag(list(self.grid.voxel_size_mm) + [1.0])
        affine = np.array(affine, dtype=float)
        affine.flags.writeable = False
        object.__setattr__(self, "affine", affine)

    @classmethod
    def from_linear(cls, grid: Grid, linear_values: np.ndarray, datatype: str = "float32") -> "Volume3D":
        return cls(grid=grid, values=grid.unflatten(linear_values), datatype=datatype)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.grid.dims

    @property
    def voxel_size_mm(self) -> Tuple[float, float, float]:
        return self.grid.voxel_size_mm

    def linear_values(self) -> np.ndarray:
        """Values in x-fastest linear order"""
        return self.grid.flatten(self.values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.datatype == other.datatype
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def _detect_endianness(raw: bytes, path: Union[str, Path]) -> str:
    if len(raw) < NIFTI1_HEADER_SIZE:
        raise NiftiFormatError(f"File too short for a NIfTI-1 header ({len(raw)} bytes)", path=path)
    if int.from_bytes(raw[:4], "little") == NIFTI1_HEADER_SIZE:
        return "<"
    if int.from_bytes(raw[:4], "big") == NIFTI1_HEADER_SIZE:
        return ">"
    if int.from_bytes(raw[:4], "little") == 540 or int.from_bytes(raw[:4], "big") == 540:
        raise NiftiFormatError("NIfTI-2 files are not supported", path=path)
    raise NiftiFormatError("Malformed header: sizeof_hdr is not 348", path=path)


def read_nifti(path: Union[str, Path]) -> Volume3D:
    """Read a single-file NIfTI-1 volume (.nii, optionally gzip-compressed)

    Args:
        path: File to read; gzip is detected from the leading bytes, not the name

    Returns:
        Volume3D with scl_slope/scl_inter applied when scl_slope is non-zero
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise InputValidationError("File not found", path=path)

    if raw[:2] == GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise NiftiFormatError(f"Corrupt gzip container: {e}", path=path)

    endianness = _detect_endianness(raw, path)
    if raw[344:348] != NIFTI1_MAGIC:
        raise NiftiFormatError(f"Malformed header: magic {raw[344:348]!r} is not 'n+1'", path=path)

    try:
        header = nib.Nifti1Header(raw[:NIFTI1_HEADER_SIZE], endianness=endianness, check=False)
    except Exception as e:
        raise NiftiFormatError(f"Unreadable header: {e}", path=path)

    disk_dtype = header.get_data_dtype().newbyteorder("=")
    if disk_dtype not in SUPPORTED_DISK_DTYPES:
        raise NiftiFormatError(f"Unsupported datatype {disk_dtype}; expected uint8, int16 or float32", path=path)

    shape = tuple(int(d) for d in header.get_data_shape())
    if len(shape) > 3 and all(d == 1 for d in shape[3:]):
        shape = shape[:3]
    if len(shape) < 3:
        shape = shape + (1,) * (3 - len(shape))
    if len(shape) != 3:
        raise NiftiFormatError(f"Expected a 3D volume, got shape {shape}", path=path)

    vox_offset = int(header["vox_offset"])
    expected = vox_offset + int(np.prod(shape)) * disk_dtype.itemsize
    if len(raw) < expected:
        raise NiftiFormatError(f"Truncated data section: {len(raw)} bytes, expected {expected}", path=path)

    image = nib.Nifti1Image.from_bytes(raw)
    data = np.asanyarray(image.dataobj).reshape(shape, order="F")

    slope, inter = header.get_slope_inter()
    scaled = slope is not None and float(slope) != 0.0 and (float(slope) != 1.0 or float(inter or 0.0) != 0.0)
    if scaled:
        datatype = "float32"
        data = np.asarray(data, dtype=np.float32)
    elif disk_dtype == np.uint8 and np.isin(data, (0, 1)).all():
        datatype = "binary"
    elif disk_dtype == np.float32:
        datatype = "float32"
    else:
        datatype = "int16"
        if data.max(initial=0) > np.iinfo(np.int16).max:
            datatype = "float32"
            data = data.astype(np.float32)

    zooms = tuple(float(z) for z in header.get_zooms()[:3])
    zooms = tuple(z if z > 0 else 1.0 for z in zooms)
    grid = Grid(dims=shape, voxel_size_mm=zooms)
    logger.debug(f"Read {path}: dims={shape} dtype={disk_dtype} datatype={datatype}")
    return Volume3D(grid=grid, values=data, datatype=datatype, affine=image.affine)


def _check_representable(volume: Volume3D, datatype: str, path: Union[str, Path]) -> np.ndarray:
    values = np.asarray(volume.values)
    if datatype == "binary":
        if not np.isin(values, (0, 1)).all():
            raise InputValidationError("Values are not binary; cannot write as uint8 mask", path=path)
    elif datatype == "int16":
        info = np.iinfo(np.int16)
        if not np.all(np.isfinite(values)) or not np.array_equal(values, np.round(values)):
            raise InputValidationError("Values are not integers; cannot write as int16", path=path)
        if values.min(initial=0) < info.min or values.max(initial=0) > info.max:
            raise InputValidationError("Values outside the int16 range", path=path)
    else:
        finite = values[np.isfinite(values)]
        if finite.size and np.abs(finite).max() > np.finfo(np.float32).max:
            raise InputValidationError("Values overflow float32", path=path)
    return values.astype(DATATYPES[datatype])


def write_nifti(volume: Volume3D, path: Union[str, Path], datatype: Optional[str] = None) -> None:
    """Write a volume as little-endian single-file NIfTI-1

    Args:
        volume: Volume to write
        path: Destination; a `.gz` suffix produces a gzip container with a zeroed mtime
        datatype: One of binary, int16, float32 (defaults to the volume's own tag)
    """
    path = Path(path)
    datatype = datatype or volume.datatype
    if datatype not in DATATYPES:
        raise InputValidationError(f"Unsupported datatype tag: {datatype}", path=path)
    data = _check_representable(volume, datatype, path)

    header = nib.Nifti1Header(endianness="<")
    header.set_data_dtype(DATATYPES[datatype])
    affine = np.diag(list(volume.voxel_size_mm) + [1.0])
    image = nib.Nifti1Image(data, affine, header=header)
    image.header.set_zooms(volume.voxel_size_mm)
    image.set_qform(affine, code=1)
    image.set_sform(affine, code=1)

    payload = image.to_bytes()
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as e:
        raise InputValidationError(f"Could not write NIfTI file: {e}", path=path)


def binarize(volume: Volume3D, threshold: float) -> Volume3D:
    """1 where the input exceeds threshold, else 0"""
    values = (np.asarray(volume.values) > threshold).astype(np.uint8)
    return Volume3D(grid=volume.grid, values=values, datatype="binary", affine=volume.affine)
