from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src import __version__

DEFAULT_P_THRESHOLDS: Tuple[float, ...] = (0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001)
DEFAULT_V_LIST: Tuple[int, ...] = (1, 10, 100, 1000)
DEFAULT_N_PERMS = 1000
DEFAULT_ALPHA = 0.05

Tails = Literal["one-tailed", "two-tailed"]
ClusterVariant = Literal["all", "max"]
FdrDependency = Literal["independent", "arbitrary"]
CorrectionMethod = Literal["cluster-all", "cluster-max", "cfwer", "fdr", "all"]
Experiment = Literal["cluster-fpr", "spillover", "method-comparison", "all"]

# Conventions echoed into every output's provenance block
CONVENTIONS = {
    "percentile": "order statistic at rank ceil((1-alpha)*n)",
    "pass_criterion": "strictly greater than the critical value",
    "ties": "voxels tied with the critical value are excluded",
    "identity_permutation": "included unless exclude_identity is set",
    "t_statistic": "pooled-variance two-sample t, df = N - 2, positive = lesion worse",
}


def _check_v_list(values: List[int]) -> List[int]:
    values = [int(v) for v in values]
    if not values or any(v < 1 for v in values):
        raise ValueError("v values must be positive integers")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError("v values must be strictly increasing")
    return values


def _check_p_thresholds(values: List[float]) -> List[float]:
    values = [float(p) for p in values]
    if not values or any(not 0.0 < p < 1.0 for p in values):
        raise ValueError("p-thresholds must lie in (0, 1)")
    if any(b >= a for a, b in zip(values, values[1:])):
        raise ValueError("p-thresholds must be listed strictly decreasing (most permissive first)")
    return values


class CorrectionConfig(BaseModel):
    """Statistical settings shared by every correction method"""

    alpha: float = Field(DEFAULT_ALPHA, gt=0.0, lt=1.0, description="Family-wise level; 95th percentile at 0.05")
    v_list: List[int] = Field(default_factory=lambda: list(DEFAULT_V_LIST))
    p_threshold_list: List[float] = Field(default_factory=lambda: list(DEFAULT_P_THRESHOLDS))
    cluster_variant: ClusterVariant = "max"
    fdr_q: float = Field(0.05, gt=0.0, lt=1.0)
    fdr_dependency: FdrDependency = "independent"

    @field_validator("v_list")
    @classmethod
    def validate_v_list(cls, value):
        return _check_v_list(value)

    @field_validator("p_threshold_list")
    @classmethod
    def validate_p_thresholds(cls, value):
        return _check_p_thresholds(value)


class CorrectionResult(BaseModel):
    """Outcome of applying one correction to an observed map"""

    method: str
    parameters: Dict[str, Any] = Field(default_factory=dict)
    critical_value: Optional[float] = None
    supra_indices: List[int] = Field(default_factory=list, description="Linear grid indices of surviving voxels")
    n_supra: int = 0
    effective_q: Optional[float] = None
    provenance: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_counts(self):
        if self.n_supra != len(self.supra_indices):
            raise ValueError("n_supra must equal the size of the supra-threshold set")
        if self.effective_q is not None and self.n_supra == 0:
            raise ValueError("effective_q is undefined without supra-threshold voxels")
        return self


class ComparisonRow(BaseModel):
    """One v row of the CFWER-versus-FDR comparison table"""

    v: int
    t_cfwer: Optional[float] = None
    n_supra_cfwer: Optional[int] = None
    effective_q: Optional[float] = None
    t_fdr: Optional[float] = None
    n_supra_fdr: Optional[int] = None
    note: str = ""
    reference: bool = False


class RoiBox(BaseModel):
    """Axis-aligned ground-truth region in voxel coordinates"""

    corner: Tuple[int, int, int]
    size: Tuple[int, int, int]

    @field_validator("size")
    @classmethod
    def validate_size(cls, value):
        if any(s < 1 for s in value):
            raise ValueError("ROI box sizes must be positive")
        return value


def _default_rois() -> Dict[str, RoiBox]:
    return {
        "anterior": RoiBox(corner=(7, 18, 14), size=(4, 4, 4)),
        "posterior": RoiBox(corner=(8, 9, 16), size=(4, 4, 4)),
    }


class SyntheticSpec(BaseModel):
    """Parameters of a synthetic stroke cohort with known ground truth"""

    dims: Tuple[int, int, int] = (32, 32, 32)
    voxel_size_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_subjects: int = Field(60, ge=2)
    lesion_log_mu: float = Field(6.0, gt=0.0, description="Mean of log lesion size (voxels)")
    lesion_log_sigma: float = Field(0.6, gt=0.0, description="SD of log lesion size")
    gradient_center: Optional[Tuple[float, float, float]] = Field(
        None, description="Seed-placement centre in voxel coordinates; defaults to the envelope centre"
    )
    gradient_decay: float = Field(6.0, gt=0.0, description="Decay length (voxels) of seed-placement probability")
    envelope: Literal["left-hemisphere", "grid"] = "left-hemisphere"
    rois: Dict[str, RoiBox] = Field(default_factory=_default_rois)
    primary_roi: str = "anterior"
    noise_sd: float = Field(0.0, ge=0.0)
    seed: int = 20180827

    @model_validator(mode="after")
    def check_rois(self):
        if not self.rois:
            raise ValueError("at least one ROI is required")
        if self.primary_roi not in self.rois:
            raise ValueError(f"primary_roi '{self.primary_roi}' is not among {sorted(self.rois)}")
        for name, box in self.rois.items():
            for corner, size, dim in zip(box.corner, box.size, self.dims):
                if corner < 0 or corner + size > dim:
                    raise ValueError(f"ROI '{name}' extends outside the grid {self.dims}")
        return self


class RunConfig(BaseModel):
    """Every setting of a cli invocation; echoed into output provenance"""

    model_config = ConfigDict(extra="forbid")

    subcommand: Literal["simulate", "run", "evaluate", "report"] = "run"

    # inputs
    manifest: Optional[str] = None
    scores: Optional[str] = None
    roi: Optional[str] = None
    null_cache: Optional[str] = None
    invert_scores: bool = False
    include_reference_rows: bool = False

    # statistics
    tails: Tails = "one-tailed"
    min_lesioned: Optional[int] = Field(None, ge=1)
    min_intact: Optional[int] = Field(None, ge=0)
    connectivity: Literal[6, 18, 26] = 26
    alpha: float = Field(DEFAULT_ALPHA, gt=0.0, lt=1.0)
    v_list: List[int] = Field(default_factory=lambda: list(DEFAULT_V_LIST))
    p_threshold_list: List[float] = Field(default_factory=lambda: list(DEFAULT_P_THRESHOLDS))
    fdr_q: float = Field(0.05, gt=0.0, lt=1.0)
    fdr_dependency: FdrDependency = "independent"
    correction: CorrectionMethod = "all"
    t_clamp: Optional[float] = Field(None, gt=0.0, description="Clamp degenerate voxels to +/- this t")

    # permutations
    n_perms: int = Field(DEFAULT_N_PERMS, ge=1)
    seed: int = 20180827
    exclude_identity: bool = False
    workers: int = -1

    # evaluation
    experiment: Experiment = "all"
    fractions: List[float] = Field(default_factory=lambda: [1.0, 0.5, 0.25])
    n_repeats: int = Field(20, ge=1)
    holdout_perms: Optional[int] = Field(None, ge=1)
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)

    out: str = "vlsm_output"
    quiet: bool = False

    @field_validator("v_list")
    @classmethod
    def validate_v_list(cls, value):
        return _check_v_list(value)

    @field_validator("p_threshold_list")
    @classmethod
    def validate_p_thresholds(cls, value):
        return _check_p_thresholds(value)

    @field_validator("fractions")
    @classmethod
    def validate_fractions(cls, value):
        if not value or any(not 0.0 < f <= 1.0 for f in value):
            raise ValueError("fractions must lie in (0, 1]")
        return [float(f) for f in value]

    @field_validator("workers")
    @classmethod
    def validate_workers(cls, value):
        if value == 0 or value < -1:
            raise ValueError("workers must be -1 (all cores) or a positive count")
        return value

    def correction_config(self) -> CorrectionConfig:
        return CorrectionConfig(
            alpha=self.alpha,
            v_list=self.v_list,
            p_threshold_list=self.p_threshold_list,
            cluster_variant="all" if self.correction == "cluster-all" else "max",
            fdr_q=self.fdr_q,
            fdr_dependency=self.fdr_dependency,
        )


class Provenance(BaseModel):
    """Block embedded in every result file"""

    tool: str = "vlsm-permutation"
    version: str = __version__
    seed: Optional[int] = None
    null_hash: Optional[str] = None
    conventions: Dict[str, str] = Field(default_factory=lambda: dict(CONVENTIONS))
    config: Dict[str, Any] = Field(default_factory=dict)
