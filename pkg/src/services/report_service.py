import hashlib
import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from src.models import Provenance, RunConfig  # noqa: E402
from src.utils.correction import format_percent  # noqa: E402
from src.utils.validation import InputValidationError, VlsmError  # noqa: E402
from src.utils.volume import Volume3D, write_nifti  # noqa: E402

logger = logging.getLogger(__name__)

PROVENANCE_PREFIX = "# provenance: "
FLOAT_FORMAT = "%.10g"

# fixed ids and no timestamps keep SVG output byte-stable
plt.rcParams["svg.hashsalt"] = "vlsm-permutation"
plt.rcParams["svg.fonttype"] = "none"
SVG_METADATA = {"Date": None, "Creator": None}


def build_provenance(config: Optional[RunConfig], seed: Optional[int] = None,
                     null_hash: Optional[str] = None) -> Dict[str, Any]:
    """Provenance block echoed into every output file"""
    return Provenance(
        seed=seed if seed is not None else (config.seed if config else None),
        null_hash=null_hash,
        config=config.model_dump(mode="json") if config else {},
    ).model_dump(mode="json")


def write_table(frame: pd.DataFrame, path: Union[str, Path], provenance: Dict[str, Any]) -> Path:
    """CSV body preceded by a single `# provenance: {json}` comment line"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n", na_rep="NA")
    with open(path, "w", encoding="utf-8", newline="") as file:
        file.write(PROVENANCE_PREFIX + json.dumps(provenance, sort_keys=True) + "\n")
        file.write(body)
    return path


def read_table(path: Union[str, Path]) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    """Inverse of write_table: (frame, provenance)"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputValidationError("Table not found", path=path)
    lines = text.splitlines(keepends=True)
    provenance: Dict[str, Any] = {}
    skip = 0
    while skip < len(lines) and lines[skip].startswith("#"):
        if lines[skip].startswith(PROVENANCE_PREFIX):
            provenance = json.loads(lines[skip][len(PROVENANCE_PREFIX):])
        skip += 1
    body = "".join(lines[skip:])
    frame = pd.read_csv(io.StringIO(body), na_values=["NA"]) if body.strip() else pd.DataFrame()
    return frame, provenance


def strip_provenance(path: Union[str, Path]) -> str:
    """Table body without comment lines; used to compare runs"""
    lines = Path(path).read_text(encoding="utf-8").splitlines(keepends=True)
    return "".join(line for line in lines if not line.startswith("#"))


def file_sha256(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_error_json(error: VlsmError, out_dir: Optional[Union[str, Path]]) -> Optional[Path]:
    if out_dir is None:
        return None
    path = Path(out_dir) / "error.json"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(error.to_dict(), indent=2) + "\n", encoding="utf-8")
    except OSError:
        return None
    return path


def _save(fig, path: Path, provenance: Optional[Dict[str, Any]] = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = dict(SVG_METADATA)
    if provenance is not None:
        metadata["Description"] = json.dumps(provenance, sort_keys=True)
    fig.savefig(path, format="svg", metadata=metadata)
    plt.close(fig)
    return path


def plot_cluster_thresholds(frame: pd.DataFrame, path: Path, provenance: Optional[Dict[str, Any]] = None) -> Path:
    """Log-log cluster-size thresholds against voxel p-threshold, per variant"""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for (roi, variant), group in frame.groupby(["roi", "variant"], sort=True):
        group = group.sort_values("p_threshold")
        sizes = np.maximum(group["size_threshold"].astype(float), 0.5)
        ax.plot(group["p_threshold"], sizes, marker="o", label=f"{roi} / {variant}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("voxel-wise p-threshold")
    ax.set_ylabel("cluster size threshold (voxels)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path, provenance)


def plot_cluster_fpr(frame: pd.DataFrame, path: Path, provenance: Optional[Dict[str, Any]] = None) -> Path:
    """Held-out family-wise false-positive rate per variant"""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for (roi, variant), group in frame.groupby(["roi", "variant"], sort=True):
        group = group.sort_values("p_threshold")
        ax.plot(group["p_threshold"], 100.0 * group["fpr_held_out"], marker="o", label=f"{roi} / {variant}")
    if "binomial_high" in frame.columns and len(frame):
        ax.axhspan(100.0 * frame["binomial_low"].iloc[0], 100.0 * frame["binomial_high"].iloc[0],
                   color="0.85", zorder=0)
    ax.set_xscale("log")
    ax.set_xlabel("voxel-wise p-threshold")
    ax.set_ylabel("permutations with a larger cluster (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path, provenance)


def plot_threshold_scatter(frame: pd.DataFrame, path: Path, provenance: Optional[Dict[str, Any]] = None) -> Path:
    """t_cfwer against t_fdr with the identity line"""
    valid = frame.dropna(subset=["t_cfwer", "t_fdr"])
    valid = valid[np.isfinite(valid["t_fdr"].astype(float))]
    fig, ax = plt.subplots(figsize=(5, 5))
    for v, group in valid.groupby("v", sort=True):
        ax.scatter(group["t_cfwer"], group["t_fdr"], s=14, label=f"v={int(v)}")
    if len(valid):
        low = float(min(valid["t_cfwer"].min(), valid["t_fdr"].min()))
        high = float(max(valid["t_cfwer"].max(), valid["t_fdr"].max()))
        ax.plot([low, high], [low, high], color="black", linewidth=1)
    ax.set_xlabel("permutation (continuous FWER) critical t")
    ax.set_ylabel("FDR critical t at effective q")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path, provenance)


def plot_effective_q(frame: pd.DataFrame, path: Path, provenance: Optional[Dict[str, Any]] = None) -> Path:
    """Effective q against v on log axes"""
    valid = frame.dropna(subset=["effective_q"])
    fig, ax = plt.subplots(figsize=(6, 4.5))
    keys = [c for c in ("roi", "fraction", "repeat") if c in valid.columns]
    groups = valid.groupby(keys, sort=True) if keys else [((), valid)]
    for _, group in groups:
        group = group.sort_values("v")
        ax.plot(group["v"], group["effective_q"], color="tab:blue", alpha=0.4, marker=".")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("v")
    ax.set_ylabel("effective q")
    fig.tight_layout()
    return _save(fig, path, provenance)


def plot_comparison(frame: pd.DataFrame, path: Path, provenance: Optional[Dict[str, Any]] = None) -> Path:
    """Critical t per v for both methods (single analysis)"""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.plot(frame["v"], frame["t_cfwer"], marker="o", label="continuous FWER")
    fdr = frame.dropna(subset=["t_fdr"])
    ax.plot(fdr["v"], fdr["t_fdr"], marker="s", label="FDR at effective q")
    ax.set_xscale("log")
    ax.set_xlabel("v")
    ax.set_ylabel("critical t")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path, provenance)


PLOTS = {
    "cluster_fpr": [("cluster_thresholds.svg", plot_cluster_thresholds), ("cluster_fpr.svg", plot_cluster_fpr)],
    "method_comparison": [("threshold_scatter.svg", plot_threshold_scatter)],
    "effective_q": [("effective_q.svg", plot_effective_q)],
    "comparison": [("comparison.svg", plot_comparison), ("effective_q.svg", plot_effective_q)],
}


class ReportService:
    """Writes tables, plots, manifest and summary into one output directory"""

    def __init__(self, out_dir: Union[str, Path], provenance: Dict[str, Any]):
        self.out_dir = Path(out_dir)
        self.provenance = provenance
        self.files: List[Path] = []

    def track(self, path: Path) -> Path:
        self.files.append(path)
        return path

    def write_table(self, name: str, frame: pd.DataFrame) -> Path:
        path = write_table(frame, self.out_dir / f"{name}.csv", self.provenance)
        logger.info(f"Wrote {path}")
        return self.track(path)

    def write_volume(self, name: str, volume: Volume3D) -> Path:
        """NIfTI map plus a `<name>.json` provenance sidecar"""
        path = self.out_dir / f"{name}.nii.gz"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_nifti(volume, path)
        sidecar = self.out_dir / f"{name}.json"
        sidecar.write_text(json.dumps(self.provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.track(sidecar)
        return self.track(path)

    def write_tables(self, tables: Dict[str, pd.DataFrame]) -> None:
        for name in sorted(tables):
            self.write_table(name, tables[name])

    def write_plots(self, tables: Dict[str, pd.DataFrame]) -> None:
        for name in sorted(tables):
            frame = tables[name]
            if frame is None or frame.empty:
                continue
            for filename, plot in PLOTS.get(name, []):
                path = self.out_dir / filename
                if path in self.files:
                    continue
                try:
                    self.track(plot(frame, path, self.provenance))
                except (KeyError, ValueError) as e:
                    logger.warning(f"Skipping plot {filename}: {e}")

    def write_summary(self, tables: Dict[str, pd.DataFrame]) -> Path:
        """Markdown digest of every table"""
        lines = ["# VLSM permutation report", ""]
        config = self.provenance.get("config", {})
        lines.append(f"- seed: {self.provenance.get('seed')}")
        lines.append(f"- permutations: {config.get('n_perms')}")
        lines.append(f"- alpha: {config.get('alpha')}")
        if self.provenance.get("null_hash"):
            lines.append(f"- null cache hash: `{self.provenance['null_hash']}`")
        lines.append("")
        for name in sorted(tables):
            frame = tables[name].copy()
            if "effective_q" in frame.columns and "effective_q_percent" not in frame.columns:
                frame["effective_q_percent"] = [
                    format_percent(q) if pd.notna(q) else "n/a" for q in frame["effective_q"]
                ]
            lines.extend([f"## {name}", "", "```", frame.to_string(index=False, float_format=lambda x: f"{x:.4g}"),
                          "```", ""])
        path = self.out_dir / "summary.md"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines), encoding="utf-8")
        return self.track(path)

    def write_manifest(self, extra: Optional[Dict[str, Any]] = None) -> Path:
        """JSON manifest listing every written file with its SHA-256"""
        files = sorted(set(self.files))
        manifest = {
            "provenance": self.provenance,
            "files": [
                {"path": str(path.relative_to(self.out_dir)), "sha256": file_sha256(path)} for path in files
            ],
            **(extra or {}),
        }
        path = self.out_dir / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def load_tables(self) -> Dict[str, pd.DataFrame]:
        """Every CSV table in the output directory"""
        tables = {}
        for path in sorted(self.out_dir.glob("*.csv")):
            frame, provenance = read_table(path)
            tables[path.stem] = frame
            if provenance and not self.provenance:
                self.provenance = provenance
        if not tables:
            raise InputValidationError("No CSV tables to report on", path=self.out_dir)
        return tables
