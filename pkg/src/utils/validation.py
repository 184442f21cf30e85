import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd

# Icons for console output
SUCCESS_ICON = "✅"
ERROR_ICON = "❌"
WARNING_ICON = "⚠️"
INFO_ICON = "ℹ️"
PENDING_ICON = "⏳"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class VlsmError(Exception):
    """Base error for the lesion-symptom mapping engine.

    Carries the process exit code the cli should use and an optional path
    naming the offending file.
    """

    exit_code = EXIT_RUNTIME

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None):
        super().__init__(message)
        self.message = message
        self.path = str(path) if path is not None else None

    def to_dict(self) -> Dict[str, Any]:
        """Machine-readable form written to stderr and error.json"""
        return {
            "error": type(self).__name__,
            "message": self.message,
            "path": self.path,
            "exit_code": self.exit_code,
        }


class InputValidationError(VlsmError):
    exit_code = EXIT_VALIDATION


class AnalysisError(VlsmError):
    exit_code = EXIT_RUNTIME


class NiftiFormatError(InputValidationError):
    pass


class CohortError(InputValidationError):
    pass


class EmptyMaskError(AnalysisError):
    pass


class DegenerateScoresError(InputValidationError):
    pass


class DegenerateVoxelError(AnalysisError):
    pass


class NullConfigurationError(AnalysisError):
    pass


class NullCacheError(AnalysisError):
    pass


def check_scores_frame(frame: pd.DataFrame, path: Union[str, Path]) -> pd.DataFrame:
    """Validate a scores table read from CSV

    Args:
        frame: Table as read by pandas
        path: Source file, used in error messages

    Returns:
        The table with `subject_id` as string and `score` as float
    """
    expected = ["subject_id", "score"]
    if list(frame.columns) != expected:
        raise InputValidationError(
            f"Scores CSV must have header 'subject_id,score', found {','.join(map(str, frame.columns))}",
            path=path,
        )
    if frame.empty:
        raise InputValidationError("Scores CSV has no rows", path=path)

    frame = frame.copy()
    frame["subject_id"] = frame["subject_id"].astype(str)
    duplicated = frame["subject_id"][frame["subject_id"].duplicated()].tolist()
    if duplicated:
        raise InputValidationError(f"Duplicate subject ids in scores: {duplicated[:5]}", path=path)

    scores = pd.to_numeric(frame["score"], errors="coerce")
    bad = frame["subject_id"][~np.isfinite(scores.to_numpy(dtype=float))]
    if len(bad):
        raise InputValidationError(f"Non-finite or non-numeric scores for subjects {bad.tolist()[:5]}", path=path)
    frame["score"] = scores.astype(float)
    return frame


def check_manifest_entries(entries: Any, path: Union[str, Path]) -> List[Dict[str, str]]:
    """Validate a cohort manifest (array of {subject_id, lesion_path})

    Relative lesion paths are resolved against the manifest's directory.
    """
    if not isinstance(entries, list) or not entries:
        raise InputValidationError("Manifest must be a non-empty JSON array", path=path)

    base = Path(path).parent
    checked = []
    seen = set()
    for position, entry in enumerate(entries):
        if not isinstance(entry, dict) or "subject_id" not in entry or "lesion_path" not in entry:
            raise InputValidationError(
                f"Manifest entry {position} must be an object with subject_id and lesion_path",
                path=path,
            )
        subject_id = str(entry["subject_id"])
        if subject_id in seen:
            raise InputValidationError(f"Duplicate subject id in manifest: {subject_id}", path=path)
        seen.add(subject_id)

        lesion_path = Path(entry["lesion_path"])
        if not lesion_path.is_absolute():
            lesion_path = base / lesion_path
        if not lesion_path.exists():
            raise InputValidationError(f"Lesion file for {subject_id} not found: {lesion_path}", path=path)
        checked.append({"subject_id": subject_id, "lesion_path": str(lesion_path)})
    return checked


def read_json_file(path: Union[str, Path]) -> Any:
    """Read a JSON document, mapping failures to InputValidationError"""
    try:
        with open(path, "r", encoding="utf-8") as file:
            return json.load(file)
    except FileNotFoundError:
        raise InputValidationError("File not found", path=path)
    except json.JSONDecodeError as e:
        raise InputValidationError(f"Invalid JSON: {e}", path=path)
