import os

from dotenv import load_dotenv

from src.models import DEFAULT_N_PERMS
from src.utils.validation import InputValidationError

load_dotenv()


def _int_env(name: str, default: int) -> int:
    value = os.getenv(name)
    if value is None or value.strip() == "":
        return default
    try:
        return int(value)
    except ValueError:
        raise InputValidationError(f"Environment variable {name} must be an integer, got {value!r}")


def env_defaults() -> dict:
    """RunConfig defaults taken from the environment (.env supported)

    Only variables that are set are returned, so model defaults apply otherwise.
    """
    defaults = {}
    if os.getenv("VLSM_WORKERS"):
        defaults["workers"] = _int_env("VLSM_WORKERS", -1)
    if os.getenv("VLSM_SEED"):
        defaults["seed"] = _int_env("VLSM_SEED", 20180827)
    if os.getenv("VLSM_PERMS"):
        defaults["n_perms"] = _int_env("VLSM_PERMS", DEFAULT_N_PERMS)
    if os.getenv("VLSM_OUTPUT_DIR"):
        defaults["out"] = os.getenv("VLSM_OUTPUT_DIR")
    return defaults


def log_level() -> str:
    return os.getenv("VLSM_LOG_LEVEL", "INFO").upper()
