# backend/settings.py
"""
Runtime settings read from the environment (and an optional .env file).
"""

import os
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

from backend.errors import ConfigurationError

# Mapping: Environment Key -> Settings Field
ENV_MAPPING = {
    "RESTP_LOG_LEVEL": "log_level",
    "RESTP_WORKERS": "workers",
    "RESTP_NORM_MEAN": "norm_mean",
    "RESTP_NORM_STD": "norm_std",
}


class RuntimeSettings(BaseModel):
    log_level: str = Field(default="INFO", description="Root logger level.")
    workers: int = Field(
        default=1, ge=1, description="Threads for independent repeats and one-vs-rest problems."
    )
    norm_mean: float = Field(default=0.5, description="Per-channel normalization mean.")
    norm_std: float = Field(default=0.25, gt=0, description="Per-channel normalization std.")


_cached: Optional[RuntimeSettings] = None


def get_settings(reload: bool = False) -> RuntimeSettings:
    """
    Returns the process-wide settings.
    Values come from the environment after loading .env; unset keys keep defaults.
    """
    global _cached
    if _cached is not None and not reload:
        return _cached

    load_dotenv()
    values = {}
    for env_key, field in ENV_MAPPING.items():
        if env_key in os.environ and os.environ[env_key].strip():
            values[field] = os.environ[env_key].strip()

    try:
        _cached = RuntimeSettings(**values)
    except ValidationError as e:
        raise ConfigurationError(f"invalid environment settings: {e}") from e
    return _cached
