"""Loading run configs and laying out output directories."""

import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Union

from byzantine_dsgd.models import RunConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_OUTPUT_ROOT = "runs"


def load_toml(path: Union[str, Path]) -> Dict[str, Any]:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_config(path: Union[str, Path]) -> RunConfig:
    """Parse a TOML config; unknown keys raise a ValidationError."""
    return RunConfig.parse_obj(load_toml(path))


def canonical_json(data: Dict[str, Any]) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(cfg: RunConfig) -> str:
    """First 12 hex digits of the SHA-256 of the canonical config JSON."""
    return hashlib.sha256(canonical_json(cfg.dict()).encode()).hexdigest()[:12]


def output_root(override: Optional[Path] = None) -> Path:
    if override is not None:
        return Path(override)
    return Path(os.environ.get("BDSGD_OUTPUT_ROOT", DEFAULT_OUTPUT_ROOT))


def run_dir(root: Path, cfg: RunConfig) -> Path:
    """``<root>/<config hash>-s<seed>``, created if missing."""
    path = Path(root) / f"{config_hash(cfg)}-s{cfg.seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path
