from __future__ import annotations

import json
import math
import platform
import sys
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import numpy as np

STAMP_PACKAGES = ("numpy", "scipy", "pandas", "tqdm")


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def instance_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for (seed, keys...); any schedule sees the same draws."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)])


def package_versions(names: Iterable[str] = STAMP_PACKAGES) -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in names:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "missing"
    return versions


def write_stamp(
    out_dir: Path,
    *,
    command: str,
    arguments: Dict[str, Any],
    seed: Optional[int],
    config: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write stamp.json (command, args, seed, config, versions) beside outputs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = {
        "command": command,
        "arguments": {key: _jsonable(value) for key, value in sorted(arguments.items())},
        "seed": seed,
        "config": config or {},
        "argv": sys.argv[1:],
        "versions": package_versions(),
    }
    path = out_dir / "stamp.json"
    with path.open("w", encoding="utf-8") as fh:
        json.dump(stamp, fh, indent=2, sort_keys=True)
    return path


def _jsonable(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    return value
