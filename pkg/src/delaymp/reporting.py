"""Deterministic CSV/JSON emission with a provenance manifest.

Reruns with the same config and seed must reproduce every output byte for
byte, so files carry no timestamps and floats are written with shortest
round-trip formatting.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import scipy

from . import __version__


def fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    lines += [",".join(fmt(cell) for cell in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _jsonable(obj):
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def config_digest(config_dict: dict) -> str:
    canonical = json.dumps(_jsonable(config_dict), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_manifest(outdir: Path, config_dict: dict) -> Path:
    manifest = {
        "config": _jsonable(config_dict),
        "config_sha256": config_digest(config_dict),
        "seed": config_dict.get("seed"),
        "versions": {
            "delaymp": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    return write_json(outdir / "manifest.json", manifest)
