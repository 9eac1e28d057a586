"""Deterministic artifact writers (CSV with provenance header, canonical JSON)."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from . import __version__


def clean(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats for JSON."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def canonical_json(obj) -> str:
    return json.dumps(clean(obj), sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:16]


def provenance(subcommand: str, chash: str, seed) -> dict:
    return {"tool": "rwre", "version": __version__, "subcommand": subcommand,
            "config_hash": chash, "master_seed": seed}


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    if x is None:
        return ""
    return str(x)


def header_lines(prov: dict) -> list:
    return [f"# {k}={prov[k]}" for k in ("tool", "version", "subcommand", "config_hash",
                                         "master_seed")]


def write_csv(path, prov: dict, columns, rows, trailer=None) -> Path:
    path = Path(path)
    lines = header_lines(prov) + [",".join(columns)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    if trailer:
        lines += [f"# {t}" for t in trailer]
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def write_json(path, prov: dict, payload: dict) -> Path:
    path = Path(path)
    doc = {"provenance": prov, **payload}
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(json.dumps(clean(doc), sort_keys=True, indent=2) + "\n")
    return path


def write_dat(path, prov: dict, xs, ys) -> Path:
    """Two-column whitespace file readable by gnuplot."""
    path = Path(path)
    lines = header_lines(prov)
    lines += [f"{fmt(x)} {fmt(y)}" for x, y in zip(xs, ys)]
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
