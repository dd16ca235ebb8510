"""Config files, deterministic CSV/manifest output, and seed derivation.

Config format: flat ``key = value`` lines; ``#`` starts a comment.  Values may
be scalars or comma-separated lists.  Command-line flags override file values.

Every run writes a manifest JSON next to its CSV carrying the resolved
parameters, the master seed, and the tool version; nothing time-dependent goes
into outputs, so identical (config, seed) reruns are byte-identical.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import __version__

__all__ = [
    "parse_config",
    "merge_config",
    "as_int",
    "as_float",
    "as_str",
    "as_int_list",
    "as_float_list",
    "as_str_list",
    "format_float",
    "write_csv",
    "write_manifest",
    "derive_seed",
]


def parse_config(path) -> dict:
    """Read a flat key-value config file."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def merge_config(file_config: dict, overrides: dict) -> dict:
    """Layer non-None override values (flags win) over file values."""
    merged = dict(file_config)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = str(value)
    return merged


def _require(config, key, default):
    if key in config:
        return config[key]
    if default is None:
        raise KeyError(f"missing required config key {key!r}")
    return default


def as_int(config, key, default=None) -> int:
    return int(_require(config, key, default))


def as_float(config, key, default=None) -> float:
    return float(_require(config, key, default))


def as_str(config, key, default=None) -> str:
    return str(_require(config, key, default))


def as_int_list(config, key, default=None) -> list[int]:
    raw = _require(config, key, default)
    if isinstance(raw, (list, tuple)):
        return [int(v) for v in raw]
    return [int(v) for v in str(raw).split(",") if v.strip()]


def as_float_list(config, key, default=None) -> list[float]:
    raw = _require(config, key, default)
    if isinstance(raw, (list, tuple)):
        return [float(v) for v in raw]
    return [float(v) for v in str(raw).split(",") if v.strip()]


def as_str_list(config, key, default=None) -> list[str]:
    raw = _require(config, key, default)
    if isinstance(raw, (list, tuple)):
        return [str(v) for v in raw]
    return [v.strip() for v in str(raw).split(",") if v.strip()]


def format_float(x) -> str:
    """Seventeen significant digits: enough to round-trip a double."""
    return f"{float(x):.17g}"


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (float, np.floating)):
        return format_float(v)
    return str(v)


def write_csv(path, header, rows) -> None:
    """Write rows with a header; floats rendered via :func:`format_float`."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def manifest_path(out_path) -> str:
    stem, _ = os.path.splitext(str(out_path))
    return stem + ".manifest.json"


def write_manifest(out_path, command: str, config: dict, seed, outputs) -> str:
    """Deterministic run manifest written beside the primary output."""
    payload = {
        "command": command,
        "config": {k: config[k] for k in sorted(config)},
        "seed": int(seed),
        "tool_version": __version__,
        "outputs": [os.path.basename(str(p)) for p in outputs],
    }
    path = manifest_path(out_path)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def derive_seed(master_seed: int, task_index: int) -> int:
    """Splittable per-task seed: ``SeedSequence(master, spawn_key=(task,))``.

    Task seeds depend only on (master, task index), so adding tasks to a run
    never perturbs existing streams.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(task_index),))
    return int(ss.generate_state(1, np.uint64)[0])
