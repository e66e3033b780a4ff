import copy
import csv
import hashlib
from pathlib import Path

import numpy as np


def is_mlflow_enabled() -> bool:
    try:
        import mlflow  # NOQA

        return True
    except ImportError:
        return False


def merge_dicts(base, override):
    """Recursively overlays ``override`` on a deep copy of ``base``."""
    result = copy.deepcopy(base) if base else {}
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = merge_dicts(result[key], value)
        else:
            result[key] = copy.deepcopy(value)
    return result


def stable_hash(text: str) -> int:
    return int(hashlib.sha256(text.encode("utf-8")).hexdigest()[:16], 16)


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``, stable across runs."""
    material = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        material.append(
            stable_hash(str(key)) & 0xFFFFFFFF
            if not isinstance(key, (int, np.integer))
            else int(key) & 0xFFFFFFFF
        )
    return np.random.default_rng(np.random.SeedSequence(material))


def write_delimited(path, header, rows, delimiter=","):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, delimiter=delimiter)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    return path


def read_delimited(path, delimiter=","):
    with open(path, newline="") as f:
        reader = csv.reader(f, delimiter=delimiter)
        header = next(reader)
        return header, [row for row in reader]
