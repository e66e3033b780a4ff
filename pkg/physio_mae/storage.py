"""Dataset containers and checkpoints on disk.

A dataset directory holds ``manifest.yml``, ``signals.f32`` (little-endian
float32, ``[n][channel][time]``) and ``labels.json``. A checkpoint directory
holds ``checkpoint.yml`` (config, tensor names and shapes in storage order,
training position) and ``weights.f32`` with the tensors concatenated in
that order.
"""
import json
import logging
from collections import OrderedDict
from pathlib import Path

import numpy as np
import yaml
from semver import VersionInfo

from .config import ExperimentConfig
from .dataset import Dataset, NormalizationStats, SampleLabels
from .errors import FormatError

log = logging.getLogger(__name__)

FORMAT_VERSION = "1.0.0"
STORAGE_DTYPE = np.dtype("<f4")

DATASET_MANIFEST = "manifest.yml"
DATASET_SIGNALS = "signals.f32"
DATASET_LABELS = "labels.json"
CHECKPOINT_MANIFEST = "checkpoint.yml"
CHECKPOINT_WEIGHTS = "weights.f32"

LABEL_SCHEMA = {
    "sbp": "mmHg",
    "dbp": "mmHg",
    "map": "mmHg",
    "hypotensive": "bool (MAP < 65 mmHg)",
    "sv_proxy": "mL",
    "age_proxy": "years",
    "heart_rate": "bpm",
    "horizons": "minutes -> bool or null",
}


def check_version(found, path):
    """Accepts any manifest with the same major format version."""
    try:
        version = VersionInfo.parse(str(found))
    except ValueError:
        raise FormatError(f"{path}: invalid format version {found!r}")
    if version.major != VersionInfo.parse(FORMAT_VERSION).major:
        raise FormatError(
            f"{path}: format version {found} is not compatible with "
            f"{FORMAT_VERSION}"
        )
    return version


def _read_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"Missing manifest: {path}")
    with open(path) as f:
        manifest = yaml.safe_load(f)
    if not isinstance(manifest, dict):
        raise FormatError(f"{path}: manifest is not a mapping")
    check_version(manifest.get("version"), path)
    return manifest


def _write_yaml(path, content):
    with open(path, "w") as f:
        yaml.safe_dump(content, f, sort_keys=False)


def save_dataset(dataset, directory, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": FORMAT_VERSION,
        "fs_hz": float(dataset.fs_hz),
        "sample_seconds": float(dataset.sample_seconds),
        "channels": list(dataset.channels),
        "n_samples": len(dataset),
        "sample_len": int(dataset.sample_len),
        "dtype": STORAGE_DTYPE.str,
        "label_schema": dict(LABEL_SCHEMA),
        "sample_ids": list(dataset.sample_ids),
        "splits": list(dataset.splits),
        "normalization": (
            dataset.normalization.to_record()
            if dataset.normalization
            else None
        ),
    }
    if extra:
        manifest.update(extra)
    _write_yaml(directory / DATASET_MANIFEST, manifest)
    dataset.signals.astype(STORAGE_DTYPE).tofile(directory / DATASET_SIGNALS)
    with open(directory / DATASET_LABELS, "w") as f:
        json.dump([labels.to_record() for labels in dataset.labels], f)
    log.info("Wrote %d samples to %s", len(dataset), directory)
    return directory


def load_dataset(directory):
    directory = Path(directory)
    manifest = _read_manifest(directory / DATASET_MANIFEST)
    try:
        n = int(manifest["n_samples"])
        channels = list(manifest["channels"])
        length = int(manifest["sample_len"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{directory}: incomplete manifest ({e})")
    signals_path = directory / DATASET_SIGNALS
    if not signals_path.is_file():
        raise FormatError(f"Missing signal file: {signals_path}")
    expected = n * len(channels) * length * STORAGE_DTYPE.itemsize
    actual = signals_path.stat().st_size
    if actual != expected:
        raise FormatError(
            f"{signals_path}: {actual} bytes, expected {expected} for "
            f"{n} x {len(channels)} x {length} float32"
        )
    signals = np.fromfile(signals_path, dtype=STORAGE_DTYPE).reshape(
        n, len(channels), length
    )
    with open(directory / DATASET_LABELS) as f:
        records = json.load(f)
    if len(records) != n:
        raise FormatError(
            f"{directory}: {len(records)} label records for {n} samples"
        )
    normalization = manifest.get("normalization")
    return Dataset(
        signals=signals.astype(np.float64),
        labels=[SampleLabels.from_record(r) for r in records],
        sample_ids=list(manifest.get("sample_ids") or range(n)),
        splits=list(manifest.get("splits") or ["train"] * n),
        fs_hz=float(manifest["fs_hz"]),
        sample_seconds=float(manifest["sample_seconds"]),
        channels=tuple(channels),
        normalization=(
            NormalizationStats.from_record(normalization)
            if normalization
            else None
        ),
    )


def read_manifest(directory):
    """Manifest of a dataset or checkpoint directory."""
    directory = Path(directory)
    for name in (CHECKPOINT_MANIFEST, DATASET_MANIFEST):
        if (directory / name).is_file():
            return _read_manifest(directory / name)
    raise FormatError(f"{directory} is neither a dataset nor a checkpoint")


def save_checkpoint(
    model,
    directory,
    experiment_config,
    step=0,
    rng_state=None,
    normalization=None,
):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    manifest = {
        "version": FORMAT_VERSION,
        "model": model.descriptor(),
        "config": experiment_config.raw,
        "tensors": [
            {"name": name, "shape": list(value.shape)}
            for name, value in state.items()
        ],
        "step": int(step),
        "rng_state": dict(rng_state or {}),
        "normalization": (
            normalization.to_record() if normalization else None
        ),
    }
    _write_yaml(directory / CHECKPOINT_MANIFEST, manifest)
    blob = np.concatenate(
        [value.astype(STORAGE_DTYPE).ravel() for value in state.values()]
    )
    blob.tofile(directory / CHECKPOINT_WEIGHTS)
    log.info(
        "Saved checkpoint with %d tensors at step %d to %s",
        len(state),
        step,
        directory,
    )
    return directory


def read_weights(directory, manifest):
    path = Path(directory) / CHECKPOINT_WEIGHTS
    if not path.is_file():
        raise FormatError(f"Missing weights file: {path}")
    blob = np.fromfile(path, dtype=STORAGE_DTYPE)
    expected = sum(
        int(np.prod(t["shape"], dtype=np.int64)) for t in manifest["tensors"]
    )
    if blob.size != expected:
        raise FormatError(
            f"{path}: {blob.size} values, manifest lists {expected}"
        )
    state, offset = OrderedDict(), 0
    for tensor in manifest["tensors"]:
        shape = tuple(tensor["shape"])
        size = int(np.prod(shape, dtype=np.int64))
        state[tensor["name"]] = blob[offset : offset + size].reshape(shape)
        offset += size
    return state


def load_checkpoint(directory):
    """Rebuilds the model; returns ``(model, config, manifest)``."""
    from .model import PhysioMAE, SupervisedModel

    directory = Path(directory)
    manifest = _read_manifest(directory / CHECKPOINT_MANIFEST)
    config = ExperimentConfig(manifest.get("config") or {})
    descriptor = manifest.get("model") or {}
    normalization = manifest.get("normalization")
    normalization = (
        NormalizationStats.from_record(normalization)
        if normalization
        else None
    )
    model_config = config.with_overrides(
        {"model": {"signals": descriptor.get("signals")}}
    ).model
    kind = descriptor.get("kind", "mae")
    if kind == "mae":
        model = PhysioMAE(
            config.patch,
            config.encoder,
            config.decoder,
            model_config,
            signal_std=normalization.std if normalization else None,
            seed=config.seed,
        )
    elif kind == "supervised":
        model = SupervisedModel(
            config.patch, config.encoder, model_config, seed=config.seed
        )
    else:
        raise FormatError(f"{directory}: unknown model kind {kind!r}")
    model.load_state_dict(read_weights(directory, manifest))
    return model, config, manifest
