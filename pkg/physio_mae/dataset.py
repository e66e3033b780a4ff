"""In-memory cohort of three-channel records and their labels."""
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import SIGNALS
from .errors import DataError

HYPOTENSION_MAP = 65.0


def mean_arterial_pressure(sbp, dbp):
    return dbp + (sbp - dbp) / 3.0


@dataclass
class SampleLabels:
    sbp: float
    dbp: float
    map: float
    hypotensive: bool
    sv_proxy: float
    age_proxy: float
    heart_rate: float = float("nan")
    # horizon minutes -> positive / negative / excluded (None)
    horizons: Dict[int, Optional[bool]] = field(default_factory=dict)

    @classmethod
    def from_pressures(cls, sbp, dbp, sv_proxy, age_proxy, **kwargs):
        value = mean_arterial_pressure(sbp, dbp)
        return cls(
            sbp=float(sbp),
            dbp=float(dbp),
            map=float(value),
            hypotensive=bool(value < HYPOTENSION_MAP),
            sv_proxy=float(sv_proxy),
            age_proxy=float(age_proxy),
            **kwargs,
        )

    def to_record(self):
        record = asdict(self)
        record["horizons"] = {str(k): v for k, v in self.horizons.items()}
        return record

    @classmethod
    def from_record(cls, record):
        record = dict(record)
        record["horizons"] = {
            int(k): v for k, v in (record.get("horizons") or {}).items()
        }
        return cls(**record)


@dataclass
class SignalSample:
    ecg: np.ndarray
    ppg: np.ndarray
    abp: np.ndarray
    labels: SampleLabels
    sample_id: str = ""
    split: str = "train"

    def channel(self, name):
        return getattr(self, name.lower())

    def stacked(self, signals=SIGNALS):
        return np.stack([self.channel(name) for name in signals])

    def with_channels(self, **channels):
        return replace(self, **channels)


@dataclass
class NormalizationStats:
    """Training-split min/max for ECG and ABP; PPG is scaled per sample."""

    minimum: Dict[str, float]
    maximum: Dict[str, float]
    std: Dict[str, float] = field(default_factory=dict)
    per_sample: Sequence[str] = ("PPG",)

    def __post_init__(self):
        for name, low in self.minimum.items():
            if not low < self.maximum[name]:
                raise DataError(
                    f"Degenerate normalization range for {name}: "
                    f"min {low} >= max {self.maximum[name]}"
                )

    def to_record(self):
        return {
            "minimum": dict(self.minimum),
            "maximum": dict(self.maximum),
            "std": dict(self.std),
            "per_sample": list(self.per_sample),
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            minimum={k: float(v) for k, v in record["minimum"].items()},
            maximum={k: float(v) for k, v in record["maximum"].items()},
            std={k: float(v) for k, v in record.get("std", {}).items()},
            per_sample=tuple(record.get("per_sample", ("PPG",))),
        )


@dataclass
class Dataset:
    """``signals`` has layout ``[n][channel][time]`` in ``channels`` order."""

    signals: np.ndarray
    labels: List[SampleLabels]
    sample_ids: List[str]
    splits: List[str]
    fs_hz: float = 100.0
    sample_seconds: float = 10.0
    channels: Sequence[str] = SIGNALS
    normalization: Optional[NormalizationStats] = None

    def __post_init__(self):
        n = len(self.sample_ids)
        if self.signals.ndim != 3 or self.signals.shape[0] != n:
            raise DataError(
                f"Signal array {self.signals.shape} does not match "
                f"{n} sample ids"
            )
        if len(self.labels) != n or len(self.splits) != n:
            raise DataError("labels, splits and sample ids differ in length")
        if self.signals.shape[1] != len(self.channels):
            raise DataError(
                f"Expected {len(self.channels)} channels, got "
                f"{self.signals.shape[1]}"
            )

    def __len__(self):
        return len(self.sample_ids)

    @property
    def sample_len(self):
        return self.signals.shape[2]

    def channel_index(self, name):
        return list(self.channels).index(name)

    def sample(self, index):
        row = self.signals[index]
        return SignalSample(
            ecg=row[self.channel_index("ECG")],
            ppg=row[self.channel_index("PPG")],
            abp=row[self.channel_index("ABP")],
            labels=self.labels[index],
            sample_id=self.sample_ids[index],
            split=self.splits[index],
        )

    def samples(self):
        return [self.sample(i) for i in range(len(self))]

    def subset(self, indices):
        indices = list(indices)
        return replace(
            self,
            signals=self.signals[indices],
            labels=[self.labels[i] for i in indices],
            sample_ids=[self.sample_ids[i] for i in indices],
            splits=[self.splits[i] for i in indices],
        )

    def split(self, name):
        return self.subset(
            [i for i, split in enumerate(self.splits) if split == name]
        )

    def label_array(self, name):
        return np.array(
            [getattr(labels, name) for labels in self.labels], dtype=float
        )

    def channel_array(self, signals=SIGNALS):
        return self.signals[:, [self.channel_index(s) for s in signals], :]

    @classmethod
    def from_samples(cls, samples, **kwargs):
        samples = list(samples)
        if not samples:
            raise DataError("Cannot build a dataset from zero samples")
        signals = np.stack([s.stacked() for s in samples])
        return cls(
            signals=signals,
            labels=[s.labels for s in samples],
            sample_ids=[s.sample_id for s in samples],
            splits=[s.split for s in samples],
            **kwargs,
        )
