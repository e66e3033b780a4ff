import enum
import logging
from dataclasses import dataclass, replace
from itertools import combinations
from typing import List, Optional

import numpy as np
from scipy.signal import butter, filtfilt, find_peaks

from .dataset import NormalizationStats
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

MIN_PEAK_DISTANCE = 0.25
PROMINENCE_IQR_FACTOR = 0.3
HEIGHT_FRACTION = 0.5


class QCReason(str, enum.Enum):
    OK = "ok"
    HR_OUT_OF_RANGE = "hr_out_of_range"
    PULSE_PRESSURE_OUT_OF_RANGE = "pulse_pressure_out_of_range"
    HR_DISAGREEMENT = "hr_disagreement"
    BEAT_CORRELATION_FAIL = "beat_correlation_fail"
    DEGENERATE_CHANNEL = "degenerate_channel"


@dataclass(frozen=True)
class QCDecision:
    accepted: bool
    reason: QCReason
    detail: str = ""

    def __post_init__(self):
        if self.accepted != (self.reason == QCReason.OK):
            raise ValueError("QCDecision.accepted must match reason == ok")

    @classmethod
    def ok(cls):
        return cls(True, QCReason.OK)

    @classmethod
    def reject(cls, reason, detail=""):
        return cls(False, reason, detail)


def bandpass(signal, lo_hz, hi_hz, fs_hz, order=4):
    """Zero-phase (forward-backward) Butterworth bandpass."""
    nyquist = 0.5 * fs_hz
    if not 0 < lo_hz < hi_hz < nyquist:
        raise ConfigError(
            f"Invalid band [{lo_hz}, {hi_hz}] Hz for fs={fs_hz} Hz"
        )
    b, a = butter(order, [lo_hz / nyquist, hi_hz / nyquist], btype="band")
    return filtfilt(b, a, np.asarray(signal, dtype=float))


def detect_peaks(signal, fs_hz):
    """Beat peaks: prominence above ``0.3 x IQR``, height in the upper half
    of the median-to-max range and at least 0.25 s apart."""
    x = np.asarray(signal, dtype=float)
    if x.size == 0 or np.ptp(x) < 1e-12:
        return np.array([], dtype=int)
    q75, q25 = np.percentile(x, [75, 25])
    median = np.median(x)
    height = median + HEIGHT_FRACTION * (x.max() - median)
    peaks, _ = find_peaks(
        x,
        prominence=max(PROMINENCE_IQR_FACTOR * (q75 - q25), 1e-12),
        height=height,
        distance=max(1, int(round(MIN_PEAK_DISTANCE * fs_hz))),
    )
    return peaks


def estimate_hr(signal, fs_hz) -> Optional[float]:
    """Heart rate in bpm from the median inter-peak interval.

    Returns ``None`` when fewer than two peaks are found.
    """
    if len(signal) < 2 * fs_hz:
        raise DataError(
            f"Need at least 2 s of data to estimate HR, got {len(signal)}"
        )
    peaks = detect_peaks(signal, fs_hz)
    if peaks.size < 2:
        return None
    return float(60.0 * fs_hz / np.median(np.diff(peaks)))


def detect_onsets(signal, fs_hz, search_seconds=0.4):
    """Pulse feet: the minimum in the window preceding each peak."""
    x = np.asarray(signal, dtype=float)
    window = int(round(search_seconds * fs_hz))
    onsets = []
    for peak in detect_peaks(x, fs_hz):
        start = peak - window
        if start < 0:
            continue
        onsets.append(start + int(np.argmin(x[start : peak + 1])))
    return np.array(onsets, dtype=int)


def pulse_pressure(abp, fs_hz) -> Optional[float]:
    peaks = detect_peaks(abp, fs_hz)
    if peaks.size < 2:
        return None
    troughs = [
        np.min(abp[left:right]) for left, right in zip(peaks[:-1], peaks[1:])
    ]
    return float(np.median(abp[peaks]) - np.median(troughs))


def beat_correlations(signal, fs_hz) -> np.ndarray:
    """Correlation of each peak-centred beat with the average beat."""
    x = np.asarray(signal, dtype=float)
    peaks = detect_peaks(x, fs_hz)
    if peaks.size < 3:
        return np.array([])
    width = int(np.median(np.diff(peaks)))
    half = width // 2
    beats = np.array(
        [
            x[p - half : p - half + width]
            for p in peaks
            if p - half >= 0 and p - half + width <= x.size
        ]
    )
    if len(beats) < 2:
        return np.array([])
    template = beats.mean(axis=0)
    return np.array([np.corrcoef(beat, template)[0, 1] for beat in beats])


def filter_sample(sample, preprocess_config, fs_hz):
    """ECG and PPG are bandpassed; ABP is left untouched."""
    order = preprocess_config.filter_order
    ecg = bandpass(sample.ecg, *preprocess_config.ecg_band, fs_hz, order)
    ppg = bandpass(sample.ppg, *preprocess_config.ppg_band, fs_hz, order)
    return sample.with_channels(ecg=ecg, ppg=ppg)


def qc_sample(sample, preprocess_config, fs_hz) -> QCDecision:
    """Quality gates in order: HR range, pulse pressure, HR agreement, beat
    morphology."""
    low, high = preprocess_config.hr_range
    rates = {}
    for name in ("ECG", "PPG", "ABP"):
        rate = estimate_hr(sample.channel(name), fs_hz)
        if rate is None or not low <= rate <= high:
            return QCDecision.reject(
                QCReason.HR_OUT_OF_RANGE, f"{name} HR {rate}"
            )
        rates[name] = rate

    pp_low, pp_high = preprocess_config.pulse_pressure_range
    pressure = pulse_pressure(sample.abp, fs_hz)
    if pressure is None or not pp_low <= pressure <= pp_high:
        return QCDecision.reject(
            QCReason.PULSE_PRESSURE_OUT_OF_RANGE, f"pulse pressure {pressure}"
        )

    disagreement = max(
        abs(rates[a] - rates[b]) for a, b in combinations(rates, 2)
    )
    if disagreement > preprocess_config.max_hr_disagreement:
        return QCDecision.reject(
            QCReason.HR_DISAGREEMENT, f"HR spread {disagreement:.1f} bpm"
        )

    threshold = preprocess_config.beat_correlation
    for name in ("ECG", "PPG", "ABP"):
        correlations = beat_correlations(sample.channel(name), fs_hz)
        fraction = (
            float(np.mean(correlations >= threshold))
            if correlations.size
            else 0.0
        )
        if not fraction > preprocess_config.beat_fraction:
            return QCDecision.reject(
                QCReason.BEAT_CORRELATION_FAIL,
                f"{name}: {fraction:.2f} of beats correlate >= {threshold}",
            )
    return QCDecision.ok()


def fit_normalization(train_dataset) -> NormalizationStats:
    """Min/max of ECG and ABP over the training split, plus the standard
    deviation of every normalized channel."""
    if len(train_dataset) == 0:
        raise DataError("Cannot fit normalization on an empty training split")
    minimum, maximum = {}, {}
    for name in ("ECG", "ABP"):
        values = train_dataset.signals[:, train_dataset.channel_index(name)]
        minimum[name] = float(values.min())
        maximum[name] = float(values.max())
    stats = NormalizationStats(minimum, maximum)
    normalized = [
        apply_normalization(s, stats) for s in train_dataset.samples()
    ]
    for name in ("ECG", "PPG", "ABP"):
        stats.std[name] = float(
            np.std(np.stack([s.channel(name) for s in normalized]))
        )
    return stats


def _min_max(x, low, high):
    if not high > low:
        raise DataError(f"Degenerate channel: min {low} == max {high}")
    return (x - low) / (high - low)


def apply_normalization(sample, stats):
    channels = {}
    for name in ("ECG", "PPG", "ABP"):
        x = sample.channel(name)
        if name in stats.per_sample:
            low, high = float(x.min()), float(x.max())
        else:
            low, high = stats.minimum[name], stats.maximum[name]
        try:
            channels[name.lower()] = _min_max(x, low, high)
        except DataError as e:
            raise DataError(f"{sample.sample_id} {name}: {e}")
    return sample.with_channels(**channels)


def denormalize(x, stats, name, low=None, high=None):
    """Inverse of ``apply_normalization``; per-sample channels need the
    original ``low`` / ``high``."""
    if name in stats.per_sample:
        if low is None or high is None:
            raise DataError(f"{name} is normalized per sample; pass low/high")
    else:
        low, high = stats.minimum[name], stats.maximum[name]
    return np.asarray(x) * (high - low) + low


@dataclass
class PreprocessResult:
    dataset: object
    decisions: List[tuple]

    @property
    def rejection_counts(self):
        counts = {}
        for _, decision in self.decisions:
            counts[decision.reason.value] = (
                counts.get(decision.reason.value, 0) + 1
            )
        return counts

    def report_rows(self):
        return [
            (sample_id, decision.reason.value)
            for sample_id, decision in self.decisions
        ]


def preprocess_dataset(dataset, preprocess_config) -> PreprocessResult:
    """Filters, gates and normalizes a cohort.

    Quality control sees the filtered channels. Normalization statistics
    come from the accepted training samples only.
    """
    fs_hz = dataset.fs_hz
    decisions, kept = [], []
    for sample in dataset.samples():
        filtered = filter_sample(sample, preprocess_config, fs_hz)
        decision = qc_sample(filtered, preprocess_config, fs_hz)
        if decision.accepted and np.ptp(filtered.ppg) <= 0:
            decision = QCDecision.reject(
                QCReason.DEGENERATE_CHANNEL, "flat PPG"
            )
        decisions.append((sample.sample_id, decision))
        if decision.accepted:
            kept.append(filtered)
    if not kept:
        raise DataError("Every sample was rejected by quality control")

    accepted = dataset.from_samples(
        kept, fs_hz=dataset.fs_hz, sample_seconds=dataset.sample_seconds
    )
    train = accepted.split("train")
    stats = fit_normalization(train if len(train) else accepted)
    normalized = []
    for sample in accepted.samples():
        try:
            normalized.append(apply_normalization(sample, stats))
        except DataError as e:
            log.warning("Dropping sample after normalization: %s", e)
            index = [sid for sid, _ in decisions].index(sample.sample_id)
            decisions[index] = (
                sample.sample_id,
                QCDecision.reject(QCReason.DEGENERATE_CHANNEL, str(e)),
            )
    result = replace(
        accepted.from_samples(
            normalized,
            fs_hz=dataset.fs_hz,
            sample_seconds=dataset.sample_seconds,
        ),
        normalization=stats,
    )
    outcome = PreprocessResult(result, decisions)
    log.info(
        "Quality control kept %d of %d samples: %s",
        len(result),
        len(dataset),
        outcome.rejection_counts,
    )
    return outcome
