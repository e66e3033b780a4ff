"""Synthetic ECG/PPG/ABP triplets driven by one shared beat train.

The ECG is a sum of Gaussian P, Q, R, S and T deflections per beat. PPG and
ABP are two-lobe pulses (systolic lobe plus dicrotic lobe) starting at fixed
lags after each R peak. In the PPG, age widens the systolic lobe and damps
the dicrotic lobe, while mean pressure sets how late the dicrotic lobe
arrives, so both leave separate traces in the non-invasive channels.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np

from .dataset import Dataset, SampleLabels, SignalSample
from .errors import ConfigError
from .utils import derive_rng, stable_hash

log = logging.getLogger(__name__)

PPG_LAG = 0.2
ABP_LAG = 0.15
TRAIN_FRACTION = 80

# (offset s, amplitude mV, width s); T offset scales with sqrt(RR)
ECG_WAVES = {
    "P": (-0.16, 0.12, 0.025),
    "Q": (-0.025, -0.12, 0.010),
    "R": (0.0, 1.0, 0.011),
    "S": (0.028, -0.22, 0.011),
    "T": (0.26, 0.30, 0.045),
}


@dataclass(frozen=True)
class HemodynamicLatent:
    heart_rate: float
    hr_variability: float
    sbp: float
    dbp: float
    sv_proxy: float
    age_proxy: float
    noise_level: float
    beat_phase: float = 0.0

    def __post_init__(self):
        if not 40.0 <= self.heart_rate <= 220.0:
            raise ConfigError(
                f"heart_rate {self.heart_rate} outside [40, 220] bpm"
            )
        if not self.sbp > self.dbp:
            raise ConfigError(f"sbp {self.sbp} must exceed dbp {self.dbp}")
        if self.sbp - self.dbp < 20.0 - 1e-9:
            raise ConfigError(
                f"pulse pressure {self.sbp - self.dbp:.1f} below 20 mmHg"
            )
        if self.noise_level < 0 or self.hr_variability < 0:
            raise ConfigError("noise_level and hr_variability must be >= 0")

    @property
    def pulse_pressure(self):
        return self.sbp - self.dbp

    @property
    def map(self):
        return self.dbp + self.pulse_pressure / 3.0

    @property
    def age_term(self):
        return float(np.clip((self.age_proxy - 20.0) / 65.0, 0.0, 1.0))

    @property
    def pressure_term(self):
        return float(np.clip((self.map - 55.0) / 65.0, 0.0, 1.0))

    @property
    def stiffness(self):
        """Unitless vascular stiffness in [0, 1]."""
        return 0.5 * self.age_term + 0.5 * self.pressure_term

    @staticmethod
    def compliance(age_proxy):
        """Arterial compliance in mL/mmHg, falling with age."""
        return max(0.5, 1.6 - 0.01 * age_proxy)

    @classmethod
    def from_drivers(
        cls,
        heart_rate,
        dbp,
        sv_proxy,
        age_proxy,
        hr_variability=1.0,
        noise_level=0.01,
        beat_phase=0.0,
    ):
        sbp = dbp + sv_proxy / cls.compliance(age_proxy)
        return cls(
            heart_rate=heart_rate,
            hr_variability=hr_variability,
            sbp=sbp,
            dbp=dbp,
            sv_proxy=sv_proxy,
            age_proxy=age_proxy,
            noise_level=noise_level,
            beat_phase=beat_phase,
        )

    def with_stroke_volume(self, sv_proxy):
        sbp = self.dbp + sv_proxy / self.compliance(self.age_proxy)
        return replace(self, sv_proxy=sv_proxy, sbp=sbp)


def beat_times(latent, duration, rng):
    """R-peak times covering ``[-2, duration + 1]`` seconds."""
    times = [-2.0 - latent.beat_phase]
    intervals = []
    while times[-1] < duration + 1.0:
        rate = rng.normal(latent.heart_rate, latent.hr_variability)
        interval = 60.0 / float(np.clip(rate, 30.0, 240.0))
        intervals.append(interval)
        times.append(times[-1] + interval)
    intervals.append(intervals[-1])
    return np.array(times), np.array(intervals)


def _lobe(tau, peak, order):
    """Gamma-shaped lobe: zero at ``tau <= 0``, maximum 1 at ``peak``."""
    x = np.clip(tau, 0.0, None) / peak
    return np.where(tau > 0, x ** order * np.exp(order * (1.0 - x)), 0.0)


def synth_ecg(t, r_times, intervals):
    ecg = np.zeros_like(t)
    for r, rr in zip(r_times, intervals):
        for name, (offset, amplitude, width) in ECG_WAVES.items():
            if name == "T":
                offset = offset * np.sqrt(rr)
            shape = np.exp(-((t - r - offset) ** 2) / (2 * width ** 2))
            ecg += amplitude * shape
    return ecg


def _pulse_train(t, onsets, intervals, shape):
    index = np.searchsorted(onsets, t, side="right") - 1
    tau = t - onsets[index]
    scale = np.clip(np.sqrt(intervals[index] / 0.8), 0.7, 1.15)
    return shape(tau, scale)


def synth_ppg(t, r_times, intervals, latent):
    age = latent.age_term
    pp_term = (latent.pulse_pressure - 20.0) / 80.0
    systolic_peak = 0.13 + 0.05 * (1.0 - age) + 0.02 * pp_term
    dicrotic_gain = 0.45 * (1.0 - 0.7 * age)
    # low mean pressure delays the reflected wave
    delay = 0.04 + 0.06 * (1.0 - latent.pressure_term)

    def shape(tau, scale):
        systolic = _lobe(tau, systolic_peak * scale, 3.0)
        dicrotic_start = (systolic_peak + delay) * scale
        dicrotic = dicrotic_gain * _lobe(
            tau - dicrotic_start, 0.08 * scale, 2.0
        )
        return systolic + dicrotic

    raw = _pulse_train(t, r_times + PPG_LAG, intervals, shape)
    return raw * (0.5 + latent.sv_proxy / 120.0)


def synth_abp(t, r_times, intervals, latent):
    stiffness = latent.stiffness
    systolic_peak = 0.09 + 0.04 * (1.0 - stiffness)
    dicrotic_gain = 0.35 * (1.0 - 0.6 * stiffness)

    def shape(tau, scale):
        systolic = _lobe(tau, systolic_peak * scale, 3.0)
        dicrotic_start = (systolic_peak + 0.08) * scale
        dicrotic = dicrotic_gain * _lobe(
            tau - dicrotic_start, 0.06 * scale, 2.0
        )
        return systolic + dicrotic

    raw = _pulse_train(t, r_times + ABP_LAG, intervals, shape)
    span = raw.max() - raw.min()
    unit = (raw - raw.min()) / span if span > 0 else np.zeros_like(raw)
    return latent.dbp + latent.pulse_pressure * unit


def synth_sample(
    latent, seed, fs_hz=100.0, sample_seconds=10.0, sample_id="", split="train"
):
    rng = np.random.default_rng(seed)
    n = int(round(fs_hz * sample_seconds))
    t = np.arange(n) / fs_hz
    r_times, intervals = beat_times(latent, sample_seconds, rng)

    ecg = synth_ecg(t, r_times, intervals)
    ppg = synth_ppg(t, r_times, intervals, latent)
    abp = synth_abp(t, r_times, intervals, latent)
    if latent.noise_level > 0:
        ecg = ecg + rng.normal(0.0, latent.noise_level, n)
        ppg = ppg + rng.normal(0.0, latent.noise_level, n)
        abp = abp + rng.normal(0.0, latent.noise_level, n)

    labels = SampleLabels.from_pressures(
        latent.sbp,
        latent.dbp,
        latent.sv_proxy,
        latent.age_proxy,
        heart_rate=float(latent.heart_rate),
    )
    return SignalSample(
        ecg, ppg, abp, labels, sample_id=sample_id, split=split
    )


def assign_split(sample_id):
    return "train" if stable_hash(sample_id) % 100 < TRAIN_FRACTION else "val"


def draw_latent(ranges, rng, max_tries=100):
    def uniform(name):
        low, high = ranges[name]
        return float(rng.uniform(low, high))

    heart_rate = uniform("heart_rate")
    for _ in range(max_tries):
        sbp, dbp = uniform("sbp"), uniform("dbp")
        if sbp - dbp >= 20.0:
            break
    else:
        dbp = ranges["dbp"][0]
        sbp = max(uniform("sbp"), dbp + 20.0)
    age = uniform("age_proxy")
    sv = (sbp - dbp) * HemodynamicLatent.compliance(age)
    return HemodynamicLatent(
        heart_rate=heart_rate,
        hr_variability=uniform("hr_variability"),
        sbp=sbp,
        dbp=dbp,
        sv_proxy=sv,
        age_proxy=age,
        noise_level=uniform("noise_level"),
        beat_phase=float(rng.uniform(0.0, 60.0 / heart_rate)),
    )


def horizon_labels(latent, rng, horizons, low=65.0, high=75.0):
    """Future hypotension per horizon from a linear MAP drift.

    Positive if MAP reaches ``low`` within the horizon, negative if it stays
    above ``high`` throughout, otherwise excluded.
    """
    drift = float(rng.uniform(-3.0, 1.0))
    labels = {}
    for minutes in horizons:
        lowest = min(latent.map, latent.map + drift * minutes)
        if lowest < low:
            labels[int(minutes)] = True
        elif lowest > high:
            labels[int(minutes)] = False
        else:
            labels[int(minutes)] = None
    return labels


def generate_cohort(synth_config):
    """Builds ``synth_config.n_samples`` records; sample ``i`` depends only
    on ``(seed, i)``."""
    n = synth_config.n_samples
    seed = synth_config.seed
    ranges = synth_config.latent_ranges
    samples = []
    for i in range(n):
        rng = derive_rng(seed, i, "latent")
        latent = draw_latent(ranges, rng)
        sample_id = f"s{i:06d}"
        sample = synth_sample(
            latent,
            derive_rng(seed, i, "signal"),
            fs_hz=synth_config.fs_hz,
            sample_seconds=synth_config.sample_seconds,
            sample_id=sample_id,
            split=assign_split(sample_id),
        )
        if synth_config.map_drift:
            sample.labels.horizons = horizon_labels(
                latent, rng, synth_config.horizons
            )
        samples.append(sample)
    dataset = Dataset.from_samples(
        samples,
        fs_hz=synth_config.fs_hz,
        sample_seconds=synth_config.sample_seconds,
    )
    log.info(
        "Generated %d samples (%d train), hypotension prevalence %.3f",
        len(dataset),
        dataset.splits.count("train"),
        float(np.mean(dataset.label_array("hypotensive"))),
    )
    return dataset
