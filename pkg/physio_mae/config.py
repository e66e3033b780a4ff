import copy

from kedro.config import MissingConfigException

from .errors import ConfigError
from .utils import merge_dicts

SIGNALS = ("ECG", "PPG", "ABP")

DEFAULT_SCHEDULE = [
    "inter",
    "intra",
    "signal:ECG",
    "signal:PPG",
    "signal:ABP",
    "signal:ECG+PPG",
    "signal:PPG+ABP",
    "signal:ECG+ABP",
    "inter",
    "intra",
]

DEFAULT_CONFIG_TEMPLATE = """
# Preset the values below are layered on: desk | paper | toy
preset: {preset}

# Global seed, may be overridden with PHYSIO_CONFIG_SEED or --seed
seed: ${{seed|{seed}}}

# Synthetic cohort generation
synth:
  n_samples: {n_samples}
  fs_hz: 100
  sample_seconds: 10

  # Latent ranges, each [low, high]. Samples with pulse pressure below
  # 20 mmHg are redrawn.
  latent_ranges:
    heart_rate: [55, 150]
    hr_variability: [0.5, 3.0]
    sbp: [70, 150]
    dbp: [35, 90]
    age_proxy: [20, 85]
    noise_level: [0.005, 0.03]

  # Slow MAP drift for horizon-based hypotension labels (5/10/15 min)
  #map_drift: True

# Signal conditioning and quality control
preprocess:
  ecg_band: [0.5, 40]
  ppg_band: [0.5, 8]
  filter_order: 4
  hr_range: [60, 200]
  pulse_pressure_range: [20, 100]
  max_hr_disagreement: 30
  beat_correlation: 0.9
  beat_fraction: 0.5

# Patch length in seconds; sample length must be divisible by it
patch:
  patch_seconds: 0.5

encoder:
  depth: 2
  model_dim: 64
  heads: 4

decoder:
  depth: 2
  decoder_dim: 32
  heads: 2

model:
  signals: [ECG, PPG, ABP]
  type_embedding: True
  cross_attention: True

masking:
  ratio: 0.4
  # One entry per accumulated micro-batch: inter, intra, signal:<A>[+<B>]
  #schedule: [inter, intra, signal:ECG, signal:PPG, signal:ABP, ...]

loss:
  alpha: 0.8
  beta: 0.2
  # one_minus_pcc | negative_pcc
  pcc_mode: one_minus_pcc
  # full_signal | masked_only
  loss_region: full_signal

train:
  learning_rate: {learning_rate}
  batch_size: {batch_size}
  accumulation_steps: 10
  epochs: {epochs}
  # Linear warmup over this many optimizer steps
  warmup_steps: {warmup_steps}
  # constant | cosine (decays to min_lr_ratio x learning_rate)
  lr_schedule: {lr_schedule}

probe:
  tasks: [hypotension, sbp, dbp, sv_proxy, age_proxy]
  subsets: [ECG, PPG, ECG+PPG]
  fractions: [0.01, 0.1, 1.0]
  learning_rate: 0.001
  batch_size: 1024
  epochs: 300
"""

PRESETS = {
    "desk": {
        "seed": 7,
        "synth": {"n_samples": 2000},
        "encoder": {"depth": 2, "model_dim": 64, "heads": 4},
        "decoder": {"depth": 2, "decoder_dim": 32, "heads": 2},
        "train": {
            "batch_size": 8,
            "epochs": 20,
            "learning_rate": 0.002,
            "warmup_steps": 20,
            "lr_schedule": "cosine",
        },
    },
    "paper": {
        "seed": 7,
        "synth": {"n_samples": 20000},
        "encoder": {"depth": 12, "model_dim": 256, "heads": 8},
        "decoder": {"depth": 12, "decoder_dim": 128, "heads": 4},
        "train": {"batch_size": 4096, "epochs": 100},
    },
    "toy": {
        "seed": 0,
        "synth": {"n_samples": 16, "sample_seconds": 2},
        "encoder": {"depth": 1, "model_dim": 8, "heads": 2},
        "decoder": {"depth": 1, "decoder_dim": 4, "heads": 2},
        "train": {"batch_size": 2, "epochs": 1},
    },
}

ABLATIONS = {
    "all": {},
    "inter": {"masking": {"schedule": ["inter"] * 10}},
    "intra": {"masking": {"schedule": ["intra"] * 10}},
    "signal": {
        "masking": {
            "schedule": [
                "signal:ECG",
                "signal:PPG",
                "signal:ABP",
                "signal:ECG+PPG",
                "signal:PPG+ABP",
                "signal:ECG+ABP",
                "signal:ECG",
                "signal:PPG",
                "signal:ABP",
                "signal:ECG+PPG",
            ]
        }
    },
    "inter-intra": {"masking": {"schedule": ["inter", "intra"] * 5}},
    "rmse-only": {"loss": {"beta": 0.0}},
    "no-type-embed": {"model": {"type_embedding": False}},
    "no-cross-attn": {"model": {"cross_attention": False}},
}


def parse_signals(value):
    """Accepts ``"ECG+PPG"``, ``"ECG,PPG"`` or a list and returns a tuple."""
    if isinstance(value, str):
        value = value.replace(",", "+").split("+")
    names = tuple(str(v).strip().upper() for v in value if str(v).strip())
    unknown = [n for n in names if n not in SIGNALS]
    if unknown or not names:
        raise ConfigError(f"Invalid signal selection: {value!r}")
    return tuple(s for s in SIGNALS if s in names)


class Config(object):
    def __init__(self, raw):
        self._raw = raw if raw is not None else {}

    def _get_or_default(self, prop, default):
        return self._raw.get(prop, default)

    def _get_or_fail(self, prop):
        if prop in self._raw.keys():
            return self._raw[prop]
        else:
            raise MissingConfigException(
                f"Missing required configuration: '{self._get_prefix()}{prop}'."
            )

    def _get_float(self, prop, default, low=None, high=None):
        try:
            value = float(self._get_or_default(prop, default))
        except (TypeError, ValueError):
            raise ConfigError(
                f"Invalid {self._get_prefix()}{prop}: expected a number"
            )
        if (low is not None and value < low) or (
            high is not None and value > high
        ):
            raise ConfigError(
                f"Invalid {self._get_prefix()}{prop}: {value} outside "
                f"[{low}, {high}]"
            )
        return value

    def _get_int(self, prop, default, low=None):
        raw = self._get_or_default(prop, default)
        try:
            value = int(raw)
        except (TypeError, ValueError):
            raise ConfigError(
                f"Invalid {self._get_prefix()}{prop}: expected an integer"
            )
        if low is not None and value < low:
            raise ConfigError(
                f"Invalid {self._get_prefix()}{prop}: {value} < {low}"
            )
        return value

    def _get_bool(self, prop, default):
        value = self._get_or_default(prop, default)
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes", "on")
        return bool(value)

    def _get_range(self, prop, default):
        value = self._get_or_default(prop, default)
        try:
            low, high = (float(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(
                f"Invalid {self._get_prefix()}{prop}: expected [low, high]"
            )
        if low > high:
            raise ConfigError(
                f"Invalid {self._get_prefix()}{prop}: low {low} > high {high}"
            )
        return low, high

    def _get_choice(self, prop, default, choices):
        value = str(self._get_or_default(prop, default))
        if value not in choices:
            raise ConfigError(f"Invalid {self._get_prefix()}{prop}: {value}")
        return value

    def _get_prefix(self):
        return ""

    @property
    def raw(self):
        return copy.deepcopy(self._raw)

    def __eq__(self, other):
        return self._raw == other._raw


class LatentRangesConfig(Config):
    def _get_prefix(self):
        return "synth.latent_ranges."


class SynthConfig(Config):
    DEFAULT_RANGES = {
        "heart_rate": (55.0, 150.0),
        "hr_variability": (0.5, 3.0),
        "sbp": (70.0, 150.0),
        "dbp": (35.0, 90.0),
        "age_proxy": (20.0, 85.0),
        "noise_level": (0.005, 0.03),
    }

    @property
    def n_samples(self):
        value = self._get_int("n_samples", 2000)
        if value < 1:
            raise ConfigError(
                f"Invalid {self._get_prefix()}n_samples: {value} (need >= 1)"
            )
        return value

    @property
    def seed(self):
        return self._get_int("seed", 7)

    @property
    def fs_hz(self):
        return self._get_float("fs_hz", 100.0, low=1.0)

    @property
    def sample_seconds(self):
        return self._get_float("sample_seconds", 10.0, low=1.0)

    @property
    def latent_ranges(self):
        ranges = LatentRangesConfig(
            self._get_or_default("latent_ranges", {})
        )
        result = {
            name: ranges._get_range(name, default)
            for name, default in self.DEFAULT_RANGES.items()
        }
        if result["heart_rate"][0] < 40 or result["heart_rate"][1] > 220:
            raise ConfigError(
                "Invalid synth.latent_ranges.heart_rate: must lie in [40, 220]"
            )
        if result["sbp"][1] - result["dbp"][0] < 20:
            raise ConfigError(
                "Invalid synth.latent_ranges: sbp/dbp ranges cannot produce "
                "a pulse pressure of at least 20 mmHg"
            )
        if result["noise_level"][0] < 0:
            raise ConfigError(
                "Invalid synth.latent_ranges.noise_level: negative noise"
            )
        return result

    @property
    def map_drift(self):
        return self._get_bool("map_drift", False)

    @property
    def horizons(self):
        return [int(h) for h in self._get_or_default("horizons", [5, 10, 15])]

    def _get_prefix(self):
        return "synth."


class PreprocessConfig(Config):
    @property
    def ecg_band(self):
        return self._get_range("ecg_band", (0.5, 40.0))

    @property
    def ppg_band(self):
        return self._get_range("ppg_band", (0.5, 8.0))

    @property
    def filter_order(self):
        return self._get_int("filter_order", 4, low=1)

    @property
    def hr_range(self):
        return self._get_range("hr_range", (60.0, 200.0))

    @property
    def pulse_pressure_range(self):
        return self._get_range("pulse_pressure_range", (20.0, 100.0))

    @property
    def max_hr_disagreement(self):
        return self._get_float("max_hr_disagreement", 30.0, low=0.0)

    @property
    def beat_correlation(self):
        return self._get_float("beat_correlation", 0.9, low=-1.0, high=1.0)

    @property
    def beat_fraction(self):
        return self._get_float("beat_fraction", 0.5, low=0.0, high=1.0)

    def _get_prefix(self):
        return "preprocess."


class PatchConfig(Config):
    @property
    def fs_hz(self):
        return self._get_float("fs_hz", 100.0, low=1.0)

    @property
    def patch_seconds(self):
        return self._get_float("patch_seconds", 0.5, low=0.0)

    @property
    def sample_seconds(self):
        return self._get_float("sample_seconds", 10.0, low=0.0)

    @property
    def model_dim(self):
        return self._get_int("model_dim", 64, low=1)

    @property
    def sample_len(self):
        return int(round(self.sample_seconds * self.fs_hz))

    @property
    def patch_len(self):
        value = int(round(self.patch_seconds * self.fs_hz))
        if value < 1 or self.sample_len % value != 0:
            raise ConfigError(
                f"Invalid {self._get_prefix()}patch_seconds: "
                f"{self.patch_seconds} s does not divide "
                f"{self.sample_seconds} s"
            )
        return value

    @property
    def n_patches(self):
        return self.sample_len // self.patch_len

    def _get_prefix(self):
        return "patch."


class EncoderConfig(Config):
    @property
    def depth(self):
        return self._get_int("depth", 2, low=0)

    @property
    def model_dim(self):
        return self._get_int("model_dim", 64, low=1)

    @property
    def heads(self):
        heads = self._get_int("heads", 4, low=1)
        if self.model_dim % heads != 0:
            raise ConfigError(
                f"Invalid {self._get_prefix()}heads: {self.model_dim} is not "
                f"divisible by {heads}"
            )
        return heads

    @property
    def ffn_dim(self):
        return self._get_int("ffn_dim", 4 * self.model_dim, low=1)

    def _get_prefix(self):
        return "encoder."


class DecoderConfig(EncoderConfig):
    @property
    def decoder_dim(self):
        return self._get_int("decoder_dim", 32, low=1)

    @property
    def model_dim(self):
        return self.decoder_dim

    @property
    def ffn_dim(self):
        return self._get_int("ffn_dim", 4 * self.decoder_dim, low=1)

    @property
    def heads(self):
        heads = self._get_int("heads", 2, low=1)
        if self.decoder_dim % heads != 0:
            raise ConfigError(
                f"Invalid {self._get_prefix()}heads: {self.decoder_dim} is "
                f"not divisible by {heads}"
            )
        return heads

    def _get_prefix(self):
        return "decoder."


class ModelConfig(Config):
    @property
    def signals(self):
        return parse_signals(self._get_or_default("signals", list(SIGNALS)))

    @property
    def type_embedding(self):
        return self._get_bool("type_embedding", True)

    @property
    def cross_attention(self):
        return self._get_bool("cross_attention", True)

    @property
    def type_embedding_std(self):
        return self._get_float("type_embedding_std", 0.02, low=0.0)

    @property
    def dtype(self):
        return self._get_choice("dtype", "float64", ("float64", "float32"))

    @property
    def pooling(self):
        return self._get_choice("pooling", "mean", ("mean", "first"))

    def _get_prefix(self):
        return "model."


class MaskingConfig(Config):
    @property
    def ratio(self):
        return self._get_float("ratio", 0.4, low=0.0, high=1.0)

    @property
    def schedule(self):
        value = self._get_or_default("schedule", DEFAULT_SCHEDULE)
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not value:
            raise ConfigError(f"Invalid {self._get_prefix()}schedule: empty")
        return list(value)

    def _get_prefix(self):
        return "masking."


class LossConfig(Config):
    @property
    def alpha(self):
        return self._get_float("alpha", 0.8, low=0.0)

    @property
    def beta(self):
        return self._get_float("beta", 0.2, low=0.0)

    @property
    def pcc_mode(self):
        return self._get_choice(
            "pcc_mode", "one_minus_pcc", ("one_minus_pcc", "negative_pcc")
        )

    @property
    def loss_region(self):
        return self._get_choice(
            "loss_region", "full_signal", ("full_signal", "masked_only")
        )

    def _get_prefix(self):
        return "loss."


class TrainConfig(Config):
    @property
    def learning_rate(self):
        return self._get_float("learning_rate", 1e-3, low=0.0)

    @property
    def batch_size(self):
        return self._get_int("batch_size", 64, low=1)

    @property
    def accumulation_steps(self):
        return self._get_int("accumulation_steps", 10, low=1)

    @property
    def epochs(self):
        return self._get_int("epochs", 10, low=1)

    @property
    def warmup_steps(self):
        return self._get_int("warmup_steps", 0, low=0)

    @property
    def lr_schedule(self):
        return self._get_choice(
            "lr_schedule", "constant", ("constant", "cosine")
        )

    @property
    def min_lr_ratio(self):
        return self._get_float("min_lr_ratio", 0.1, low=0.0, high=1.0)

    @property
    def seed(self):
        return self._get_int("seed", 7)

    @property
    def log_every(self):
        return self._get_int("log_every", 1, low=1)

    @property
    def show_progress(self):
        return self._get_bool("show_progress", False)

    def _get_prefix(self):
        return "train."


class ProbeConfig(Config):
    TASKS = ("hypotension", "sbp", "dbp", "sv_proxy", "age_proxy")

    @property
    def tasks(self):
        tasks = list(self._get_or_default("tasks", list(self.TASKS)))
        for task in tasks:
            if task.split("@")[0] not in self.TASKS:
                raise ConfigError(f"Invalid {self._get_prefix()}tasks: {task}")
        return tasks

    @property
    def subsets(self):
        value = self._get_or_default("subsets", ["ECG", "PPG", "ECG+PPG"])
        if isinstance(value, str):
            value = [value]
        return [parse_signals(v) for v in value]

    @property
    def fractions(self):
        value = self._get_or_default("fractions", [0.01, 0.1, 1.0])
        if not isinstance(value, (list, tuple)):
            value = [value]
        fractions = [float(f) for f in value]
        if any(f <= 0 or f > 1 for f in fractions):
            raise ConfigError(
                f"Invalid {self._get_prefix()}fractions: {fractions}"
            )
        return fractions

    @property
    def learning_rate(self):
        return self._get_float("learning_rate", 1e-3, low=0.0)

    @property
    def batch_size(self):
        return self._get_int("batch_size", 1024, low=1)

    @property
    def epochs(self):
        return self._get_int("epochs", 300, low=1)

    @property
    def supervised_epochs(self):
        return self._get_int("supervised_epochs", 5, low=1)

    @property
    def bootstrap(self):
        return self._get_int("bootstrap", 200, low=0)

    @property
    def seed(self):
        return self._get_int("seed", 7)

    def _get_prefix(self):
        return "probe."


class ExperimentConfig(Config):
    @classmethod
    def from_preset(cls, preset="desk", overrides=None):
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset: {preset}")
        raw = merge_dicts(PRESETS[preset], overrides or {})
        raw["preset"] = preset
        return cls(raw)

    @staticmethod
    def sample_config(**kwargs):
        preset = PRESETS[kwargs.get("preset", "desk")]
        train = TrainConfig(preset.get("train", {}))
        values = {
            "learning_rate": train.learning_rate,
            "batch_size": train.batch_size,
            "epochs": train.epochs,
            "warmup_steps": train.warmup_steps,
            "lr_schedule": train.lr_schedule,
        }
        values.update(kwargs)
        return DEFAULT_CONFIG_TEMPLATE.format(**values)

    def with_overrides(self, overrides):
        return ExperimentConfig(merge_dicts(self._raw, overrides))

    def with_ablation(self, name):
        if name not in ABLATIONS:
            raise ConfigError(f"Unknown ablation: {name}")
        return self.with_overrides(ABLATIONS[name])

    @property
    def preset(self):
        return str(self._get_or_default("preset", "desk"))

    @property
    def seed(self):
        return self._get_int("seed", 7)

    def _section(self, name, seeded=False):
        raw = copy.deepcopy(self._get_or_default(name, {}) or {})
        if seeded:
            raw.setdefault("seed", self.seed)
        return raw

    @property
    def synth(self):
        return SynthConfig(self._section("synth", seeded=True))

    @property
    def preprocess(self):
        return PreprocessConfig(self._section("preprocess"))

    @property
    def patch(self):
        raw = self._section("patch")
        synth = self.synth
        raw.setdefault("fs_hz", synth.fs_hz)
        raw.setdefault("sample_seconds", synth.sample_seconds)
        raw.setdefault("model_dim", self.encoder.model_dim)
        return PatchConfig(raw)

    @property
    def encoder(self):
        return EncoderConfig(self._section("encoder"))

    @property
    def decoder(self):
        decoder = DecoderConfig(self._section("decoder"))
        if decoder.decoder_dim > self.encoder.model_dim:
            raise ConfigError(
                "Invalid decoder.decoder_dim: larger than encoder.model_dim"
            )
        return decoder

    @property
    def model(self):
        return ModelConfig(self._section("model"))

    @property
    def masking(self):
        return MaskingConfig(self._section("masking"))

    @property
    def loss(self):
        return LossConfig(self._section("loss"))

    @property
    def train(self):
        train = TrainConfig(self._section("train", seeded=True))
        schedule = self.masking.schedule
        if train.accumulation_steps != len(schedule):
            raise ConfigError(
                f"Invalid train.accumulation_steps: "
                f"{train.accumulation_steps} != masking schedule length "
                f"{len(schedule)}"
            )
        return train

    @property
    def probe(self):
        return ProbeConfig(self._section("probe", seeded=True))

    def validate(self):
        """Touches every section so configuration errors surface early."""
        synth = self.synth
        synth.n_samples, synth.latent_ranges
        self.preprocess.ecg_band, self.preprocess.ppg_band
        self.patch.patch_len
        self.encoder.heads, self.decoder.heads
        self.model.signals, self.model.dtype
        self.masking.ratio, self.loss.pcc_mode, self.loss.loss_region
        self.train.epochs
        self.probe.tasks, self.probe.fractions, self.probe.subsets
        return self
