"""Masked patch index sets for inter-, intra- and signal-masking."""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import config as cfg
from .autodiff import ops
from .errors import ConfigError, DimensionError

log = logging.getLogger(__name__)

INTER = "inter"
INTRA = "intra"
SIGNAL = "signal"
KINDS = (INTER, INTRA, SIGNAL)


def masked_count(n_patches, ratio):
    """``round(ratio * J)`` with halves rounded up."""
    count = int(np.floor(ratio * n_patches + 0.5))
    if not 0 < count < n_patches:
        raise ConfigError(
            f"Masking ratio {ratio} masks {count} of {n_patches} patches; "
            f"need between 1 and {n_patches - 1}"
        )
    return count


@dataclass(frozen=True)
class MaskStrategy:
    kind: str
    signals: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"Unknown masking strategy: {self.kind}")
        if (self.kind == SIGNAL) != bool(self.signals):
            raise ConfigError(
                "Signal-masking needs one or two signals, other strategies "
                "take none"
            )

    @classmethod
    def parse(cls, text):
        if isinstance(text, MaskStrategy):
            return text
        text = str(text).strip()
        kind, _, rest = text.partition(":")
        kind = kind.strip().lower()
        if kind == SIGNAL:
            signals = cfg.parse_signals(rest)
            if len(signals) > 2:
                raise ConfigError(f"Signal-masking covers at most two: {text}")
            return cls(SIGNAL, signals)
        if rest:
            raise ConfigError(f"Unexpected argument in strategy {text!r}")
        return cls(kind)

    def __str__(self):
        if self.kind == SIGNAL:
            return f"{SIGNAL}:{'+'.join(self.signals)}"
        return self.kind


@dataclass
class MaskIndex:
    """``masked[s, j]`` is True when patch ``j`` of signal ``s`` is hidden."""

    masked: np.ndarray
    strategy: MaskStrategy
    ratio: float
    signals: Tuple[str, ...] = cfg.SIGNALS

    @property
    def n_patches(self):
        return self.masked.shape[1]

    def row(self, signal):
        return self.masked[self.signals.index(signal)]

    def visible_positions(self, signal):
        return np.flatnonzero(~self.row(signal))

    def masked_positions(self, signal):
        return np.flatnonzero(self.row(signal))

    @property
    def visible_counts(self):
        return [int((~row).sum()) for row in self.masked]


def sample_mask(strategy, n_patches, ratio, rng, signals=cfg.SIGNALS):
    strategy = MaskStrategy.parse(strategy)
    signals = tuple(signals)
    masked = np.zeros((len(signals), n_patches), dtype=bool)
    if strategy.kind == SIGNAL:
        missing = [s for s in strategy.signals if s not in signals]
        if missing:
            raise ConfigError(
                f"Cannot mask {missing}: model signals are {list(signals)}"
            )
        if len(strategy.signals) == len(signals):
            raise ConfigError(
                f"Strategy {strategy} hides every input signal"
            )
        for name in strategy.signals:
            masked[signals.index(name)] = True
    elif strategy.kind == INTRA:
        count = masked_count(n_patches, ratio)
        masked[:, rng.choice(n_patches, count, replace=False)] = True
    else:
        count = masked_count(n_patches, ratio)
        for row in masked:
            row[rng.choice(n_patches, count, replace=False)] = True
    return MaskIndex(masked, strategy, ratio, signals)


class MaskBatch(object):
    """Per-sample masks of one micro-batch, all drawn with one strategy.

    Every sample hides the same number of patches per signal, so visible
    and hidden positions stack into rectangular ``(B, J')`` index arrays.
    """

    def __init__(self, masks: Sequence[MaskIndex]):
        if not masks:
            raise DimensionError("MaskBatch needs at least one mask")
        self.masks = list(masks)
        self.signals = self.masks[0].signals
        self.strategy = self.masks[0].strategy
        self.masked = np.stack([m.masked for m in self.masks])
        counts = self.masked.sum(axis=2)
        if not (counts == counts[0]).all():
            raise DimensionError(
                "Masks in one batch must hide the same count per signal"
            )
        self._visible = {}
        self._hidden = {}
        for i, name in enumerate(self.signals):
            self._visible[name] = np.stack(
                [np.flatnonzero(~m.masked[i]) for m in self.masks]
            ).astype(np.int64)
            self._hidden[name] = np.stack(
                [np.flatnonzero(m.masked[i]) for m in self.masks]
            ).astype(np.int64)

    def __len__(self):
        return len(self.masks)

    @property
    def n_patches(self):
        return self.masked.shape[2]

    def visible_index(self, signal):
        return self._visible[signal]

    def masked_index(self, signal):
        return self._hidden[signal]

    def visible_count(self, signal):
        return self._visible[signal].shape[1]

    def masked_count(self, signal):
        return self._hidden[signal].shape[1]

    @classmethod
    def sample(cls, strategy, batch_size, n_patches, ratio, rng, signals):
        return cls(
            [
                sample_mask(strategy, n_patches, ratio, rng, signals)
                for _ in range(batch_size)
            ]
        )


def apply_mask(grids, mask):
    """Keeps the visible tokens of each signal in temporal order.

    ``grids`` holds one ``(J, d)`` token grid per signal of ``mask``
    (a :class:`MaskIndex`), or ``(B, J, d)`` grids with a
    :class:`MaskBatch`.
    """
    if isinstance(mask, MaskIndex):
        return [
            grid[mask.visible_positions(name)]
            for grid, name in zip(grids, mask.signals)
        ]
    return [
        ops.take_rows(grid, mask.visible_index(name))
        for grid, name in zip(grids, mask.signals)
    ]


class MaskSchedule(object):
    """Strategies consumed one per accumulated micro-batch."""

    def __init__(self, strategies):
        self.strategies: List[MaskStrategy] = [
            MaskStrategy.parse(s) for s in strategies
        ]
        if not self.strategies:
            raise ConfigError("Masking schedule must not be empty")

    @classmethod
    def from_config(cls, masking_config):
        return cls(masking_config.schedule)

    def __len__(self):
        return len(self.strategies)

    def __iter__(self):
        return iter(self.strategies)

    def next_strategy(self, step):
        return self.strategies[step % len(self.strategies)]

    def validate(self, signals, n_patches, ratio):
        """Dry-runs every strategy against the model's signals."""
        rng = np.random.default_rng(0)
        for strategy in self.strategies:
            sample_mask(strategy, n_patches, ratio, rng, signals)
        return self

    def __str__(self):
        return ",".join(str(s) for s in self.strategies)


def next_strategy(schedule, step):
    if not isinstance(schedule, MaskSchedule):
        schedule = MaskSchedule(schedule)
    return schedule.next_strategy(step)
