import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from .autodiff.optim import Adam
from .config import SIGNALS
from .errors import ConfigError, DataError, TrainingDivergedError
from .losses import binary_cross_entropy, mean_squared_error, total_loss
from .masking import MaskBatch, MaskSchedule
from .model import PhysioMAE, SupervisedModel
from .utils import derive_rng

log = logging.getLogger(__name__)

HISTORY_HEADER = [
    "step",
    "micro_batch",
    "epoch",
    "strategy",
    "loss",
    "rmse",
    "pcc",
]


@dataclass
class MicroBatchRecord:
    step: int
    micro_batch: int
    epoch: int
    strategy: str
    loss: float
    rmse: float
    pcc: float

    def row(self):
        return [
            self.step,
            self.micro_batch,
            self.epoch,
            self.strategy,
            f"{self.loss:.8g}",
            f"{self.rmse:.8g}",
            f"{self.pcc:.8g}",
        ]


@dataclass
class TrainingResult:
    model: object
    history: List[MicroBatchRecord] = field(default_factory=list)
    steps: int = 0
    micro_batches: int = 0
    seed: int = 0

    def epoch_losses(self):
        epochs = sorted({r.epoch for r in self.history})
        return [
            float(np.mean([r.loss for r in self.history if r.epoch == e]))
            for e in epochs
        ]

    def step_losses(self):
        steps = sorted({r.step for r in self.history})
        return [
            float(np.mean([r.loss for r in self.history if r.step == s]))
            for s in steps
        ]

    def rows(self):
        return [r.row() for r in self.history]

    @property
    def rng_state(self):
        return {"seed": self.seed, "micro_batches": self.micro_batches}


def batch_targets(x, signals):
    return {name: x[:, i] for i, name in enumerate(signals)}


def masked_region(mask, patch_len):
    """Sample-level 0/1 weights marking hidden patches, per signal."""
    return {
        name: np.repeat(mask.masked[:, i, :], patch_len, axis=1).astype(float)
        for i, name in enumerate(mask.signals)
    }


def micro_batch_loss(model, x, mask, loss_config):
    """Forward pass and loss of one micro-batch under ``mask``."""
    outputs = model.forward(x, mask)
    weights = None
    if loss_config.loss_region == "masked_only":
        weights = masked_region(mask, model.patch_len)
    return total_loss(
        outputs, batch_targets(x, model.signals), loss_config, weights
    )


def learning_rate_at(step, total_steps, train_config):
    """Rate for optimizer step ``step`` (0-based) of ``total_steps``.

    Linear warmup over ``warmup_steps``; afterwards either the base rate or
    a half cosine down to ``min_lr_ratio`` of it at the last step.
    """
    base = train_config.learning_rate
    warmup = train_config.warmup_steps
    if step < warmup:
        return base * (step + 1) / warmup
    if train_config.lr_schedule == "constant":
        return base
    span = max(1, total_steps - warmup - 1)
    progress = min(1.0, (step - warmup) / span)
    floor = train_config.min_lr_ratio
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return base * (floor + (1.0 - floor) * cosine)


def _batches(indices, batch_size):
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


class Pretrainer(object):
    """Accumulates one micro-batch per schedule entry, then takes one
    optimizer step."""

    log = logging.getLogger(__name__)

    def __init__(
        self,
        model,
        train_config,
        masking_config,
        loss_config,
        hooks=(),
    ):
        self.model = model
        self.train_config = train_config
        self.loss_config = loss_config
        self.ratio = masking_config.ratio
        self.schedule = MaskSchedule.from_config(masking_config)
        if len(self.schedule) != train_config.accumulation_steps:
            raise ConfigError(
                f"accumulation_steps {train_config.accumulation_steps} != "
                f"schedule length {len(self.schedule)}"
            )
        self.schedule.validate(model.signals, model.n_patches, self.ratio)
        self.optimizer = Adam(
            model.parameters(), lr=train_config.learning_rate
        )
        self.hooks = list(hooks)
        self.total_steps = 0

    def _step(self, result, pending):
        self.optimizer.lr = learning_rate_at(
            result.steps, self.total_steps, self.train_config
        )
        self.optimizer.step()
        self.optimizer.zero_grad()
        result.steps += 1
        window = [r for r in result.history if r.step == pending]
        metrics = {
            "loss": float(np.mean([r.loss for r in window])),
            "lr": self.optimizer.lr,
        }
        for hook in self.hooks:
            hook.after_step(result.steps, metrics)
        if result.steps % self.train_config.log_every == 0:
            self.log.info(
                "step %d: loss %.6f over %d micro-batches",
                result.steps,
                metrics["loss"],
                len(window),
            )

    def run(self, dataset):
        seed = self.train_config.seed
        x_all = dataset.channel_array(self.model.signals)
        train = [i for i, s in enumerate(dataset.splits) if s == "train"]
        if not train:
            raise DataError("Dataset has no training samples")
        result = TrainingResult(self.model, seed=seed)
        steps_per_epoch = math.ceil(
            math.ceil(len(train) / self.train_config.batch_size)
            / len(self.schedule)
        )
        self.total_steps = self.train_config.epochs * steps_per_epoch
        progress = tqdm(
            total=self.total_steps,
            disable=not self.train_config.show_progress,
            desc="pretrain",
        )
        self.optimizer.zero_grad()
        accumulated = 0
        for epoch in range(self.train_config.epochs):
            order = derive_rng(seed, "order", epoch).permutation(train)
            for rows in _batches(order, self.train_config.batch_size):
                micro = result.micro_batches
                strategy = self.schedule.next_strategy(micro)
                mask = MaskBatch.sample(
                    strategy,
                    len(rows),
                    self.model.n_patches,
                    self.ratio,
                    derive_rng(seed, "mask", micro),
                    self.model.signals,
                )
                loss, components = micro_batch_loss(
                    self.model, x_all[rows], mask, self.loss_config
                )
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"Non-finite loss {value} at micro-batch {micro} "
                        f"(epoch {epoch}, strategy {strategy})"
                    )
                loss.backward()
                result.history.append(
                    MicroBatchRecord(
                        step=result.steps,
                        micro_batch=micro,
                        epoch=epoch,
                        strategy=str(strategy),
                        loss=value,
                        rmse=float(
                            sum(c["rmse"] for c in components.values())
                        ),
                        pcc=float(
                            np.mean([c["pcc"] for c in components.values()])
                        ),
                    )
                )
                self.log.debug(
                    "micro-batch %d (%s): loss %.6f", micro, strategy, value
                )
                result.micro_batches += 1
                accumulated += 1
                if accumulated == len(self.schedule):
                    self._step(result, result.steps)
                    accumulated = 0
                    progress.update(1)
            self.log.info(
                "epoch %d: mean loss %.6f",
                epoch,
                result.epoch_losses()[-1],
            )
        if accumulated:
            self.log.debug(
                "Applying final partial window of %d micro-batches",
                accumulated,
            )
            self._step(result, result.steps)
            progress.update(1)
        progress.close()
        return result


def pretrain(dataset, experiment_config, model=None, hooks=()):
    """Builds (unless given) and pretrains a :class:`PhysioMAE`."""
    if model is None:
        model = PhysioMAE.from_config(
            experiment_config, dataset.normalization
        )
    trainer = Pretrainer(
        model,
        experiment_config.train,
        experiment_config.masking,
        experiment_config.loss,
        hooks=hooks,
    )
    log.info(
        "Pretraining %d parameters, schedule %s",
        model.parameter_count,
        trainer.schedule,
    )
    return trainer.run(dataset)


def single_ssl_config(experiment_config, signal):
    """One-signal variant: no type embedding, no cross-attention, random
    patch masking at the configured ratio, one update per batch."""
    if signal not in SIGNALS:
        raise ConfigError(f"Unknown signal: {signal}")
    return experiment_config.with_overrides(
        {
            "model": {
                "signals": [signal],
                "type_embedding": False,
                "cross_attention": False,
            },
            "masking": {"schedule": ["inter"]},
            "train": {"accumulation_steps": 1},
        }
    )


def train_supervised(
    x,
    targets,
    experiment_config,
    signals,
    binary,
    epochs=None,
    normalization=None,
    seed=None,
):
    """Encoder and affine head trained end-to-end, updated every batch.

    Regression targets are standardized inside; the returned model's
    ``target_scale`` holds ``(mean, std)`` to undo it.
    """
    probe = experiment_config.probe
    seed = probe.seed if seed is None else seed
    model_config = experiment_config.with_overrides(
        {"model": {"signals": list(signals)}}
    ).model
    model = SupervisedModel(
        experiment_config.patch,
        experiment_config.encoder,
        model_config,
        signal_std=normalization.std if normalization else None,
        seed=seed,
    )
    targets = np.asarray(targets, dtype=float)
    if binary:
        model.target_scale = (0.0, 1.0)
    else:
        std = float(targets.std()) or 1.0
        model.target_scale = (float(targets.mean()), std)
    scaled = (targets - model.target_scale[0]) / model.target_scale[1]
    optimizer = Adam(
        model.parameters(), lr=experiment_config.train.learning_rate
    )
    batch_size = experiment_config.train.batch_size
    epochs = probe.supervised_epochs if epochs is None else epochs
    for epoch in range(epochs):
        order = derive_rng(seed, "supervised", epoch).permutation(len(x))
        for rows in _batches(order, batch_size):
            rows = np.sort(rows)
            optimizer.zero_grad()
            out = model.forward(x[rows])
            loss = (
                binary_cross_entropy(out, scaled[rows])
                if binary
                else mean_squared_error(out, scaled[rows])
            )
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(
                    f"Non-finite supervised loss in epoch {epoch}"
                )
            loss.backward()
            optimizer.step()
        log.debug("supervised epoch %d: loss %.6f", epoch, loss.item())
    return model


def train_baseline(
    kind,
    dataset,
    experiment_config,
    signal: Optional[str] = None,
    targets=None,
    signals=None,
    binary=False,
):
    """``single_ssl`` pretrains a one-signal model on ``signal``;
    ``supervised`` fits encoder plus head on the training split."""
    if kind == "single_ssl":
        config = single_ssl_config(experiment_config, signal)
        return pretrain(dataset, config).model
    if kind == "supervised":
        signals = tuple(signals or SIGNALS)
        train = dataset.split("train")
        if targets is None:
            raise ConfigError("Supervised baseline needs targets")
        return train_supervised(
            train.channel_array(signals),
            targets,
            experiment_config,
            signals,
            binary,
            normalization=dataset.normalization,
        )
    raise ConfigError(f"Unknown baseline kind: {kind}")
