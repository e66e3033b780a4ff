"""Linear probing of frozen encoder embeddings."""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata
from tabulate import tabulate

from .autodiff.optim import Adam
from .autodiff.tensor import parameter
from .config import ProbeConfig, parse_signals
from .errors import ConfigError, DataError, DimensionError
from .losses import binary_cross_entropy, mean_squared_error
from .model import linear
from .utils import derive_rng, write_delimited

log = logging.getLogger(__name__)

RESULTS_HEADER = [
    "model",
    "task",
    "subset",
    "fraction",
    "metric",
    "value",
    "dispersion",
    "ci_low",
    "ci_high",
    "n_train",
    "n",
]

SBP_RANGE = (90.0, 200.0)
DBP_RANGE = (50.0, 120.0)
MAX_PULSE_PRESSURE = 70.0
SV_RANGE = (20.0, 200.0)
MIN_AGE = 18.0
EMBEDDING_BATCH = 256


@dataclass(frozen=True)
class ProbeTask:
    kind: str
    horizon: Optional[int] = None

    @classmethod
    def parse(cls, text):
        kind, _, horizon = str(text).partition("@")
        if kind not in ProbeConfig.TASKS:
            raise ConfigError(f"Unknown probe task: {text}")
        if horizon and kind != "hypotension":
            raise ConfigError(f"Only hypotension takes a horizon: {text}")
        return cls(kind, int(horizon) if horizon else None)

    @property
    def binary(self):
        return self.kind == "hypotension"

    @property
    def metric(self):
        return "auroc" if self.binary else "mae"

    @property
    def name(self):
        return f"{self.kind}@{self.horizon}" if self.horizon else self.kind

    def _keep(self, labels):
        if self.kind in ("sbp", "dbp"):
            return (
                SBP_RANGE[0] <= labels.sbp <= SBP_RANGE[1]
                and DBP_RANGE[0] <= labels.dbp <= DBP_RANGE[1]
                and labels.sbp - labels.dbp < MAX_PULSE_PRESSURE
            )
        if self.kind == "sv_proxy":
            return SV_RANGE[0] <= labels.sv_proxy <= SV_RANGE[1]
        if self.kind == "age_proxy":
            return labels.age_proxy >= MIN_AGE
        if self.horizon is not None:
            return labels.horizons.get(self.horizon) is not None
        return True

    def targets(self, dataset):
        """``(values, keep)``: label per sample and the filter verdict."""
        keep = np.array([self._keep(lab) for lab in dataset.labels], bool)
        if self.binary and self.horizon is not None:
            values = [
                float(bool(lab.horizons.get(self.horizon)))
                for lab in dataset.labels
            ]
        elif self.binary:
            values = [float(lab.hypotensive) for lab in dataset.labels]
        else:
            values = [
                float(getattr(lab, self.kind)) for lab in dataset.labels
            ]
        return np.array(values), keep


def auroc(scores, labels):
    """Mann-Whitney AU-ROC by ranks (ties count half); ``nan`` when only one
    class is present."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise DimensionError(
            f"scores {scores.shape} and labels {labels.shape} differ"
        )
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float(
        (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    )


def mae(preds, labels):
    """Mean absolute error and the standard deviation of absolute errors."""
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if preds.shape != labels.shape:
        raise DimensionError(
            f"preds {preds.shape} and labels {labels.shape} differ"
        )
    errors = np.abs(preds - labels)
    return float(errors.mean()), float(errors.std())


def _metric_value(metric, preds, labels):
    if metric == "auroc":
        return auroc(preds, labels)
    return mae(preds, labels)[0]


def bootstrap_ci(metric, preds, labels, n_resamples, seed, level=0.95):
    """Percentile interval over resamples; resamples with an undefined
    metric are skipped."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if n_resamples < 1 or len(preds) < 2:
        return float("nan"), float("nan")
    rng = derive_rng(seed, "bootstrap", metric)
    values = []
    for _ in range(n_resamples):
        rows = rng.integers(0, len(preds), len(preds))
        value = _metric_value(metric, preds[rows], labels[rows])
        if not math.isnan(value):
            values.append(value)
    if not values:
        return float("nan"), float("nan")
    tail = 100.0 * (1.0 - level) / 2.0
    low, high = np.percentile(values, [tail, 100.0 - tail])
    return float(low), float(high)


def fraction_indices(n, fraction, rng, labels=None):
    """``ceil(fraction * n)`` distinct indices, sorted.

    With ``labels`` every class present in them keeps at least one row,
    as long as the draw has room for all classes.
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"Label fraction must lie in (0, 1], got {fraction}")
    count = min(n, max(1, math.ceil(fraction * n - 1e-9)))
    rows = rng.choice(n, count, replace=False)
    if labels is not None:
        labels = np.asarray(labels)
        classes = np.unique(labels)
        if len(classes) <= count:
            for value in classes:
                if np.any(labels[rows] == value):
                    continue
                drawn = labels[rows]
                spare = [
                    i for i, v in enumerate(drawn) if np.sum(drawn == v) > 1
                ]
                candidates = np.flatnonzero(labels == value)
                rows[spare[rng.integers(len(spare))]] = rng.choice(candidates)
    return np.sort(rows)


def extract_embedding(model, x, subset, batch_size=EMBEDDING_BATCH):
    """Mean-pooled encoder output for the unmasked tokens of ``subset``.

    ``x`` is ``(B, len(subset), L)`` or one ``(len(subset), L)`` sample;
    returns ``(B, d)`` (or ``(d,)``).
    """
    subset = parse_signals(subset) if subset else ()
    if not subset:
        raise ConfigError("Inference signal subset must not be empty")
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    with model.frozen():
        chunks = [
            model.pool(model.encode_subset(x[i : i + batch_size], subset))
            for i in range(0, len(x), batch_size)
        ]
    embeddings = np.concatenate([c.data for c in chunks], axis=0)
    return embeddings[0] if single else embeddings


def dataset_embeddings(model, dataset, subset):
    return extract_embedding(model, dataset.channel_array(subset), subset)


class LinearProbe(object):
    """Affine head on standardized embeddings, zero-initialized."""

    def __init__(
        self, binary, learning_rate=1e-3, batch_size=1024, epochs=300
    ):
        self.binary = binary
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.feature_mean = None
        self.feature_std = None
        self.target_mean = 0.0
        self.target_std = 1.0
        self.weight = None
        self.bias = None
        self.n_train = 0

    def _features(self, embeddings):
        return (embeddings - self.feature_mean) / self.feature_std

    def fit(self, embeddings, labels, seed=0):
        embeddings = np.asarray(embeddings, dtype=float)
        labels = np.asarray(labels, dtype=float)
        if embeddings.ndim != 2 or len(embeddings) != len(labels):
            raise DimensionError(
                f"Embeddings {embeddings.shape} do not match "
                f"{len(labels)} labels"
            )
        if len(labels) == 0:
            raise DataError("No labelled samples to fit the probe")
        if self.binary and len(np.unique(labels)) < 2:
            raise DataError(
                "Classification probe needs both classes in its training set"
            )
        self.feature_mean = embeddings.mean(axis=0)
        std = embeddings.std(axis=0)
        self.feature_std = np.where(std > 0, std, 1.0)
        if not self.binary:
            self.target_mean = float(labels.mean())
            self.target_std = float(labels.std()) or 1.0
        features = self._features(embeddings)
        targets = (labels - self.target_mean) / self.target_std

        self.weight = parameter(np.zeros((features.shape[1], 1)), "weight")
        self.bias = parameter(np.zeros(1), "bias")
        if self.binary:
            prior = float(np.clip(labels.mean(), 1e-6, 1 - 1e-6))
            self.bias.data[:] = math.log(prior / (1.0 - prior))
        optimizer = Adam([self.weight, self.bias], lr=self.learning_rate)
        rng = derive_rng(seed, "probe")
        for _ in range(self.epochs):
            order = rng.permutation(len(features))
            for start in range(0, len(order), self.batch_size):
                rows = order[start : start + self.batch_size]
                optimizer.zero_grad()
                out = linear(features[rows], self.weight, self.bias)
                loss = (
                    binary_cross_entropy(out, targets[rows, None])
                    if self.binary
                    else mean_squared_error(out, targets[rows, None])
                )
                loss.backward()
                optimizer.step()
        self.n_train = len(labels)
        return self

    def decision(self, embeddings):
        """Logits for classification, label-scale values for regression."""
        raw = self._features(np.asarray(embeddings, dtype=float))
        out = raw @ self.weight.data[:, 0] + self.bias.data[0]
        return out * self.target_std + self.target_mean


def fit_probe(embeddings, labels, task, fraction, seed, probe_config=None):
    """Trains a :class:`LinearProbe` on a ``fraction`` sample of the rows."""
    task = task if isinstance(task, ProbeTask) else ProbeTask.parse(task)
    rng = derive_rng(seed, "fraction", task.name, fraction)
    labels = np.asarray(labels)
    rows = fraction_indices(
        len(labels), fraction, rng, labels if task.binary else None
    )
    probe = LinearProbe(
        task.binary,
        learning_rate=probe_config.learning_rate if probe_config else 1e-3,
        batch_size=probe_config.batch_size if probe_config else 1024,
        epochs=probe_config.epochs if probe_config else 300,
    )
    return probe.fit(
        np.asarray(embeddings)[rows], labels[rows], seed=seed
    )


@dataclass
class ProbeReport:
    task: str
    subset: str
    fraction: float
    metric: str
    value: float
    dispersion: float
    ci_low: float
    ci_high: float
    n_train: int
    n_samples: int
    model: str = "mae"

    def row(self):
        return [
            self.model,
            self.task,
            self.subset,
            f"{self.fraction:g}",
            self.metric,
            f"{self.value:.6f}",
            f"{self.dispersion:.6f}",
            f"{self.ci_low:.6f}",
            f"{self.ci_high:.6f}",
            self.n_train,
            self.n_samples,
        ]


def evaluate(task, preds, labels, n_bootstrap, seed):
    """``(value, dispersion, ci)`` for the task's metric; the dispersion is
    the std of absolute errors for MAE and the CI half-width for AU-ROC."""
    ci = bootstrap_ci(task.metric, preds, labels, n_bootstrap, seed)
    if task.binary:
        value = auroc(preds, labels)
        dispersion = (ci[1] - ci[0]) / 2.0
    else:
        value, dispersion = mae(preds, labels)
    return value, dispersion, ci


def _task_split(task, dataset):
    values, keep = task.targets(dataset)
    train = np.array([s == "train" for s in dataset.splits]) & keep
    test = np.array([s != "train" for s in dataset.splits]) & keep
    return values, np.flatnonzero(train), np.flatnonzero(test)


def undefined_report(task, subset, fraction, n_samples, model="mae"):
    """Placeholder row for a cell that could not be fitted."""
    nan = float("nan")
    return ProbeReport(
        task.name,
        subset,
        fraction,
        task.metric,
        nan,
        nan,
        nan,
        nan,
        0,
        n_samples,
        model=model,
    )


def run_benchmark(
    model,
    dataset,
    probe_config,
    supervised=None,
    hooks=(),
    model_name="mae",
):
    """One report per task, inference subset and label fraction.

    ``supervised`` optionally maps ``(task, subset, x, y)`` to a
    trained model whose predictions are reported alongside the probes.
    Cells without enough labelled data yield a row whose value is ``nan``.
    """
    tasks = [ProbeTask.parse(t) for t in probe_config.tasks]
    reports = []
    for subset in probe_config.subsets:
        label = "+".join(subset)
        embeddings = dataset_embeddings(model, dataset, subset)
        for task in tasks:
            values, train, test = _task_split(task, dataset)
            for fraction in probe_config.fractions:
                produced = [
                    _probe_report(
                        embeddings,
                        task,
                        label,
                        fraction,
                        values,
                        train,
                        test,
                        probe_config,
                        model_name,
                    )
                ]
                if supervised is not None:
                    produced.append(
                        _supervised_report(
                            supervised,
                            task,
                            subset,
                            fraction,
                            dataset,
                            values,
                            train,
                            test,
                            probe_config,
                        )
                    )
                for report in produced:
                    for hook in hooks:
                        hook.after_probe(report)
                reports.extend(produced)
    log.info("Probe benchmark produced %d reports", len(reports))
    return reports


def _probe_report(
    embeddings, task, label, fraction, values, train, test, config, name
):
    if len(train) == 0 or len(test) == 0:
        log.warning(
            "No fit for %s on %s: %d train / %d test samples",
            task.name,
            label,
            len(train),
            len(test),
        )
        return undefined_report(task, label, fraction, len(test), name)
    try:
        probe = fit_probe(
            embeddings[train],
            values[train],
            task,
            fraction,
            config.seed,
            config,
        )
    except DataError as e:
        log.warning("%s/%s/%g: %s", task.name, label, fraction, e)
        return undefined_report(task, label, fraction, len(test), name)
    preds = probe.decision(embeddings[test])
    value, dispersion, ci = evaluate(
        task, preds, values[test], config.bootstrap, config.seed
    )
    return ProbeReport(
        task.name,
        label,
        fraction,
        task.metric,
        value,
        dispersion,
        ci[0],
        ci[1],
        probe.n_train,
        len(test),
        model=name,
    )


def _supervised_report(
    train_fn, task, subset, fraction, dataset, values, train, test, config
):
    label = "+".join(subset)
    if len(train) == 0 or len(test) == 0:
        return undefined_report(
            task, label, fraction, len(test), "supervised"
        )
    rows = train[
        fraction_indices(
            len(train),
            fraction,
            derive_rng(config.seed, "fraction", task.name, fraction),
            values[train] if task.binary else None,
        )
    ]
    if task.binary and len(np.unique(values[rows])) < 2:
        log.warning(
            "supervised %s/%s/%g: one class only", task.name, label, fraction
        )
        return undefined_report(
            task, label, fraction, len(test), "supervised"
        )
    x = dataset.channel_array(subset)
    model = train_fn(task, subset, x[rows], values[rows])
    with model.frozen():
        preds = model.forward(x[test]).data
    mean, std = model.target_scale
    preds = preds * std + mean
    value, dispersion, ci = evaluate(
        task, preds, values[test], config.bootstrap, config.seed
    )
    return ProbeReport(
        task.name,
        label,
        fraction,
        task.metric,
        value,
        dispersion,
        ci[0],
        ci[1],
        len(rows),
        len(test),
        model="supervised",
    )


def format_reports(reports, tablefmt="simple"):
    return tabulate(
        [r.row() for r in reports], headers=RESULTS_HEADER, tablefmt=tablefmt
    )


def write_reports(reports, path):
    return write_delimited(path, RESULTS_HEADER, [r.row() for r in reports])
