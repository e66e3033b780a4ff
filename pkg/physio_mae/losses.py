"""Reconstruction and probe losses.

Reconstruction terms are computed per sample along the last axis and then
averaged over the batch. ``weights`` restricts a term to a region (1 inside,
0 outside) and must broadcast against the signals.
"""
from collections import OrderedDict

import numpy as np

from .autodiff import ops
from .autodiff.tensor import as_tensor
from .errors import DimensionError

VARIANCE_FLOOR = 1e-12


def _check_pair(target, recon):
    if target.shape != recon.shape:
        raise DimensionError(
            f"Target {target.shape} and reconstruction {recon.shape} differ"
        )
    if target.shape[-1] < 1:
        raise DimensionError("Cannot compare empty signals")


def _region_mean(x, weights):
    if weights is None:
        return ops.mean(x, axis=-1)
    weights = np.asarray(weights, dtype=float)
    counts = np.maximum(weights.sum(axis=-1), 1.0)
    return ops.div(ops.sum(ops.mul(x, weights), axis=-1), counts)


def _trailing(x):
    return ops.reshape(x, x.shape + (1,))


def rmse(target, recon, weights=None):
    """Root mean squared error along the last axis."""
    target, recon = as_tensor(target), as_tensor(recon)
    _check_pair(target, recon)
    return ops.sqrt(_region_mean(ops.square(ops.sub(target, recon)), weights))


def pcc(target, recon, weights=None):
    """Pearson correlation along the last axis.

    Where either input has (near) zero variance the result is 0.
    """
    target, recon = as_tensor(target), as_tensor(recon)
    _check_pair(target, recon)
    dx = ops.sub(target, _trailing(_region_mean(target, weights)))
    dy = ops.sub(recon, _trailing(_region_mean(recon, weights)))
    if weights is not None:
        dx = ops.mul(dx, weights)
        dy = ops.mul(dy, weights)
    covariance = ops.sum(ops.mul(dx, dy), axis=-1)
    spread = ops.mul(
        ops.sum(ops.square(dx), axis=-1), ops.sum(ops.square(dy), axis=-1)
    )
    valid = (spread.data > VARIANCE_FLOOR).astype(float)
    denominator = ops.add(ops.sqrt(spread), 1.0 - valid)
    return ops.mul(ops.div(covariance, denominator), valid)


def pearson(x, y):
    """Plain correlation coefficient; ``nan`` for zero-variance input."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise DimensionError(f"Shapes {x.shape} and {y.shape} differ")
    dx, dy = x - x.mean(), y - y.mean()
    spread = np.sqrt(np.sum(dx * dx) * np.sum(dy * dy))
    if spread <= np.sqrt(VARIANCE_FLOOR):
        return float("nan")
    return float(np.sum(dx * dy) / spread)


def pcc_term(correlation, mode):
    if mode == "negative_pcc":
        return correlation
    return ops.sub(1.0, correlation)


def total_loss(reconstructions, targets, loss_config, weights=None):
    """``alpha * sum RMSE + beta * sum pcc_term`` over signals.

    ``reconstructions`` and ``targets`` map signal names to ``(B, L)``
    arrays. ``weights`` optionally maps names to region masks; a signal
    whose region is empty for every sample is skipped. Returns the batch
    mean loss and per-signal component means.
    """
    missing = [name for name in reconstructions if name not in targets]
    if missing:
        raise DimensionError(f"No targets for {missing}")
    total = None
    components = OrderedDict()
    for name, recon in reconstructions.items():
        region = None if weights is None else weights.get(name)
        if region is not None and not np.any(region):
            continue
        error = rmse(targets[name], recon, region)
        correlation = pcc(targets[name], recon, region)
        shape_term = pcc_term(correlation, loss_config.pcc_mode)
        term = ops.add(
            ops.mul(error, loss_config.alpha),
            ops.mul(shape_term, loss_config.beta),
        )
        total = term if total is None else ops.add(total, term)
        components[name] = {
            "rmse": float(np.mean(error.data)),
            "pcc": float(np.mean(correlation.data)),
        }
    if total is None:
        raise DimensionError("No signal contributed to the loss")
    return ops.mean(total), components


def binary_cross_entropy(logits, labels):
    """Mean ``softplus(z) - y * z``, the stable form of BCE on logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=float)
    return ops.mean(ops.sub(ops.softplus(logits), ops.mul(logits, labels)))


def mean_squared_error(preds, labels):
    preds = as_tensor(preds)
    return ops.mean(ops.square(ops.sub(preds, np.asarray(labels, float))))
