"""Masked reconstruction of held-out samples and plot-ready output."""
import logging
from collections import OrderedDict
from pathlib import Path

import numpy as np
from tabulate import tabulate

from .autodiff.gradcheck import grad_check_params
from .losses import pearson
from .masking import MaskBatch, MaskStrategy
from .training import micro_batch_loss
from .utils import derive_rng, write_delimited

log = logging.getLogger(__name__)

PLOT_HEADER = ["time", "original", "reconstructed", "masked"]
SUMMARY_HEADER = ["signal", "median_pcc", "median_rmse", "n"]
CHUNK = 256


def _masks(model, strategy, count, ratio, rng):
    return MaskBatch.sample(
        strategy, count, model.n_patches, ratio, rng, model.signals
    )


def reconstruct(model, x, strategy, ratio, seed, offset=0):
    """Reconstructions and masks for ``(B, S, L)`` inputs.

    Sample ``offset + b`` always draws its mask from the same generator,
    so chunked and whole-batch calls agree.
    """
    strategy = MaskStrategy.parse(strategy)
    masks = [
        _masks(
            model, strategy, 1, ratio, derive_rng(seed, "reconstruct", i)
        ).masks[0]
        for i in range(offset, offset + len(x))
    ]
    batch = MaskBatch(masks)
    return model.reconstruct(x, batch), batch


def plot_rows(model, original, reconstructed, mask, signal, fs_hz):
    """Rows ``(time, original, reconstructed, masked)`` for one signal of
    one sample."""
    index = model.signals.index(signal)
    flags = np.repeat(mask.masked[index], model.patch_len)
    times = np.arange(len(original)) / fs_hz
    return [
        [f"{t:.4f}", f"{o:.6g}", f"{r:.6g}", int(m)]
        for t, o, r, m in zip(times, original, reconstructed, flags)
    ]


def write_plot_data(model, dataset, strategy, ratio, seed, out, sample=0):
    """One delimited file per signal for ``dataset`` sample ``sample``."""
    out = Path(out)
    x = dataset.channel_array(model.signals)[sample : sample + 1]
    outputs, batch = reconstruct(model, x, strategy, ratio, seed, sample)
    paths = OrderedDict()
    for i, name in enumerate(model.signals):
        rows = plot_rows(
            model,
            x[0, i],
            outputs[name][0],
            batch.masks[0],
            name,
            dataset.fs_hz,
        )
        paths[name] = write_delimited(
            out / f"reconstruction_{name}.csv", PLOT_HEADER, rows
        )
    return paths


def summarize(model, dataset, strategy, ratio, seed, split="val"):
    """Median per-sample PCC and RMSE per signal over ``split``."""
    subset = dataset.split(split) if split else dataset
    if len(subset) == 0:
        subset = dataset
    x = subset.channel_array(model.signals)
    scores = {name: ([], []) for name in model.signals}
    for start in range(0, len(x), CHUNK):
        chunk = x[start : start + CHUNK]
        outputs, _ = reconstruct(model, chunk, strategy, ratio, seed, start)
        for i, name in enumerate(model.signals):
            for original, recon in zip(chunk[:, i], outputs[name]):
                scores[name][0].append(pearson(original, recon))
                scores[name][1].append(
                    float(np.sqrt(np.mean((original - recon) ** 2)))
                )
    return [
        [
            name,
            float(np.nanmedian(pccs)) if np.isfinite(pccs).any() else np.nan,
            float(np.median(rmses)),
            len(rmses),
        ]
        for name, (pccs, rmses) in scores.items()
    ]


def format_summary(rows):
    return tabulate(rows, headers=SUMMARY_HEADER, floatfmt=".4f")


def check_model_gradients(
    model,
    loss_config,
    strategy="inter",
    ratio=0.4,
    batch_size=2,
    seed=0,
    tol=1e-4,
    max_elements=8,
):
    """Finite-difference check of the full reconstruction loss."""
    rng = derive_rng(seed, "gradcheck")
    x = rng.normal(
        0.0,
        1.0,
        (batch_size, len(model.signals), model.n_patches * model.patch_len),
    )
    mask = _masks(model, strategy, batch_size, ratio, rng)

    def loss_fn():
        return micro_batch_loss(model, x, mask, loss_config)[0]

    return grad_check_params(
        loss_fn,
        OrderedDict(model.named_parameters()),
        tol=tol,
        max_elements=max_elements,
        seed=seed,
    )
