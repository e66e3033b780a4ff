import logging
from functools import wraps
from pathlib import Path

import click
import numpy as np
from kedro.config import MissingConfigException
from tabulate import tabulate

from .config import (
    ABLATIONS,
    PRESETS,
    SIGNALS,
    ExperimentConfig,
    parse_signals,
)
from .context_helper import ContextHelper
from .errors import ConfigError, PhysioError
from .hooks import mlflow_metrics_hook
from .masking import MaskStrategy
from .model import PhysioMAE
from .pipeline import run_pipeline
from .preprocess import preprocess_dataset
from .probe import format_reports, run_benchmark, write_reports
from .reconstruction import (
    SUMMARY_HEADER,
    check_model_gradients,
    format_summary,
    summarize,
    write_plot_data,
)
from .sigsynth import generate_cohort
from .storage import (
    load_checkpoint,
    load_dataset,
    read_manifest,
    save_checkpoint,
    save_dataset,
)
from .training import (
    HISTORY_HEADER,
    pretrain,
    train_baseline,
    train_supervised,
)
from .utils import write_delimited

LOG = logging.getLogger(__name__)

SWEEPS = {
    "patch-seconds": ("patch", "patch_seconds", [0.5, 1.0, 2.0, 2.5]),
    "mask-ratio": ("masking", "ratio", [0.3, 0.4, 0.5, 0.6, 0.7, 0.8]),
}


def format_overrides(
    seed=None,
    mask_ratio=None,
    patch_seconds=None,
    schedule=None,
    signals=None,
    fraction=None,
    ablation=None,
):
    """Nested config overrides for the flags that were given."""
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if mask_ratio is not None:
        overrides.setdefault("masking", {})["ratio"] = mask_ratio
    if patch_seconds is not None:
        overrides["patch"] = {"patch_seconds": patch_seconds}
    if schedule:
        entries = [s.strip() for s in schedule.split(",") if s.strip()]
        overrides.setdefault("masking", {})["schedule"] = entries
        overrides["train"] = {"accumulation_steps": len(entries)}
    if signals:
        overrides["model"] = {"signals": list(parse_signals(signals))}
    if fraction is not None:
        overrides["probe"] = {"fractions": [fraction]}
    if ablation:
        overrides["ablation"] = ablation
    return overrides


def reports_errors(command):
    """Maps package errors to ``error:<category>: <message>`` and the
    category's exit status."""

    @wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except PhysioError as e:
            click.echo(f"error:{e.category}: {e}", err=True)
            click.get_current_context().exit(e.exit_code)
        except MissingConfigException as e:
            click.echo(f"error:config: {e}", err=True)
            click.get_current_context().exit(2)

    return wrapper


def experiment_options(command):
    options = [
        click.option(
            "-c",
            "--config",
            "config_path",
            type=click.Path(dir_okay=False),
            default=None,
            help="Experiment YAML (default: conf/base/physio*.yml).",
        ),
        click.option(
            "--preset",
            type=click.Choice(sorted(PRESETS)),
            default=None,
            help="Built-in defaults the config file is layered on.",
        ),
        click.option("--seed", type=int, default=None, help="Global seed."),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def model_options(command):
    options = [
        click.option("--mask-ratio", type=float, default=None),
        click.option("--patch-seconds", type=float, default=None),
        click.option(
            "--schedule",
            type=str,
            default=None,
            help="Comma-separated strategies, e.g. inter,intra,signal:ABP",
        ),
        click.option(
            "--signals",
            type=str,
            default=None,
            help="Signals the model is built for, e.g. ECG+PPG+ABP",
        ),
        click.option(
            "--ablation",
            type=click.Choice(sorted(ABLATIONS)),
            default=None,
        ),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _helper(ctx, config_path, preset, **flags):
    ctx.obj["context_helper"] = ContextHelper.init(
        config_path, preset, format_overrides(**flags)
    )
    return ctx.obj["context_helper"]


def _out(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


@click.group(
    "physio-mae", context_settings=dict(help_option_names=["-h", "--help"])
)
@click.option("-v", "--verbose", is_flag=True, default=False)
@click.pass_context
def commands(ctx, verbose):
    """Multimodal masked autoencoder for ECG, PPG and ABP"""
    ctx.ensure_object(dict)
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@commands.command()
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="desk")
@click.option("--seed", type=int, default=None)
@click.option(
    "-o", "--out", type=str, default="conf/base/physio.yml", help="Target."
)
@reports_errors
def init(preset, seed, out):
    """Writes a commented sample experiment config"""
    defaults = PRESETS[preset]
    sample_config = ExperimentConfig.sample_config(
        preset=preset,
        seed=seed if seed is not None else defaults["seed"],
        n_samples=defaults["synth"]["n_samples"],
    )
    config_path = Path(out)
    config_path.parent.mkdir(parents=True, exist_ok=True)
    with open(config_path, "w") as f:
        f.write(sample_config)

    click.echo(f"Configuration generated in {config_path}")


@commands.command()
@click.argument("path", type=click.Path(exists=True, file_okay=False))
@reports_errors
def info(path):
    """Prints a dataset or checkpoint manifest"""
    manifest = read_manifest(path)
    rows = [
        [key, value]
        for key, value in manifest.items()
        if not isinstance(value, (dict, list))
    ]
    if "tensors" in manifest:
        rows.append(["tensors", len(manifest["tensors"])])
        rows.append(
            [
                "parameters",
                sum(
                    int(np.prod(t["shape"], dtype=np.int64))
                    for t in manifest["tensors"]
                ),
            ]
        )
    if "channels" in manifest:
        rows.append(["channels", "+".join(manifest["channels"])])
    click.echo(tabulate(rows, headers=["key", "value"]))


@commands.command()
@experiment_options
@click.option("-o", "--out", type=str, default="data/raw", help="Target.")
@click.pass_context
@reports_errors
def synth(ctx, config_path, preset, seed, out):
    """Generates a synthetic ECG/PPG/ABP cohort"""
    config = _helper(ctx, config_path, preset, seed=seed).config
    dataset = generate_cohort(config.synth)
    save_dataset(dataset, _out(out))
    click.echo(f"Wrote {len(dataset)} samples to {out}")


@commands.command()
@click.argument("data", type=click.Path(exists=True, file_okay=False))
@experiment_options
@click.option("-o", "--out", type=str, default="data/clean", help="Target.")
@click.pass_context
@reports_errors
def preprocess(ctx, data, config_path, preset, seed, out):
    """Filters, quality-gates and normalizes a cohort"""
    config = _helper(ctx, config_path, preset, seed=seed).config
    result = preprocess_dataset(load_dataset(data), config.preprocess)
    out = _out(out)
    save_dataset(result.dataset, out)
    write_delimited(
        out / "qc_report.csv", ["sample_id", "reason"], result.report_rows()
    )
    click.echo(
        tabulate(
            sorted(result.rejection_counts.items()),
            headers=["reason", "samples"],
        )
    )


@commands.command("pretrain")
@click.argument("data", type=click.Path(exists=True, file_okay=False))
@experiment_options
@model_options
@click.option("-o", "--out", type=str, default="data/model", help="Target.")
@click.pass_context
@reports_errors
def pretrain_command(ctx, data, config_path, preset, out, **flags):
    """Pretrains the masked autoencoder and saves a checkpoint"""
    config = _helper(ctx, config_path, preset, **flags).config
    dataset = load_dataset(data)
    if dataset.normalization is None:
        LOG.warning("%s has no normalization stats; run preprocess", data)
    result = pretrain(dataset, config, hooks=[mlflow_metrics_hook])
    out = _out(out)
    save_checkpoint(
        result.model,
        out,
        config,
        step=result.steps,
        rng_state=result.rng_state,
        normalization=dataset.normalization,
    )
    write_delimited(out / "loss_history.csv", HISTORY_HEADER, result.rows())
    losses = result.epoch_losses()
    click.echo(
        tabulate(
            [[i, f"{loss:.6f}"] for i, loss in enumerate(losses)],
            headers=["epoch", "mean loss"],
        )
    )


@commands.command()
@click.argument("checkpoint", type=click.Path(exists=True, file_okay=False))
@click.argument("data", type=click.Path(exists=True, file_okay=False))
@click.option(
    "-s",
    "--strategy",
    type=str,
    default="signal:ABP",
    help="Masking strategy, e.g. inter, intra, signal:ABP",
)
@click.option("--sample", type=int, default=0, help="Sample to plot.")
@click.option("--mask-ratio", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("-o", "--out", type=str, default="data/reconstruction")
@reports_errors
def reconstruct(checkpoint, data, strategy, sample, mask_ratio, seed, out):
    """Writes plot data and a quality summary for masked reconstruction"""
    model, config, _ = load_checkpoint(checkpoint)
    dataset = load_dataset(data)
    strategy = MaskStrategy.parse(strategy)
    ratio = config.masking.ratio if mask_ratio is None else mask_ratio
    seed = config.seed if seed is None else seed
    out = _out(out)
    write_plot_data(model, dataset, strategy, ratio, seed, out, sample)
    rows = summarize(model, dataset, strategy, ratio, seed)
    write_delimited(out / "reconstruction_summary.csv", SUMMARY_HEADER, rows)
    click.echo(format_summary(rows))


def baseline_option(command):
    return click.option(
        "--baseline",
        "baselines",
        type=str,
        multiple=True,
        help="Extra one-signal model to benchmark, e.g. single_ssl:PPG.",
    )(command)


def parse_baseline(value):
    """``single_ssl:<SIGNAL>`` to the signal name."""
    kind, _, signal = str(value).partition(":")
    signal = signal.strip().upper()
    if kind.strip() != "single_ssl" or signal not in SIGNALS:
        raise ConfigError(
            f"Invalid baseline {value}: expected single_ssl:<ECG|PPG|ABP>"
        )
    return signal


def baseline_reports(baselines, dataset, config, hooks=()):
    """Pretrains one single-signal model per entry and probes it on its
    own signal."""
    reports = []
    for signal in [parse_baseline(b) for b in baselines]:
        LOG.info("Baseline single_ssl:%s", signal)
        model = train_baseline("single_ssl", dataset, config, signal=signal)
        probe_config = config.with_overrides(
            {"probe": {"subsets": [[signal]]}}
        ).probe
        reports.extend(
            run_benchmark(
                model,
                dataset,
                probe_config,
                hooks=hooks,
                model_name=f"single_ssl:{signal}",
            )
        )
    return reports


def _supervised_trainer(config, normalization):
    def train(task, subset, x, y):
        return train_supervised(
            x,
            y,
            config,
            subset,
            task.binary,
            normalization=normalization,
        )

    return train


@commands.command("probe")
@click.argument("checkpoint", type=click.Path(exists=True, file_okay=False))
@click.argument("data", type=click.Path(exists=True, file_okay=False))
@click.option("--seed", type=int, default=None)
@click.option(
    "--signals", type=str, default=None, help="Inference subset, e.g. ECG+PPG"
)
@click.option("--fraction", type=float, default=None)
@click.option(
    "--task", "tasks", type=str, multiple=True, help="Probe task(s)."
)
@click.option(
    "--supervised",
    is_flag=True,
    default=False,
    help="Also train the supervised baseline per setting.",
)
@baseline_option
@click.option("-o", "--out", type=str, default="data/probe")
@reports_errors
def probe_command(
    checkpoint,
    data,
    seed,
    signals,
    fraction,
    tasks,
    supervised,
    baselines,
    out,
):
    """Linear probes on frozen embeddings; writes a results table"""
    model, config, _ = load_checkpoint(checkpoint)
    probe = {}
    if signals:
        probe["subsets"] = [list(parse_signals(signals))]
    if fraction is not None:
        probe["fractions"] = [fraction]
    if tasks:
        probe["tasks"] = list(tasks)
    overrides = {"probe": probe}
    if seed is not None:
        overrides["seed"] = seed
        overrides["probe"]["seed"] = seed
    config = config.with_overrides(overrides)
    dataset = load_dataset(data)
    reports = run_benchmark(
        model,
        dataset,
        config.probe,
        supervised=(
            _supervised_trainer(config, dataset.normalization)
            if supervised
            else None
        ),
        hooks=[mlflow_metrics_hook],
    )
    reports.extend(
        baseline_reports(
            baselines, dataset, config, hooks=[mlflow_metrics_hook]
        )
    )
    write_reports(reports, _out(out) / "results.csv")
    click.echo(format_reports(reports))


@commands.command()
@experiment_options
@click.option("--tol", type=float, default=1e-4)
@click.option("--max-elements", type=int, default=8)
@click.pass_context
@reports_errors
def gradcheck(ctx, config_path, preset, seed, tol, max_elements):
    """Finite-difference check of the full model gradient"""
    config = _helper(ctx, config_path, preset or "toy", seed=seed).config
    model = PhysioMAE.from_config(config)
    report = check_model_gradients(
        model,
        config.loss,
        ratio=config.masking.ratio,
        seed=config.seed,
        tol=tol,
        max_elements=max_elements,
    )
    click.echo(tabulate(report.rows(), headers=["tensor", "max rel error"]))
    status = "passed" if report.passed else "FAILED"
    click.echo(
        f"Gradient check {status}: {report.n_checked} elements, max "
        f"relative error {report.max_rel_error:.3e} (tol {tol:.1e})"
    )
    if not report.passed:
        click.echo(f"error:gradcheck: {report.message}", err=True)
        ctx.exit(1)


@commands.command()
@experiment_options
@model_options
@click.option("-o", "--out", type=str, default="data/run", help="Target.")
@click.pass_context
@reports_errors
def run(ctx, config_path, preset, out, **flags):
    """Runs synthesize, preprocess, pretrain and probe as one pipeline"""
    config = _helper(ctx, config_path, preset, **flags).config
    produced = run_pipeline(config)
    out = _out(out)
    cleaned = produced["preprocess_result"]
    training = produced["training_result"]
    save_dataset(cleaned.dataset, out / "clean")
    write_delimited(
        out / "clean" / "qc_report.csv",
        ["sample_id", "reason"],
        cleaned.report_rows(),
    )
    save_checkpoint(
        training.model,
        out / "model",
        config,
        step=training.steps,
        rng_state=training.rng_state,
        normalization=cleaned.dataset.normalization,
    )
    write_delimited(
        out / "model" / "loss_history.csv", HISTORY_HEADER, training.rows()
    )
    reports = produced["probe_reports"]
    write_reports(reports, out / "results.csv")
    click.echo(format_reports(reports))


@commands.command()
@click.argument("data", type=click.Path(exists=True, file_okay=False))
@experiment_options
@click.option(
    "--ablation",
    "ablations",
    type=click.Choice(sorted(ABLATIONS)),
    multiple=True,
    help="Variants to train (default: all).",
)
@baseline_option
@click.option("-o", "--out", type=str, default="data/ablation")
@click.pass_context
@reports_errors
def ablate(ctx, data, config_path, preset, seed, ablations, baselines, out):
    """Trains each ablation variant and compares probe results"""
    base = _helper(ctx, config_path, preset, seed=seed).config
    for value in baselines:
        parse_baseline(value)
    dataset = load_dataset(data)
    reports = []
    for name in ablations or list(ABLATIONS):
        LOG.info("Ablation %s", name)
        config = base.with_ablation(name).validate()
        model = pretrain(dataset, config).model
        reports.extend(
            run_benchmark(model, dataset, config.probe, model_name=name)
        )
    reports.extend(baseline_reports(baselines, dataset, base.validate()))
    write_reports(reports, _out(out) / "ablation.csv")
    click.echo(format_reports(reports))


@commands.command()
@click.argument("data", type=click.Path(exists=True, file_okay=False))
@click.option(
    "--axis", type=click.Choice(sorted(SWEEPS)), required=True, help="Axis."
)
@click.option(
    "--values", type=str, default=None, help="Comma-separated settings."
)
@experiment_options
@click.option("-o", "--out", type=str, default="data/sweep")
@click.pass_context
@reports_errors
def sweep(ctx, data, axis, values, config_path, preset, seed, out):
    """Pretrains and probes once per patch length or masking ratio"""
    base = _helper(ctx, config_path, preset, seed=seed).config
    section, key, settings = SWEEPS[axis]
    if values:
        settings = [float(v) for v in values.split(",") if v.strip()]
    dataset = load_dataset(data)
    reports = []
    for setting in settings:
        LOG.info("Sweep %s=%s", axis, setting)
        config = base.with_overrides({section: {key: setting}}).validate()
        model = pretrain(dataset, config).model
        reports.extend(
            run_benchmark(
                model,
                dataset,
                config.probe,
                model_name=f"{axis}={setting:g}",
            )
        )
    write_reports(reports, _out(out) / f"sweep_{axis}.csv")
    click.echo(format_reports(reports))
