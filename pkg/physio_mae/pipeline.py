"""End-to-end kedro pipeline: synthesize, preprocess, pretrain, probe."""
import logging

from kedro.framework.hooks import get_hook_manager
from kedro.io import DataCatalog, MemoryDataSet
from kedro.pipeline import Pipeline, node
from kedro.runner import SequentialRunner

from .hooks import mlflow_metrics_hook
from .preprocess import preprocess_dataset
from .probe import run_benchmark
from .sigsynth import generate_cohort
from .training import pretrain

log = logging.getLogger(__name__)

DATASETS = (
    "experiment",
    "raw_cohort",
    "clean_cohort",
    "preprocess_result",
    "pretrained_model",
    "training_result",
    "probe_reports",
)


def synthesize(experiment):
    return generate_cohort(experiment.synth)


def clean(raw_cohort, experiment):
    result = preprocess_dataset(raw_cohort, experiment.preprocess)
    return result.dataset, result


def train(clean_cohort, experiment):
    result = pretrain(clean_cohort, experiment, hooks=[mlflow_metrics_hook])
    return result.model, result


def evaluate(pretrained_model, clean_cohort, experiment):
    return run_benchmark(
        pretrained_model,
        clean_cohort,
        experiment.probe,
        hooks=[mlflow_metrics_hook],
    )


def create_pipeline(**kwargs):
    return Pipeline(
        [
            node(
                synthesize,
                inputs="experiment",
                outputs="raw_cohort",
                name="synthesize",
            ),
            node(
                clean,
                inputs=["raw_cohort", "experiment"],
                outputs=["clean_cohort", "preprocess_result"],
                name="preprocess",
            ),
            node(
                train,
                inputs=["clean_cohort", "experiment"],
                outputs=["pretrained_model", "training_result"],
                name="pretrain",
            ),
            node(
                evaluate,
                inputs=["pretrained_model", "clean_cohort", "experiment"],
                outputs="probe_reports",
                name="probe",
            ),
        ]
    )


def _register_hooks():
    manager = get_hook_manager()
    if not manager.is_registered(mlflow_metrics_hook):
        manager.register(mlflow_metrics_hook)


def run_pipeline(experiment, pipeline=None):
    """Runs ``pipeline`` (default: the full chain) and returns the datasets
    still held once it finishes, by name.

    The runner releases intermediates after their last use, so callers read
    the cohort and model from ``preprocess_result`` and ``training_result``.
    """
    _register_hooks()
    catalog = DataCatalog(
        {
            name: MemoryDataSet(copy_mode="assign")
            for name in DATASETS
            if name != "experiment"
        }
    )
    catalog.add("experiment", MemoryDataSet(experiment, copy_mode="assign"))
    pipeline = pipeline or create_pipeline()
    SequentialRunner().run(pipeline, catalog)
    produced = {}
    for name in DATASETS:
        if catalog.exists(name):
            produced[name] = catalog.load(name)
    log.info("Pipeline finished: %s", ", ".join(sorted(produced)))
    return produced
