import os

from kedro.framework.hooks import hook_impl

from .utils import is_mlflow_enabled

MLFLOW_SWITCH = "PHYSIO_MLFLOW"


class MlflowMetricsHook:
    """Logs step losses and probe metrics to MLflow when PHYSIO_MLFLOW=1"""

    @property
    def enabled(self):
        return os.getenv(MLFLOW_SWITCH) == "1" and is_mlflow_enabled()

    def after_step(self, step, metrics):
        if self.enabled:
            import mlflow

            mlflow.log_metrics(
                {f"pretrain_{k}": v for k, v in metrics.items()}, step=step
            )

    def after_probe(self, report):
        if self.enabled:
            import mlflow

            key = "_".join(
                [report.model, report.task, report.subset, report.metric]
            )
            mlflow.log_metric(
                key.replace("+", "_").replace("@", "_at_"),
                report.value,
                step=int(round(report.fraction * 100)),
            )

    @hook_impl
    def before_node_run(self, node) -> None:
        if self.enabled:
            import mlflow

            mlflow.set_tag("physio_node", node.name)


mlflow_metrics_hook = MlflowMetricsHook()
