import os
from contextlib import contextmanager

import numpy as np

from physio_mae.config import ExperimentConfig
from physio_mae.dataset import Dataset, SampleLabels


@contextmanager
def environment(env, delete_keys=None):
    original_environ = os.environ.copy()
    os.environ.update(env)
    if delete_keys is None:
        delete_keys = []
    for key in delete_keys:
        os.environ.pop(key, None)

    yield
    os.environ = original_environ


def toy_config(overrides=None):
    return ExperimentConfig.from_preset("toy", overrides).validate()


def random_dataset(n=12, length=200, seed=0, splits=None):
    """Gaussian signals with spread-out labels; alternating splits unless
    given."""
    rng = np.random.default_rng(seed)
    labels = []
    for i in range(n):
        dbp = 55.0 + 4.0 * i
        labels.append(
            SampleLabels.from_pressures(
                sbp=dbp + 30.0 + (i % 3) * 5.0,
                dbp=dbp,
                sv_proxy=40.0 + 3.0 * i,
                age_proxy=30.0 + 2.0 * i,
                horizons={5: i % 2 == 0, 10: None if i % 4 == 1 else True},
            )
        )
    return Dataset(
        signals=rng.normal(size=(n, 3, length)),
        labels=labels,
        sample_ids=[f"t{i:03d}" for i in range(n)],
        splits=splits or ["train" if i % 3 else "val" for i in range(n)],
        fs_hz=100.0,
        sample_seconds=length / 100.0,
    )
