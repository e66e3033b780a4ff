import unittest
from dataclasses import replace
from unittest.mock import MagicMock, patch

import numpy as np

from physio_mae.autodiff import Tensor
from physio_mae.config import LossConfig, MaskingConfig, TrainConfig
from physio_mae.errors import ConfigError, DataError, TrainingDivergedError
from physio_mae.masking import MaskBatch
from physio_mae.model import PhysioMAE, SupervisedModel
from physio_mae.training import (
    HISTORY_HEADER,
    Pretrainer,
    _batches,
    learning_rate_at,
    masked_region,
    micro_batch_loss,
    pretrain,
    single_ssl_config,
    train_baseline,
    train_supervised,
)
from physio_mae.utils import derive_rng, merge_dicts

from .utils import random_dataset, toy_config

TWO_STEP = {
    "masking": {"schedule": ["inter", "intra"]},
    "train": {"accumulation_steps": 2},
}


def merge_two_step(overrides):
    return merge_dicts(TWO_STEP, overrides)


class TestHelpers(unittest.TestCase):
    def test_batches_keep_remainder(self):
        batches = list(_batches(np.arange(5), 2))
        assert [list(b) for b in batches] == [[0, 1], [2, 3], [4]]

    def test_masked_region_expands_patches(self):
        mask = MaskBatch.sample(
            "signal:PPG",
            2,
            4,
            0.4,
            np.random.default_rng(0),
            ("ECG", "PPG", "ABP"),
        )
        region = masked_region(mask, 3)
        assert region["PPG"].shape == (2, 12)
        assert region["PPG"].sum() == 24
        assert region["ECG"].sum() == 0

    def test_masked_only_loss_differs(self):
        config = toy_config()
        model = PhysioMAE.from_config(config)
        x = random_dataset(n=2).channel_array()
        mask = MaskBatch.sample(
            "intra", 2, 4, 0.5, np.random.default_rng(1), model.signals
        )
        full, _ = micro_batch_loss(model, x, mask, config.loss)
        masked, _ = micro_batch_loss(
            model, x, mask, LossConfig({"loss_region": "masked_only"})
        )
        assert np.isfinite(masked.item())
        assert full.item() != masked.item()


def sine_dataset(n=12, length=200):
    """``random_dataset`` labels over clean per-channel sinusoids."""
    dataset = random_dataset(n=n, length=length)
    t = np.arange(length) / 100.0
    signals = np.stack(
        [
            [
                np.sin(2 * np.pi * f * t + 0.3 * i)
                for f in (1.0, 1.5, 2.0)
            ]
            for i in range(n)
        ]
    )
    return replace(dataset, signals=signals)


class TestLearningRate(unittest.TestCase):
    def test_constant_without_warmup(self):
        config = TrainConfig({"learning_rate": 0.01})
        for step in (0, 5, 99):
            assert learning_rate_at(step, 100, config) == 0.01

    def test_warmup_is_linear(self):
        config = TrainConfig({"learning_rate": 0.01, "warmup_steps": 4})
        rates = [learning_rate_at(s, 100, config) for s in range(5)]
        np.testing.assert_allclose(
            rates, [0.0025, 0.005, 0.0075, 0.01, 0.01], rtol=1e-12
        )

    def test_cosine_decays_to_floor(self):
        config = TrainConfig(
            {
                "learning_rate": 0.01,
                "warmup_steps": 2,
                "lr_schedule": "cosine",
                "min_lr_ratio": 0.1,
            }
        )
        rates = [learning_rate_at(s, 12, config) for s in range(12)]

        assert abs(rates[2] - 0.01) < 1e-15
        assert abs(rates[-1] - 0.001) < 1e-15
        assert all(b <= a for a, b in zip(rates[2:], rates[3:]))

    def test_invalid_schedule(self):
        with self.assertRaises(ConfigError):
            TrainConfig({"lr_schedule": "step"}).lr_schedule
        with self.assertRaises(ConfigError):
            TrainConfig({"warmup_steps": -1}).warmup_steps


class TestPretrainer(unittest.TestCase):
    def test_accumulated_gradient_is_sum_of_micro_batches(self):
        config = toy_config(TWO_STEP)
        dataset = random_dataset()
        model = PhysioMAE.from_config(config)
        reference = PhysioMAE.from_config(config)
        trainer = Pretrainer(
            model, config.train, config.masking, config.loss
        )
        captured = []

        def capture():
            captured.append(
                {
                    n: p.grad.copy()
                    for n, p in model.named_parameters()
                    if p.grad is not None
                }
            )

        # weights stay fixed, so every window can be replayed on a copy
        trainer.optimizer.step = MagicMock(side_effect=capture)
        result = trainer.run(dataset)

        assert result.steps == 2 and len(captured) == 2
        x_all = dataset.channel_array()
        train = [i for i, s in enumerate(dataset.splits) if s == "train"]
        order = derive_rng(0, "order", 0).permutation(train)
        expected = [{}, {}]
        for micro, rows in enumerate(_batches(order, 2)):
            mask = MaskBatch.sample(
                ["inter", "intra"][micro % 2],
                len(rows),
                4,
                0.4,
                derive_rng(0, "mask", micro),
                reference.signals,
            )
            reference.zero_grad()
            loss, _ = micro_batch_loss(
                reference, x_all[rows], mask, config.loss
            )
            loss.backward()
            window = expected[micro // 2]
            for name, p in reference.named_parameters():
                if p.grad is None:
                    continue
                window[name] = window.get(name, 0.0) + p.grad
        for step in range(2):
            for name, grad in expected[step].items():
                with self.subTest(step=step, parameter=name):
                    np.testing.assert_allclose(
                        captured[step][name], grad, rtol=1e-10, atol=1e-14
                    )

    def test_final_partial_window_is_applied(self):
        result = pretrain(random_dataset(), toy_config())

        assert result.micro_batches == 4
        assert result.steps == 1
        assert len(result.history) == 4
        assert {r.step for r in result.history} == {0}
        assert [r.micro_batch for r in result.history] == [0, 1, 2, 3]
        assert [r.strategy for r in result.history] == [
            "inter",
            "intra",
            "signal:ECG",
            "signal:PPG",
        ]
        assert result.rng_state == {"seed": 0, "micro_batches": 4}

    def test_history_rows(self):
        result = pretrain(random_dataset(), toy_config(TWO_STEP))
        rows = result.rows()
        assert len(rows) == 4
        assert all(len(row) == len(HISTORY_HEADER) for row in rows)
        assert len(result.epoch_losses()) == 1
        assert len(result.step_losses()) == 2

    def test_weights_change(self):
        config = toy_config()
        model = PhysioMAE.from_config(config)
        before = model.state_dict()
        pretrain(random_dataset(), config, model=model)
        after = model.state_dict()
        assert any(not np.array_equal(before[k], after[k]) for k in before)

    def test_deterministic_per_seed(self):
        a = pretrain(random_dataset(), toy_config())
        b = pretrain(random_dataset(), toy_config())
        c = pretrain(random_dataset(), toy_config({"seed": 1}))

        assert [r.loss for r in a.history] == [r.loss for r in b.history]
        for name, value in a.model.state_dict().items():
            np.testing.assert_array_equal(
                value, b.model.params[name].data
            )
        assert [r.loss for r in a.history] != [r.loss for r in c.history]

    def test_hooks_receive_steps(self):
        hook = MagicMock()
        pretrain(random_dataset(), toy_config(TWO_STEP), hooks=[hook])

        assert hook.after_step.call_count == 2
        step, metrics = hook.after_step.call_args[0]
        assert step == 2
        assert set(metrics) == {"loss", "lr"}

    def test_loss_falls_over_thirty_steps(self):
        config = toy_config(
            merge_two_step(
                {"train": {"epochs": 15, "learning_rate": 0.01}}
            )
        )

        result = pretrain(sine_dataset(), config)

        assert result.steps == 30
        losses = result.epoch_losses()
        assert len(losses) == 15
        assert losses[-1] < losses[0]

    def test_optimizer_follows_schedule(self):
        config = toy_config(
            merge_two_step(
                {
                    "train": {
                        "epochs": 3,
                        "learning_rate": 0.01,
                        "warmup_steps": 2,
                        "lr_schedule": "cosine",
                    }
                }
            )
        )
        hook = MagicMock()

        pretrain(random_dataset(), config, hooks=[hook])

        rates = [c[0][1]["lr"] for c in hook.after_step.call_args_list]
        expected = [learning_rate_at(s, 6, config.train) for s in range(6)]
        np.testing.assert_allclose(rates, expected, rtol=1e-12)

    def test_schedule_length_mismatch(self):
        config = toy_config()
        with self.assertRaises(ConfigError):
            toy_config({"train": {"accumulation_steps": 5}})
        with self.assertRaises(ConfigError):
            Pretrainer(
                PhysioMAE.from_config(config),
                TrainConfig({"accumulation_steps": 3}),
                MaskingConfig({}),
                config.loss,
            )

    def test_no_training_samples(self):
        config = toy_config()
        dataset = random_dataset(splits=["val"] * 12)
        with self.assertRaises(DataError):
            pretrain(dataset, config)

    def test_non_finite_loss(self):
        config = toy_config()
        nan = (Tensor(np.array(np.nan)), {})
        with patch(
            "physio_mae.training.micro_batch_loss", return_value=nan
        ):
            with self.assertRaises(TrainingDivergedError):
                pretrain(random_dataset(), config)


class TestBaselines(unittest.TestCase):
    def test_single_ssl_config(self):
        config = single_ssl_config(toy_config(), "PPG")

        assert config.model.signals == ("PPG",)
        assert config.model.type_embedding is False
        assert config.model.cross_attention is False
        assert config.train.accumulation_steps == 1
        with self.assertRaises(ConfigError):
            single_ssl_config(toy_config(), "EEG")

    def test_single_ssl_pretrains_one_signal(self):
        model = train_baseline(
            "single_ssl", random_dataset(), toy_config(), signal="ECG"
        )
        assert model.signals == ("ECG",)
        assert not any(".type" in name for name in model.params)

    def test_supervised_regression(self):
        dataset = random_dataset()
        x = dataset.channel_array(("ECG", "PPG"))
        targets = dataset.label_array("sbp")

        model = train_supervised(
            x, targets, toy_config(), ("ECG", "PPG"), binary=False, epochs=2
        )

        assert isinstance(model, SupervisedModel)
        assert model.signals == ("ECG", "PPG")
        assert model.forward(x).shape == (12,)
        mean, std = model.target_scale
        assert abs(mean - targets.mean()) < 1e-12
        assert abs(std - targets.std()) < 1e-12

    def test_supervised_binary(self):
        dataset = random_dataset()
        labels = dataset.label_array("hypotensive")
        model = train_supervised(
            dataset.channel_array(("PPG",)),
            labels,
            toy_config(),
            ("PPG",),
            binary=True,
            epochs=1,
        )
        assert model.target_scale == (0.0, 1.0)

    def test_supervised_baseline_needs_targets(self):
        with self.assertRaises(ConfigError):
            train_baseline("supervised", random_dataset(), toy_config())
        with self.assertRaises(ConfigError):
            train_baseline("unknown", random_dataset(), toy_config())
