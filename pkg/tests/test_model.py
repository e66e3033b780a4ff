import unittest

import numpy as np

from physio_mae.autodiff import Tensor, ops
from physio_mae.config import SIGNALS, DecoderConfig
from physio_mae.errors import ConfigError, DimensionError, InternalError
from physio_mae.masking import MaskBatch, MaskIndex, MaskStrategy, sample_mask
from physio_mae.model import (
    PhysioMAE,
    SupervisedModel,
    encoder_checksum,
)

from .utils import toy_config


def toy_model(overrides=None, seed=None):
    config = toy_config(overrides)
    if seed is not None:
        config = config.with_overrides({"seed": seed})
    return PhysioMAE.from_config(config)


def toy_input(batch=2, seed=0):
    return np.random.default_rng(seed).normal(size=(batch, 3, 200))


def batch_mask(strategy, batch=2, seed=0, signals=SIGNALS):
    return MaskBatch.sample(
        strategy, batch, 4, 0.4, np.random.default_rng(seed), signals
    )


class TestParameters(unittest.TestCase):
    def test_count_depends_only_on_config(self):
        a, b = toy_model(seed=1), toy_model(seed=2)

        assert a.parameter_count == b.parameter_count
        assert [n for n, _ in a.named_parameters()] == [
            n for n, _ in b.named_parameters()
        ]
        assert not np.array_equal(
            a.params["embed.ECG.weight"].data,
            b.params["embed.ECG.weight"].data,
        )

    def test_parameter_names(self):
        names = set(toy_model().params)
        for expected in (
            "embed.ECG.weight",
            "embed.ABP.type",
            "encoder.0.attn.q.weight",
            "encoder.0.norm2.gain",
            "latent.weight",
            "decoder.PPG.mask_token",
            "decoder.ABP.cross.attn.k.bias",
            "decoder.ECG.0.ffn.w1",
            "decoder.ECG.head.weight",
        ):
            assert expected in names, expected
        no_type = toy_model({"model": {"type_embedding": False}})
        assert not any(n.endswith(".type") for n in no_type.params)

    def test_type_embedding_shape_and_std(self):
        model = toy_model()
        assert model.params["embed.PPG.type"].shape == (4, 8)
        assert model.params["decoder.ECG.mask_token"].shape == (4,)

    def test_decoder_wider_than_encoder(self):
        config = toy_config()
        with self.assertRaises(ConfigError):
            PhysioMAE(
                config.patch,
                config.encoder,
                DecoderConfig({"decoder_dim": 16, "heads": 2}),
                config.model,
            )

    def test_state_dict_round_trip(self):
        source, target = toy_model(seed=1), toy_model(seed=2)

        target.load_state_dict(source.state_dict())

        for name, value in source.state_dict().items():
            np.testing.assert_array_equal(target.params[name].data, value)

    def test_load_state_dict_mismatch(self):
        model = toy_model()
        state = model.state_dict()
        state.pop("latent.bias")
        with self.assertRaises(DimensionError):
            model.load_state_dict(state)
        state = model.state_dict()
        state["latent.bias"] = np.zeros(7)
        with self.assertRaises(DimensionError):
            model.load_state_dict(state)


class TestEncoder(unittest.TestCase):
    def test_shapes_follow_token_count(self):
        model = toy_model()
        for count in (1, 6, 12):
            with self.subTest(tokens=count):
                out = model.encode(np.ones((2, count, 8)))
                assert out.shape == (2, count, 8)

    def test_empty_input(self):
        with self.assertRaises(DimensionError):
            toy_model().encode(np.ones((1, 0, 8)))

    def test_zero_depth_is_identity(self):
        model = toy_model({"encoder": {"depth": 0}})
        tokens = np.random.default_rng(0).normal(size=(1, 5, 8))
        np.testing.assert_array_equal(model.encode(tokens).data, tokens)

    def test_subset_inference(self):
        model = toy_model()
        x = toy_input()
        out = model.encode_subset(x[:, :2], ("ECG", "PPG"))
        assert out.shape == (2, 8, 8)
        with self.assertRaises(ConfigError):
            model.encode_subset(x[:, :2], ())

    def test_type_embedding_changes_encoding(self):
        model = toy_model()
        x = toy_input()[:, :1]
        learned = model.encode_subset(x, ("ECG",)).data.copy()
        model.params["embed.ECG.type"].data[:] = 0.0
        zeroed = model.encode_subset(x, ("ECG",)).data
        assert not np.allclose(learned, zeroed)


class TestLatentAndMerge(unittest.TestCase):
    def test_project_latent_split(self):
        model = toy_model()
        encoded = Tensor(np.random.default_rng(0).normal(size=(2, 6, 8)))

        latent, segments = model.project_latent(encoded, [0, 2, 4])

        assert latent.shape == (2, 6, 4)
        assert [s.shape[1] for s in segments] == [0, 2, 4]
        rejoined = ops.concat([s for s in segments if s.shape[1]], axis=1)
        np.testing.assert_array_equal(rejoined.data, latent.data)
        with self.assertRaises(InternalError):
            model.project_latent(encoded, [2, 2, 3])

    def test_merge_without_masking(self):
        model = toy_model()
        segment = Tensor(np.random.default_rng(1).normal(size=(1, 4, 4)))
        merged = model.merge_with_mask(
            segment, "ECG", np.arange(4)[None], np.zeros((1, 0), int)
        )
        np.testing.assert_allclose(
            merged.data[0], segment.data[0] + model.decoder_positions
        )

    def test_merge_fully_masked(self):
        model = toy_model()
        merged = model.merge_with_mask(
            None, "PPG", np.zeros((1, 0), int), np.arange(4)[None]
        )
        mu = model.params["decoder.PPG.mask_token"].data
        np.testing.assert_allclose(
            merged.data[0], mu[None] + model.decoder_positions
        )

    def test_merge_places_tokens_by_position(self):
        model = toy_model()
        segment = Tensor(np.arange(8.0).reshape(1, 2, 4) + 10.0)
        visible, hidden = np.array([[3, 1]]), np.array([[0, 2]])

        merged = model.merge_with_mask(segment, "ABP", visible, hidden)
        unordered = merged.data[0] - model.decoder_positions
        mu = model.params["decoder.ABP.mask_token"].data

        np.testing.assert_allclose(unordered[3], segment.data[0, 0])
        np.testing.assert_allclose(unordered[1], segment.data[0, 1])
        np.testing.assert_allclose(unordered[0], mu)
        np.testing.assert_allclose(unordered[2], mu)

    def test_merge_is_insensitive_to_bookkeeping_order(self):
        model = toy_model()
        segment = np.random.default_rng(2).normal(size=(1, 2, 4))
        first = model.merge_with_mask(
            Tensor(segment), "ECG", np.array([[1, 3]]), np.array([[0, 2]])
        )
        swapped = model.merge_with_mask(
            Tensor(segment[:, ::-1]),
            "ECG",
            np.array([[3, 1]]),
            np.array([[2, 0]]),
        )
        np.testing.assert_array_equal(first.data, swapped.data)

    def test_context_positions_follow_visible_patches(self):
        model = toy_model()
        mask = batch_mask("signal:ABP")

        positions = model.context_positions(mask)

        index = np.concatenate(
            [mask.visible_index("ECG"), mask.visible_index("PPG")], axis=1
        )
        assert positions.shape == (2, 8, model.decoder_dim)
        np.testing.assert_array_equal(
            positions, model.decoder_positions[index]
        )

    def test_merge_count_mismatch(self):
        model = toy_model()
        with self.assertRaises(InternalError):
            model.merge_with_mask(
                Tensor(np.zeros((1, 2, 4))),
                "ECG",
                np.array([[0, 1]]),
                np.array([[2]]),
            )


class TestForward(unittest.TestCase):
    def test_shapes_for_every_strategy(self):
        model = toy_model()
        x = toy_input()
        for strategy in ("inter", "intra", "signal:ECG", "signal:PPG+ABP"):
            with self.subTest(strategy=strategy):
                outputs = model.forward(x, batch_mask(strategy))
                assert list(outputs) == list(SIGNALS)
                for out in outputs.values():
                    assert out.shape == (2, 200)
                    assert np.isfinite(out.data).all()

    def test_single_sample_mask(self):
        model = toy_model()
        mask = sample_mask("intra", 4, 0.4, np.random.default_rng(0))
        outputs = model.forward(toy_input(batch=1)[0], mask)
        assert outputs["ABP"].shape == (1, 200)

    def test_deterministic(self):
        model = toy_model()
        x, mask = toy_input(), batch_mask("inter")
        a = model.reconstruct(x, mask)
        b = model.reconstruct(x, mask)
        for name in SIGNALS:
            np.testing.assert_array_equal(a[name], b[name])

    def test_signal_masked_abp_ignores_abp_input(self):
        model = toy_model()
        x, mask = toy_input(), batch_mask("signal:ABP")
        altered = x.copy()
        altered[:, 2] = 100.0

        a = model.reconstruct(x, mask)
        b = model.reconstruct(altered, mask)

        np.testing.assert_array_equal(a["ABP"], b["ABP"])

    def test_all_masked_is_config_error(self):
        model = toy_model()
        mask = MaskIndex(np.ones((3, 4), bool), MaskStrategy("inter"), 0.4)
        with self.assertRaises(ConfigError):
            model.forward(toy_input(batch=1)[0], mask)

    def test_batch_and_mask_mismatch(self):
        model = toy_model()
        with self.assertRaises(DimensionError):
            model.forward(toy_input(batch=3), batch_mask("inter"))
        with self.assertRaises(DimensionError):
            model.forward(np.zeros((2, 2, 200)), batch_mask("inter"))

    def test_decode_needs_context(self):
        model = toy_model()
        merged = model.merge_with_mask(
            None, "ECG", np.zeros((1, 0), int), np.arange(4)[None]
        )
        with self.assertRaises(ConfigError):
            model.decode_signal("ECG", merged, Tensor(np.zeros((1, 0, 4))))

    def test_without_cross_attention(self):
        model = toy_model({"model": {"cross_attention": False}})
        outputs = model.forward(toy_input(), batch_mask("signal:ABP"))
        assert all(out.shape == (2, 200) for out in outputs.values())
        assert model.descriptor()["cross_attention"] is False

    def test_frozen_records_nothing(self):
        model = toy_model()
        trainable = model.params
        with model.frozen():
            outputs = model.forward(toy_input(), batch_mask("intra"))
            assert not outputs["ECG"].requires_grad
        assert model.params is trainable

    def test_backward_reaches_every_visible_path(self):
        model = toy_model()
        outputs = model.forward(toy_input(), batch_mask("intra"))
        ops.sum(ops.square(outputs["PPG"])).backward()
        assert model.params["decoder.PPG.head.weight"].grad is not None
        assert model.params["embed.ABP.weight"].grad is not None
        assert model.params["decoder.ECG.head.weight"].grad is None


class TestSupervisedModel(unittest.TestCase):
    def test_forward_and_checksum(self):
        config = toy_config()
        model_config = config.with_overrides(
            {"model": {"signals": ["ECG", "PPG"]}}
        ).model
        model = SupervisedModel(
            config.patch, config.encoder, model_config, seed=3
        )

        out = model.forward(toy_input()[:, :2])

        assert out.shape == (2,)
        assert model.descriptor()["kind"] == "supervised"
        before = encoder_checksum(model)
        model.params["head.weight"].data += 1.0
        assert encoder_checksum(model) == before
        model.params["encoder.0.ffn.w1"].data += 1.0
        assert encoder_checksum(model) != before
