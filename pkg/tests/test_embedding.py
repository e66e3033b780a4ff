import unittest

import numpy as np

from physio_mae.autodiff import grad_check, ops, parameter
from physio_mae.embedding import (
    embed_signal,
    init_projection,
    init_type_embedding,
    patchify,
    positional_encoding,
    unpatchify,
)
from physio_mae.errors import ConfigError, DimensionError


class TestPatchify(unittest.TestCase):
    def test_consecutive_patches(self):
        signal = np.arange(1000.0)
        patches = patchify(signal, 50)

        assert patches.shape == (20, 50)
        np.testing.assert_array_equal(patches[3], np.arange(150.0, 200.0))
        np.testing.assert_array_equal(unpatchify(patches), signal)

    def test_batched(self):
        signal = np.arange(24.0).reshape(2, 3, 4)
        assert patchify(signal, 2).shape == (2, 3, 2, 2)

    def test_patch_lengths(self):
        for patch_len, count in [(50, 20), (100, 10), (200, 5), (250, 4)]:
            with self.subTest(patch_len=patch_len):
                assert patchify(np.zeros(1000), patch_len).shape[0] == count

    def test_indivisible_length(self):
        with self.assertRaises(DimensionError):
            patchify(np.zeros(1000), 30)


class TestPositionalEncoding(unittest.TestCase):
    def test_values(self):
        table = positional_encoding(20, 8)

        assert table.shape == (20, 8)
        np.testing.assert_array_equal(table[0, 0::2], np.zeros(4))
        np.testing.assert_array_equal(table[0, 1::2], np.ones(4))
        self.assertAlmostEqual(table[1, 0], np.sin(1.0))
        self.assertAlmostEqual(table[1, 2], np.sin(1.0 / 10000 ** (2 / 8)))
        assert np.abs(table).max() <= 1.0

    def test_returns_private_copy(self):
        table = positional_encoding(4, 4)
        table[:] = 5.0
        assert positional_encoding(4, 4)[0, 0] == 0.0

    def test_odd_width(self):
        for dim in (1, 7):
            with self.subTest(dim=dim):
                with self.assertRaises(ConfigError):
                    positional_encoding(4, dim)


class TestEmbedSignal(unittest.TestCase):
    def test_shapes_and_components(self):
        rng = np.random.default_rng(0)
        patches = rng.normal(size=(2, 4, 5))
        projection = init_projection(5, 6, rng)
        types = init_type_embedding(4, 6, 0.1, rng)
        positions = positional_encoding(4, 6)

        tokens = embed_signal(patches, projection, types, positions)
        without_type = embed_signal(patches, projection, None, positions)

        assert tokens.shape == (2, 4, 6)
        np.testing.assert_allclose(
            tokens.data, patches @ projection + types + positions
        )
        np.testing.assert_allclose(
            tokens.data - without_type.data, np.broadcast_to(types, (2, 4, 6)),
            atol=1e-12,
        )

    def test_type_embedding_statistics(self):
        table = init_type_embedding(
            200, 64, 0.5, np.random.default_rng(1)
        )
        assert table.shape == (200, 64)
        assert abs(table.mean()) < 0.02
        assert abs(table.std() - 0.5) < 0.02
        with self.assertRaises(ConfigError):
            init_type_embedding(4, 4, -1.0, np.random.default_rng(0))

    def test_mismatched_projection(self):
        with self.assertRaises(DimensionError):
            embed_signal(
                np.zeros((4, 5)), np.zeros((6, 8)), None, np.zeros((4, 8))
            )

    def test_gradients(self):
        rng = np.random.default_rng(2)
        patches = rng.normal(size=(3, 4))
        types = parameter(rng.normal(size=(3, 6)))
        positions = positional_encoding(3, 6)
        projection = parameter(init_projection(4, 6, rng))
        report = grad_check(
            lambda w: ops.sum(
                ops.tanh(embed_signal(patches, w, types, positions))
            ),
            projection,
            tol=1e-5,
        )
        assert report.passed, report.message
