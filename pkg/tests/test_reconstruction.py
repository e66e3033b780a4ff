import unittest
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np

from physio_mae.model import PhysioMAE
from physio_mae.reconstruction import (
    PLOT_HEADER,
    format_summary,
    plot_rows,
    reconstruct,
    summarize,
    write_plot_data,
)
from physio_mae.utils import read_delimited

from .utils import random_dataset, toy_config


class TestReconstruction(unittest.TestCase):
    def setUp(self):
        self.model = PhysioMAE.from_config(toy_config())
        self.dataset = random_dataset()

    def test_chunks_agree_with_whole_batch(self):
        x = self.dataset.channel_array()
        whole, masks = reconstruct(self.model, x, "inter", 0.4, seed=3)
        head, _ = reconstruct(self.model, x[:5], "inter", 0.4, seed=3)
        tail, tail_masks = reconstruct(
            self.model, x[5:], "inter", 0.4, seed=3, offset=5
        )

        for name in self.model.signals:
            np.testing.assert_array_equal(
                whole[name], np.concatenate([head[name], tail[name]])
            )
        np.testing.assert_array_equal(masks.masked[5:], tail_masks.masked)

    def test_masks_differ_between_samples(self):
        x = self.dataset.channel_array()
        _, masks = reconstruct(self.model, x, "intra", 0.5, seed=0)
        assert len({m.masked.tobytes() for m in masks.masks}) > 1

    def test_plot_rows(self):
        x = self.dataset.channel_array()[:1]
        outputs, masks = reconstruct(self.model, x, "signal:PPG", 0.4, 0)

        rows = plot_rows(
            self.model,
            x[0, 1],
            outputs["PPG"][0],
            masks.masks[0],
            "PPG",
            100.0,
        )

        assert len(rows) == 200
        assert rows[0][0] == "0.0000"
        assert rows[-1][0] == "1.9900"
        assert {row[3] for row in rows} == {1}

    def test_masked_flags_follow_patches(self):
        x = self.dataset.channel_array()[:1]
        outputs, masks = reconstruct(self.model, x, "intra", 0.5, 0)
        mask = masks.masks[0]

        rows = plot_rows(
            self.model, x[0, 0], outputs["ECG"][0], mask, "ECG", 100.0
        )

        flags = [row[3] for row in rows]
        for j, hidden in enumerate(mask.row("ECG")):
            assert set(flags[50 * j : 50 * (j + 1)]) == {int(hidden)}

    def test_write_plot_data(self):
        with TemporaryDirectory() as tmp:
            paths = write_plot_data(
                self.model, self.dataset, "signal:ABP", 0.4, 0, tmp, sample=2
            )
            assert [p.name for p in paths.values()] == [
                "reconstruction_ECG.csv",
                "reconstruction_PPG.csv",
                "reconstruction_ABP.csv",
            ]
            header, rows = read_delimited(Path(tmp) / "reconstruction_ECG.csv")
        assert header == PLOT_HEADER
        assert len(rows) == 200
        assert float(rows[1][1]) == float(
            f"{self.dataset.signals[2, 0, 1]:.6g}"
        )

    def test_summarize(self):
        rows = summarize(self.model, self.dataset, "inter", 0.4, seed=0)

        assert [row[0] for row in rows] == ["ECG", "PPG", "ABP"]
        assert all(row[3] == 4 for row in rows)
        assert all(-1.0 <= row[1] <= 1.0 for row in rows)
        assert all(row[2] > 0 for row in rows)
        assert "median_pcc" in format_summary(rows)

    def test_summarize_falls_back_to_all_samples(self):
        dataset = random_dataset(n=3, splits=["train"] * 3)
        rows = summarize(self.model, dataset, "intra", 0.4, seed=0)
        assert all(row[3] == 3 for row in rows)
