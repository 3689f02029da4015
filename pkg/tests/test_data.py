import json

import numpy as np
import pytest
from PIL import Image

from efmkit.data import (
    PixelDataset,
    load_image,
    load_mask,
    load_run_config,
    load_table,
    patch_stream,
    prefilter_median3,
    save_image,
    save_mask,
    save_table,
    synth_generate,
    thread_budget,
    write_json,
)
from efmkit.errors import AmbiguousMaskError, FormatError, ParameterError, ShapeError


def write_png_rgb(path, array8):
    Image.fromarray(array8.astype(np.uint8), mode="RGB").save(path)


def write_png_gray(path, array8):
    Image.fromarray(array8.astype(np.uint8), mode="L").save(path)


class TestLoadImage:
    def test_all_white_png(self, tmp_path):
        path = tmp_path / "white.png"
        write_png_rgb(path, np.full((2, 2, 3), 255))
        ds = load_image(path)
        assert ds.shape == (2, 2)
        np.testing.assert_array_equal(ds.rows, np.ones((4, 3)))

    def test_sixteen_bit_ppm_max_is_one(self, tmp_path):
        path = tmp_path / "deep.ppm"
        img = np.zeros((3, 2, 3))
        img[0, 0] = 1.0
        save_image(img, path, bit_depth=16)
        ds = load_image(path)
        assert ds.rows.max() == 1.0
        assert ds.rows.min() == 0.0

    def test_round_trip_16bit_precision(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (5, 7, 3))
        path = tmp_path / "rt.ppm"
        save_image(img, path, bit_depth=16)
        back = load_image(path)
        np.testing.assert_allclose(back.image(), img, atol=1.0 / 65535)

    def test_row_major_order(self, tmp_path):
        img = np.zeros((2, 2, 3), dtype=np.uint8)
        img[0, 1] = (255, 0, 0)
        path = tmp_path / "order.png"
        write_png_rgb(path, img)
        ds = load_image(path)
        np.testing.assert_array_equal(ds.rows[1], [1.0, 0.0, 0.0])

    def test_gray_input_rejected(self, tmp_path):
        path = tmp_path / "gray.png"
        write_png_gray(path, np.zeros((2, 2)))
        with pytest.raises(FormatError):
            load_image(path)

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"not an image")
        with pytest.raises(FormatError, match="junk.png"):
            load_image(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            load_image(tmp_path / "absent.ppm")


class TestLoadMask:
    def test_all_zero(self, tmp_path):
        path = tmp_path / "zero.png"
        write_png_gray(path, np.zeros((3, 4)))
        labels, shape = load_mask(path)
        assert shape == (3, 4)
        assert labels.sum() == 0

    def test_mixed_binary(self, tmp_path):
        arr = np.array([[0, 255], [255, 0]])
        path = tmp_path / "mix.pgm"
        save_mask((arr > 0).astype(int).reshape(-1), (2, 2), path)
        labels, shape = load_mask(path)
        np.testing.assert_array_equal(labels, [0, 1, 1, 0])

    def test_intermediate_gray_rejected(self, tmp_path):
        path = tmp_path / "gray.png"
        write_png_gray(path, np.array([[0, 128], [255, 0]]))
        with pytest.raises(AmbiguousMaskError):
            load_mask(path)

    def test_three_channel_rejected(self, tmp_path):
        path = tmp_path / "rgb.png"
        write_png_rgb(path, np.zeros((2, 2, 3)))
        with pytest.raises(FormatError):
            load_mask(path)

    def test_mask_round_trip_png(self, tmp_path):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 2, 12)
        path = tmp_path / "mask.png"
        save_mask(labels, (3, 4), path)
        back, shape = load_mask(path)
        np.testing.assert_array_equal(back, labels)
        assert shape == (3, 4)

    def test_sixteen_bit_pgm_mask(self, tmp_path):
        path = tmp_path / "deep.pgm"
        payload = np.array([[0, 65535], [65535, 0]], dtype=">u2")
        path.write_bytes(b"P5\n2 2\n65535\n" + payload.tobytes())
        labels, shape = load_mask(path)
        np.testing.assert_array_equal(labels, [0, 1, 1, 0])
        assert shape == (2, 2)


def grid_dataset(h, w, seed=0):
    rng = np.random.default_rng(seed)
    rows = rng.uniform(0, 1, (h * w, 3))
    return PixelDataset(rows=rows, shape=(h, w))


class TestPatchStream:
    def test_exact_tile(self):
        ds = grid_dataset(100, 100)
        mask = np.zeros(10000, dtype=int)
        batches = list(patch_stream(ds, mask, side=100))
        assert len(batches) == 1
        assert len(batches[0]) == 10000

    def test_truncated_edge_tiles(self):
        ds = grid_dataset(150, 100)
        mask = np.zeros(15000, dtype=int)
        sizes = [len(b) for b in patch_stream(ds, mask, side=100)]
        assert sizes == [10000, 5000]

    def test_concatenation_reproduces_tile_order(self):
        ds = grid_dataset(7, 9, seed=2)
        mask = np.arange(63) % 2
        batches = list(patch_stream(ds, mask, side=4))
        img = ds.image()
        grid = mask.reshape(7, 9)
        expected_rows, expected_labels = [], []
        for r in range(0, 7, 4):
            for c in range(0, 9, 4):
                expected_rows.append(img[r : r + 4, c : c + 4].reshape(-1, 3))
                expected_labels.append(grid[r : r + 4, c : c + 4].reshape(-1))
        np.testing.assert_array_equal(np.vstack([b.rows for b in batches]), np.vstack(expected_rows))
        np.testing.assert_array_equal(
            np.concatenate([b.labels for b in batches]), np.concatenate(expected_labels)
        )

    def test_shape_mismatch(self):
        ds = grid_dataset(4, 4)
        with pytest.raises(ShapeError):
            list(patch_stream(ds, np.zeros(10), side=2))

    def test_bad_side(self):
        ds = grid_dataset(4, 4)
        with pytest.raises(ParameterError):
            list(patch_stream(ds, np.zeros(16), side=0))


class TestSynth:
    def test_blobs_are_linearly_separable(self):
        X, y = synth_generate("blobs", 200, noise=1e-6, seed=1)
        # the x-coordinate alone separates the blobs when noise vanishes
        assert np.all((X[:, 0] > 0) == (y == 1))

    def test_blobs_train_to_perfect_accuracy(self):
        from efmkit.linear_model import LabeledBatch, TrainConfig, predict_batch, train_streaming

        X, y = synth_generate("blobs", 400, noise=0.01, seed=6)
        model = train_streaming([LabeledBatch(X, y)], None, TrainConfig(epochs=2, seed=0))
        labels, _ = predict_batch(model, X)
        assert np.mean(labels == y) == 1.0

    def test_annulus_radial_structure(self):
        X, y = synth_generate("annulus", 600, noise=0.0, seed=2)
        radii = np.linalg.norm(X, axis=1)
        assert radii[y == 1].max() <= 1.0 + 1e-9
        assert radii[y == 0].min() >= 1.5 - 1e-9

    def test_xor_quadrants(self):
        X, y = synth_generate("xor", 400, noise=1e-6, seed=3)
        same_sign = X[:, 0] * X[:, 1] > 0
        np.testing.assert_array_equal(y == 0, same_sign)

    def test_deterministic(self):
        a = synth_generate("annulus", 100, noise=0.05, seed=9)
        b = synth_generate("annulus", 100, noise=0.05, seed=9)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            synth_generate("spiral", 100)

    def test_too_small(self):
        with pytest.raises(ParameterError):
            synth_generate("blobs", 3)


class TestTables:
    def test_round_trip_without_header(self, tmp_path):
        rng = np.random.default_rng(4)
        arr = rng.normal(size=(6, 3))
        path = tmp_path / "t.csv"
        save_table(path, arr)
        back, header = load_table(path)
        assert header is None
        np.testing.assert_array_equal(back, arr)  # 17 significant digits round-trip

    def test_header_preserved(self, tmp_path):
        path = tmp_path / "h.csv"
        save_table(path, np.ones((2, 2)), header=["a", "b"])
        back, header = load_table(path)
        assert header == ["a", "b"]
        np.testing.assert_array_equal(back, np.ones((2, 2)))

    def test_non_numeric_cell(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,2\n3,dog\n")
        with pytest.raises(FormatError):
            load_table(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            load_table(tmp_path / "none.csv")


class TestInfra:
    def test_atomic_write_leaves_no_temp(self, tmp_path):
        path = tmp_path / "out.json"
        write_json(path, {"x": 1})
        assert json.loads(path.read_text()) == {"x": 1}
        assert [p.name for p in tmp_path.iterdir()] == ["out.json"]

    def test_thread_budget_env(self, monkeypatch):
        monkeypatch.setenv("EFMKIT_THREADS", "3")
        assert thread_budget() == 3
        monkeypatch.setenv("EFMKIT_THREADS", "junk")
        with pytest.raises(ParameterError):
            thread_budget()
        monkeypatch.delenv("EFMKIT_THREADS")
        assert thread_budget() >= 1

    def test_prefilter_median3_removes_speck(self):
        ds = grid_dataset(10, 10, seed=5)
        ds.rows[:] = 0.5
        ds.rows[55] = (1.0, 1.0, 1.0)
        out = prefilter_median3(ds)
        assert out.shape == ds.shape
        np.testing.assert_array_equal(out.rows, np.full((100, 3), 0.5))

    def test_run_config_checks_paths(self, tmp_path):
        data = tmp_path / "present.csv"
        data.write_text("1,2\n")
        good = tmp_path / "good.json"
        write_json(good, {"loss": "hinge", "paths": {"table": str(data)}, "train": {"epochs": 2}})
        config = load_run_config(good)
        assert config.loss == "hinge"
        assert config.train.epochs == 2
        bad = tmp_path / "bad.json"
        write_json(bad, {"paths": {"table": str(tmp_path / "gone.csv")}})
        with pytest.raises(ParameterError, match="gone.csv"):
            load_run_config(bad)
