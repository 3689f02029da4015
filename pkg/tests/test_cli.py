import json

import numpy as np
import pytest
from PIL import Image

from efmkit.cli import main, parse_grid, parse_map_spec
from efmkit.data import load_mask, load_table, save_mask, save_table, synth_generate
from efmkit.errors import ParameterError


def run(*argv):
    return main([str(a) for a in argv])


def write_rgb(path, img01):
    quant = np.rint(np.clip(img01, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(quant, mode="RGB").save(path)


def blob_image(seed, h=20, w=20):
    """Image whose left half is dark and right half bright, plus the matching mask."""
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.0, 0.25, (h, w, 3))
    img[:, w // 2 :] = rng.uniform(0.75, 1.0, (h, w - w // 2, 3))
    mask = np.zeros((h, w), dtype=int)
    mask[:, w // 2 :] = 1
    return img, mask.reshape(-1)


class TestParsing:
    def test_poly_spec(self):
        spec = parse_map_spec("poly:m=2,b=1", d=3)
        assert (spec.kind, spec.d, spec.m, spec.b) == ("polynomial", 3, 2, 1.0)

    def test_gauss_spec(self):
        spec = parse_map_spec("gauss:m=3,sigma=0.5,variant=full", d=2)
        assert (spec.kind, spec.sigma, spec.variant) == ("gaussian", 0.5, "full")

    def test_none(self):
        assert parse_map_spec("none", d=3) is None
        assert parse_map_spec(None, d=3) is None

    def test_bad_kind(self):
        with pytest.raises(ParameterError):
            parse_map_spec("fourier:m=2", d=3)

    def test_missing_order(self):
        with pytest.raises(ParameterError):
            parse_map_spec("poly:b=1", d=3)

    def test_poly_offset_grid(self):
        grid = parse_grid("poly:m=3", d=3)
        assert [s.b for s in grid.specs] == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]

    def test_gaussian_sigma_grid(self):
        grid = parse_grid("gauss:m=2", d=3)
        assert len(grid.specs) == 8

    def test_explicit_grid(self):
        grid = parse_grid("none;poly:m=2,b=1", d=2)
        assert grid.specs[0] is None
        assert grid.specs[1].m == 2


class TestExitCodes:
    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert run("frobnicate") == 2

    def test_unknown_flag_is_usage_error(self):
        assert run("synth", "--kind", "blobs", "--n", "50", "--frob", "1") == 2

    def test_data_error_is_exit_one(self, tmp_path, capsys):
        code = run("transform", "--in", tmp_path / "missing.csv", "--map", "poly:m=2", "--out", tmp_path / "o.csv")
        assert code == 1
        assert "error (FormatError)" in capsys.readouterr().err


class TestSynthAndTransform:
    def test_synth_writes_labeled_csv(self, tmp_path):
        out = tmp_path / "annulus.csv"
        assert run("synth", "--kind", "annulus", "--n", "100", "--out", out) == 0
        table, header = load_table(out)
        assert header == ["x1", "x2", "label"]
        assert table.shape == (100, 3)

    def test_transform_csv(self, tmp_path):
        src = tmp_path / "in.csv"
        save_table(src, np.array([[1.0, 2.0]]))
        out = tmp_path / "mapped.csv"
        assert run("transform", "--in", src, "--map", "poly:m=2,b=0", "--out", out) == 0
        mapped, header = load_table(out)
        np.testing.assert_allclose(mapped[0], [4.0, 2.0 * np.sqrt(2.0), 1.0])
        assert header == ["x2^2", "x1x2", "x1^2"]

    def test_transform_image(self, tmp_path):
        img, _ = blob_image(seed=4, h=5, w=6)
        img_path = tmp_path / "img.png"
        write_rgb(img_path, img)
        out = tmp_path / "mapped.csv"
        code = run("transform", "--in", img_path, "--map", "poly:m=2,b=1", "--names", "R,G,B", "--out", out)
        assert code == 0
        mapped, header = load_table(out)
        assert mapped.shape == (30, 10)
        assert header[0] == "ONE" and "RG" in header


class TestRunConfig:
    def test_config_supplies_defaults_and_flags_override(self, tmp_path):
        data_file = tmp_path / "xor.csv"
        run("synth", "--kind", "xor", "--n", "400", "--noise", "0.2", "--out", data_file)
        config_file = tmp_path / "run.json"
        config_file.write_text(json.dumps({
            "map_spec": {"kind": "polynomial", "d": 2, "m": 2, "b": 1.0},
            "loss": "hinge",
            "train": {"epochs": 3, "seed": 7},
            "paths": {"table": str(data_file)},
        }))
        model_file = tmp_path / "model.json"
        code = run(
            "train", "--table", data_file, "--config", config_file,
            "--loss", "logistic", "--out", model_file,
        )
        assert code == 0
        obj = json.loads(model_file.read_text())
        assert obj["map_spec"]["m"] == 2  # from config
        assert obj["loss"] == "logistic"  # explicit flag beats config
        assert obj["train_meta"]["epochs"] == 3

    def test_config_with_missing_path_fails(self, tmp_path):
        config_file = tmp_path / "bad.json"
        config_file.write_text(json.dumps({"paths": {"x": str(tmp_path / "gone")}}))
        code = run("train", "--table", "irrelevant.csv", "--config", config_file, "--out", tmp_path / "m.json")
        assert code == 1

    def test_malformed_config_is_data_error(self, tmp_path):
        config_file = tmp_path / "weird.json"
        config_file.write_text(json.dumps({"train": {"frobs": 3}}))
        code = run("train", "--table", "x.csv", "--config", config_file, "--out", tmp_path / "m.json")
        assert code == 1

    def test_malformed_model_file_is_data_error(self, tmp_path, capsys):
        bad = tmp_path / "bad_model.json"
        bad.write_text(json.dumps({"weights": "oops"}))
        code = run("predict", "--model", bad, "--image", "x.png", "--out-mask", tmp_path / "m.png")
        assert code == 1
        assert "not a valid model file" in capsys.readouterr().err


class TestModelFileRoundTrip:
    def test_saved_model_predicts_bitwise_identically(self, tmp_path):
        from efmkit.cli import _load_model_file
        from efmkit.data import write_json
        from efmkit.feature_map import FeatureMapSpec
        from efmkit.linear_model import (
            LabeledBatch,
            TrainConfig,
            decision_batch,
            model_to_json,
            train_streaming,
        )

        X, y = synth_generate("annulus", 500, noise=0.05, seed=3)
        spec = FeatureMapSpec(kind="polynomial", d=2, m=2, b=1.0)
        model = train_streaming([LabeledBatch(X, y)], spec, TrainConfig(epochs=2, seed=1))
        path = tmp_path / "model.json"
        write_json(path, model_to_json(model))
        clone = _load_model_file(path)
        probe = np.random.default_rng(5).normal(size=(50, 2))
        np.testing.assert_array_equal(decision_batch(model, probe), decision_batch(clone, probe))


class TestKernelErrorCommand:
    def test_monotone_error_curve(self, tmp_path):
        out = tmp_path / "errors.csv"
        code = run("kernel-error", "--sigma", "0.7071", "--orders", "2,3,4,5", "--out", out)
        assert code == 0
        table, header = load_table(out)
        assert header == ["m", "max_error", "mean_error"]
        max_err = table[:, 1]
        assert np.all(np.diff(max_err) < 0)

    def test_full_variant_curve(self, tmp_path):
        out = tmp_path / "errors_full.csv"
        code = run(
            "kernel-error", "--sigma", "1.5", "--orders", "2,4,6",
            "--variant", "full", "--samples", "200", "--out", out,
        )
        assert code == 0
        table, _ = load_table(out)
        assert np.all(np.diff(table[:, 1]) < 0)


class TestTrainPredictEval:
    def test_csv_train_then_self_predict(self, tmp_path):
        data_file = tmp_path / "xor.csv"
        assert run("synth", "--kind", "xor", "--n", "600", "--noise", "0.2", "--out", data_file) == 0
        model_file = tmp_path / "model.json"
        code = run(
            "train", "--table", data_file, "--map", "poly:m=2,b=1",
            "--epochs", "4", "--out", model_file,
        )
        assert code == 0
        obj = json.loads(model_file.read_text())
        assert obj["map_spec"]["m"] == 2
        assert obj["train_meta"]["train_bacc"] > 0.95

    def test_image_pipeline_end_to_end(self, tmp_path, capsys):
        img, mask = blob_image(seed=0)
        img_path, mask_path = tmp_path / "img.png", tmp_path / "mask.png"
        write_rgb(img_path, img)
        save_mask(mask, (20, 20), mask_path)

        model_file = tmp_path / "model.json"
        code = run(
            "train", "--images", img_path, "--masks", mask_path,
            "--map", "poly:m=2,b=1", "--epochs", "4", "--patch-side", "10",
            "--out", model_file,
        )
        assert code == 0
        logged = capsys.readouterr().out
        logged_bacc = float(logged.split("bacc=")[1].split()[0])

        pred_mask = tmp_path / "pred.png"
        scores_csv = tmp_path / "scores.csv"
        assert run(
            "predict", "--model", model_file, "--image", img_path,
            "--out-mask", pred_mask, "--out-scores", scores_csv,
        ) == 0
        report_json = tmp_path / "report.json"
        assert run(
            "eval", "--pred", pred_mask, "--truth", mask_path,
            "--model-name", "demo", "--out", report_json,
        ) == 0
        report = json.loads(report_json.read_text())
        # predicting the training image reproduces at least the logged fit quality
        assert report["bacc"] >= logged_bacc - 1e-9
        scores, _ = load_table(scores_csv)
        assert scores.shape == (400, 1)

    def test_ensemble_train_and_predict(self, tmp_path):
        paths = []
        for s in range(3):
            img, mask = blob_image(seed=s)
            ip, mp = tmp_path / f"img{s}.png", tmp_path / f"mask{s}.png"
            write_rgb(ip, img)
            save_mask(mask, (20, 20), mp)
            paths.append((ip, mp))
        model_file = tmp_path / "ens.json"
        code = run(
            "train", "--images", *[p for p, _ in paths], "--masks", *[m for _, m in paths],
            "--ensemble", "--grid", "none;poly:m=2,b=1", "--epochs", "2",
            "--patch-side", "10", "--out", model_file,
        )
        assert code == 0
        obj = json.loads(model_file.read_text())
        assert len(obj["members"]) == 3
        pred_mask = tmp_path / "vote.png"
        assert run("predict", "--model", model_file, "--image", paths[0][0], "--out-mask", pred_mask) == 0
        labels, _ = load_mask(pred_mask)
        assert labels.shape == (400,)

    def test_eval_compare_ttest(self, tmp_path, capsys):
        a, b = tmp_path / "runs_a.csv", tmp_path / "runs_b.csv"
        header = ["model", "se", "sp", "bacc", "f1", "ppv"]
        rows_a = [f"a,{0.9},{0.8},{0.85 + 0.001 * i},{0.8},{0.7}" for i in range(5)]
        rows_b = [f"b,{0.9},{0.8},{0.65 + 0.001 * i},{0.8},{0.7}" for i in range(5)]
        a.write_text("\n".join([",".join(header)] + rows_a) + "\n")
        b.write_text("\n".join([",".join(header)] + rows_b) + "\n")
        assert run("eval", "--compare", a, b, "--metric", "bacc") == 0
        out = capsys.readouterr().out
        assert "reject" in out

    def test_eval_compare_needs_header(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        a.write_text("1\n2\n3\n")
        b.write_text("1\n2\n3\n")
        assert run("eval", "--compare", a, b) == 1

    def test_prefilter_option(self, tmp_path):
        img, mask = blob_image(seed=8)
        img_path, mask_path = tmp_path / "img.png", tmp_path / "mask.png"
        write_rgb(img_path, img)
        save_mask(mask, (20, 20), mask_path)
        model_file = tmp_path / "m.json"
        code = run(
            "train", "--images", img_path, "--masks", mask_path, "--prefilter", "median3",
            "--patch-side", "10", "--out", model_file,
        )
        assert code == 0

    def test_hinge_loss_path(self, tmp_path):
        data_file = tmp_path / "blobs.csv"
        run("synth", "--kind", "blobs", "--n", "300", "--noise", "0.1", "--out", data_file)
        model_file = tmp_path / "svm.json"
        assert run("train", "--table", data_file, "--loss", "hinge", "--epochs", "2", "--out", model_file) == 0
        obj = json.loads(model_file.read_text())
        assert obj["loss"] == "hinge"
        assert obj["train_meta"]["train_bacc"] >= 0.99

    def test_many_runs_protocol_through_the_cli(self, tmp_path, capsys):
        """Miniature version of the documented comparison recipe: several
        seeded runs per configuration, stacked metric rows, then --compare."""
        img, mask = blob_image(seed=7)
        img_path, mask_path = tmp_path / "img.png", tmp_path / "mask.png"
        write_rgb(img_path, img)
        save_mask(mask, (20, 20), mask_path)

        stacked = {}
        for name, map_arg, epochs in (("scrambled", "none", 1), ("mapped", "poly:m=2,b=1", 3)):
            rows = []
            for seed in (1, 2, 3):
                model_file = tmp_path / f"{name}_{seed}.json"
                # the weak arm trains on a permuted mask so the strong arm separates
                train_mask = mask_path
                if name == "scrambled":
                    scrambled = np.random.default_rng(seed).permutation(mask)
                    train_mask = tmp_path / f"scrambled_{seed}.png"
                    save_mask(scrambled, (20, 20), train_mask)
                assert run(
                    "train", "--images", img_path, "--masks", train_mask,
                    "--map", map_arg, "--epochs", epochs, "--seed", seed,
                    "--patch-side", "10", "--out", model_file,
                ) == 0
                pred = tmp_path / f"{name}_{seed}_pred.png"
                assert run("predict", "--model", model_file, "--image", img_path, "--out-mask", pred) == 0
                row_csv = tmp_path / f"{name}_{seed}_row.csv"
                assert run(
                    "eval", "--pred", pred, "--truth", mask_path,
                    "--model-name", name, "--csv", row_csv,
                ) == 0
                rows.append(row_csv.read_text().splitlines())
            stacked[name] = tmp_path / f"runs_{name}.csv"
            lines = [rows[0][0]] + [r[1] for r in rows]
            stacked[name].write_text("\n".join(lines) + "\n")

        capsys.readouterr()
        assert run("eval", "--compare", stacked["mapped"], stacked["scrambled"], "--metric", "bacc") == 0
        out = capsys.readouterr().out
        assert "t=" in out and "p=" in out

    def test_cluster_deterministic_across_invocations(self, tmp_path):
        img, _ = blob_image(seed=9)
        img_path = tmp_path / "img.png"
        write_rgb(img_path, img)
        out_a, out_b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert run("cluster", "--image", img_path, "--anchors", "20", "--seed", "5", "--out", out_a) == 0
        assert run("cluster", "--image", img_path, "--anchors", "20", "--seed", "5", "--out", out_b) == 0
        assert out_a.read_bytes() == out_b.read_bytes()


class TestClusterCommand:
    def test_cluster_image_to_mask(self, tmp_path):
        img, mask = blob_image(seed=1)
        img_path = tmp_path / "img.png"
        write_rgb(img_path, img)
        truth_path = tmp_path / "truth.png"
        save_mask(mask, (20, 20), truth_path)
        out = tmp_path / "clusters.png"
        code = run(
            "cluster", "--image", img_path, "--clusters", "2", "--anchors", "20",
            "--knn", "3", "--ref-mask", truth_path, "--median-filter", "3", "--out", out,
        )
        assert code == 0
        labels, shape = load_mask(out)
        assert shape == (20, 20)
        assert np.mean(labels == mask) >= 0.95

    def test_cluster_csv_output(self, tmp_path):
        img, _ = blob_image(seed=2)
        img_path = tmp_path / "img.png"
        write_rgb(img_path, img)
        out = tmp_path / "labels.csv"
        assert run("cluster", "--image", img_path, "--anchors", "15", "--out", out) == 0
        table, header = load_table(out)
        assert header == ["index", "label"]
        assert table.shape == (400, 2)


class TestExplainCommand:
    def test_explain_csv_report(self, tmp_path):
        data_file = tmp_path / "blobs.csv"
        assert run("synth", "--kind", "blobs", "--n", "300", "--noise", "0.3", "--out", data_file) == 0
        model_file = tmp_path / "model.json"
        assert run("train", "--table", data_file, "--map", "poly:m=2,b=1", "--epochs", "3", "--out", model_file) == 0

        points = tmp_path / "points.csv"
        table, _ = load_table(data_file)
        save_table(points, table[:10, :2])
        background = tmp_path / "background.csv"
        save_table(background, table[:100, :2])

        out = tmp_path / "explained.csv"
        code = run(
            "explain", "--model", model_file, "--in", points, "--background", background,
            "--method", "conditional", "--out", out, "--names", "u,v",
        )
        assert code == 0
        report, header = load_table(out)
        assert header[:3] == ["index", "a0", "prediction"]
        assert "ONE" in header and "uv" in header
        # every row satisfies the additive decomposition
        gap = report[:, 1] + report[:, 3:].sum(axis=1) - report[:, 2]
        assert np.max(np.abs(gap)) <= 1e-6 * (1 + np.max(np.abs(report[:, 2])))

    def test_explain_json_single(self, tmp_path):
        data_file = tmp_path / "blobs.csv"
        run("synth", "--kind", "blobs", "--n", "100", "--noise", "0.2", "--out", data_file)
        model_file = tmp_path / "m.json"
        run("train", "--table", data_file, "--out", model_file)
        table, _ = load_table(data_file)
        pts = tmp_path / "p.csv"
        save_table(pts, table[:3, :2])
        out = tmp_path / "exp.json"
        code = run(
            "explain", "--model", model_file, "--in", pts, "--background", pts,
            "--limit", "1", "--out", out,
        )
        assert code == 0
        payload = json.loads(out.read_text())
        assert len(payload) == 1
        assert payload[0]["a0"] + sum(payload[0]["contributions"]) == pytest.approx(
            payload[0]["prediction"], abs=1e-9
        )
