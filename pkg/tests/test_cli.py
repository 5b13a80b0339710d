import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from gadclean.cli import build_parser, main
from gadclean.image import LabelMap, RasterF, labelmap_to_png, read_pfm, read_png, write_pfm, write_png

SUBCOMMANDS = ["pm", "gad", "merge", "metrics", "weights", "pipeline"]


@pytest.fixture
def files(tmp_path, rng):
    guide = tmp_path / "g.png"
    write_png(RasterF(rng.uniform(size=(12, 10, 3))), guide)
    prob = tmp_path / "p.pfm"
    write_pfm(RasterF(rng.uniform(size=(12, 10))), prob)
    return guide, prob


def run(*argv):
    return main([str(a) for a in argv])


class TestParser:
    @pytest.mark.parametrize("cmd", SUBCOMMANDS)
    def test_help(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            run(cmd, "--help")
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out

    def test_unknown_flag(self, files):
        with pytest.raises(SystemExit) as exc:
            run("pm", "--input", files[1], "--output", "x.pfm", "--bogus")
        assert exc.value.code == 2

    def test_abbreviations_rejected(self, files):
        with pytest.raises(SystemExit) as exc:
            run("pm", "--input", files[1], "--output", "x.pfm", "--iter", "3")
        assert exc.value.code == 2

    def test_gad_defaults(self):
        args = build_parser().parse_args(["gad", "--guide", "g", "--input", "i", "--output", "o"])
        assert (args.kappa, args.lam, args.iterations, args.freeze_guides) == (5.0, 0.24, 1000, False)

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "gadclean", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "pipeline" in proc.stdout


class TestGad:
    def test_zero_iterations_byte_identical(self, tmp_path, files):
        guide, prob = files
        out = tmp_path / "o.pfm"
        assert run("gad", "--guide", guide, "--input", prob, "--iterations", 0, "--output", out) == 0
        assert out.read_bytes() == prob.read_bytes()

    def test_lambda_bound(self, tmp_path, files, capsys):
        guide, prob = files
        code = run("gad", "--guide", guide, "--input", prob, "--lambda", 0.3, "--output", tmp_path / "o.pfm")
        assert code == 2
        assert "0.25" in capsys.readouterr().err
        assert not (tmp_path / "o.pfm").exists()

    def test_matches_library(self, tmp_path, files):
        from gadclean.diffusion import GadParams, gad

        guide, prob = files
        out = tmp_path / "o.pfm"
        assert run("gad", "--guide", guide, "--guide", guide, "--input", prob, "--iterations", 15,
                   "--output", out) == 0
        g = RasterF(read_png(guide).data * 255)
        expect = gad([g, g], read_pfm(prob), GadParams(15))
        np.testing.assert_array_equal(read_pfm(out).data, expect.data.astype(np.float32))

    def test_three_guides_rejected(self, tmp_path, files):
        guide, prob = files
        assert run("gad", *["--guide", guide] * 3, "--input", prob, "--output", tmp_path / "o.pfm") == 2

    def test_format_must_mirror_input(self, tmp_path, files):
        guide, prob = files
        assert run("gad", "--guide", guide, "--input", prob, "--output", tmp_path / "o.png") == 2

    def test_png_input_keeps_depth(self, tmp_path, files, rng):
        guide, _ = files
        src = tmp_path / "p16.png"
        write_png(RasterF(rng.uniform(size=(12, 10))), src, bit_depth=16)
        out = tmp_path / "o.png"
        assert run("gad", "--guide", guide, "--input", src, "--iterations", 3, "--output", out) == 0
        with Image.open(out) as im:
            assert im.mode.startswith("I")

    def test_missing_input_is_io_error(self, tmp_path, files):
        guide, _ = files
        assert run("gad", "--guide", guide, "--input", tmp_path / "none.pfm", "--output", tmp_path / "o.pfm") == 1

    def test_corrupt_input_is_io_error(self, tmp_path, files):
        guide, _ = files
        (tmp_path / "bad.pfm").write_bytes(b"Pf\n2 2\n-1.0\n")
        assert run("gad", "--guide", guide, "--input", tmp_path / "bad.pfm", "--output", tmp_path / "o.pfm") == 1

    def test_size_mismatch_is_validation_error(self, tmp_path, files):
        guide, _ = files
        write_pfm(RasterF(np.zeros((3, 3))), tmp_path / "s.pfm")
        assert run("gad", "--guide", guide, "--input", tmp_path / "s.pfm", "--output", tmp_path / "o.pfm") == 2


class TestPm:
    def test_pfm(self, tmp_path, files):
        _, prob = files
        assert run("pm", "--input", prob, "--iterations", 5, "--output", tmp_path / "o.pfm") == 0
        before, after = read_pfm(prob).data, read_pfm(tmp_path / "o.pfm").data
        assert after.sum() == pytest.approx(before.sum(), rel=1e-6)

    def test_png(self, tmp_path, files):
        guide, _ = files
        assert run("pm", "--input", guide, "--output", tmp_path / "o.png") == 0
        assert read_png(tmp_path / "o.png").shape == (12, 10, 3)

    def test_negative_iterations(self, tmp_path, files):
        assert run("pm", "--input", files[1], "--iterations", -1, "--output", tmp_path / "o.pfm") == 2


class TestMerge:
    def write(self, path, rows):
        labelmap_to_png(LabelMap(np.array(rows)), path)

    def test_ignore_all_2x2(self, tmp_path):
        # cells (pred, orig): (0,0) (0,1) / (1,0) (1,1)
        self.write(tmp_path / "orig.png", [[0, 1], [0, 1]])
        self.write(tmp_path / "pred.png", [[0, 0], [1, 1]])
        out = tmp_path / "m.png"
        assert run("merge", "--original", tmp_path / "orig.png", "--prediction", tmp_path / "pred.png",
                   "--strategy", "ignore-all", "--output", out) == 0
        with Image.open(out) as im:
            assert sorted(np.asarray(im).ravel().tolist()) == [0, 128, 128, 255]
            assert np.asarray(im).tolist() == [[0, 128], [128, 255]]

    @pytest.mark.parametrize("strategy", ["intersection", "ignore-fn", "ignore-all"])
    def test_identical_inputs(self, tmp_path, strategy):
        self.write(tmp_path / "a.png", [[0, 1, 1], [1, 0, 0]])
        out = tmp_path / "m.png"
        assert run("merge", "--original", tmp_path / "a.png", "--prediction", tmp_path / "a.png",
                   "--strategy", strategy, "--output", out) == 0
        assert out.read_bytes() == (tmp_path / "a.png").read_bytes()

    def test_missing_strategy(self, tmp_path, capsys):
        self.write(tmp_path / "a.png", [[0]])
        with pytest.raises(SystemExit) as exc:
            run("merge", "--original", tmp_path / "a.png", "--prediction", tmp_path / "a.png",
                "--output", tmp_path / "m.png")
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_dimension_mismatch(self, tmp_path):
        self.write(tmp_path / "a.png", [[0, 1]])
        self.write(tmp_path / "b.png", [[0], [1]])
        assert run("merge", "--original", tmp_path / "a.png", "--prediction", tmp_path / "b.png",
                   "--strategy", "intersection", "--output", tmp_path / "m.png") == 2

    def test_bad_label_pixel(self, tmp_path, capsys):
        Image.fromarray(np.array([[0, 7]], np.uint8)).save(tmp_path / "a.png")
        assert run("merge", "--original", tmp_path / "a.png", "--prediction", tmp_path / "a.png",
                   "--strategy", "intersection", "--output", tmp_path / "m.png") == 2
        assert "row=0, col=1" in capsys.readouterr().err


class TestMetricsAndWeights:
    def test_identical(self, tmp_path, capsys):
        labelmap_to_png(LabelMap([[0, 1], [1, 2]]), tmp_path / "a.png")
        assert run("metrics", "--prediction", tmp_path / "a.png", "--truth", tmp_path / "a.png") == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["dice"] == 1.0 and doc["ignored"] == 1
        assert set(doc) == {"tp", "fp", "fn", "tn", "ignored", "dice", "precision", "recall", "accuracy"}

    def test_pfm_prediction_thresholded(self, tmp_path, capsys):
        write_pfm(RasterF(np.array([[0.2, 0.7]])), tmp_path / "p.pfm")
        labelmap_to_png(LabelMap([[1, 1]]), tmp_path / "t.png")
        assert run("metrics", "--prediction", tmp_path / "p.pfm", "--truth", tmp_path / "t.png",
                   "--threshold", 0.1) == 0
        assert json.loads(capsys.readouterr().out)["tp"] == 2

    def test_weights_130_to_1(self, tmp_path, capsys):
        labelmap_to_png(LabelMap(np.array([[0] * 130 + [1]])), tmp_path / "w.png")
        assert run("weights", "--labels", tmp_path / "w.png") == 0
        assert json.loads(capsys.readouterr().out)["ratio"] == pytest.approx(130.0)


class TestPipeline:
    def test_missing_config(self, tmp_path):
        assert run("pipeline", "--config", tmp_path / "absent.yaml") == 2

    def test_run_and_replay(self, tmp_path, dataset, capsys):
        root, entries = dataset
        cfg = {"schema_version": 1, "dataset_root": str(root), "pairs": entries,
               "output_root": str(tmp_path / "out"), "hyperepochs": 2, "gad": {"iterations": 5}}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert run("--threads", 2, "pipeline", "--config", tmp_path / "c.json") == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["status"] == "ok" and summary["last_hyperepoch"] == 1
        assert run("pipeline", "--replay", tmp_path / "out" / "manifest.json") == 0
        assert json.loads(capsys.readouterr().out)["identical"] is True

    def test_failed_run_exit_code(self, tmp_path, dataset):
        root, entries = dataset
        cfg = {"schema_version": 1, "dataset_root": str(root), "pairs": entries,
               "output_root": str(tmp_path / "out"),
               "predictor": {"kind": "external", "command": "true {train_dir} {labels_dir} {out_dir}"}}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert run("pipeline", "--config", tmp_path / "c.json") == 1
