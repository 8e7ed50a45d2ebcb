import numpy as np
import pytest
from PIL import Image

from lapnet import cli
from lapnet.data import ToyDatasetSpec, generate_toy_sample, load_netpbm, save_netpbm, split_indices
from lapnet.heatmap import read_keypoint_file, toy_schema


def _tsv_records(path, kind):
    return [line.split("\t") for line in path.read_text().splitlines() if line.startswith(kind + "\t")]


@pytest.fixture(scope="module")
def sample_image(tmp_path_factory):
    """A training-split toy sample written as PGM, with its ground truth."""
    spec = ToyDatasetSpec()
    index = split_indices(spec)[0][0]
    img, kps = generate_toy_sample(spec, index)
    path = tmp_path_factory.mktemp("img") / "sample.pgm"
    save_netpbm(path, img)
    return path, kps


class TestAnalyze:
    def test_lap2_against_baseline(self, tmp_path, capsys):
        out = tmp_path / "report.tsv"
        assert cli.main(["analyze", "--config", "lap2", "--baseline", "hourglass2-standard",
                         "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "enumerated trainable scalars" in text and "(match)" in text
        compare = {(r[1], r[2]): r for r in _tsv_records(out, "compare")}
        params_pct = float(compare[("counted", "params_reduction_pct")][3])
        assert abs(params_pct - 65.67) < 10.0
        assert out.with_suffix(".png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_self_comparison_zero(self, tmp_path, capsys):
        assert cli.main(["analyze", "--config", "toy", "--baseline", "toy", "--out", str(tmp_path / "r.tsv"),
                         "--no-figure"]) == 0
        line = next(x for x in capsys.readouterr().out.splitlines() if x.startswith("counted:"))
        assert "-> 0.00% fewer; " in line and line.endswith("-> 0.00% fewer")
        assert not (tmp_path / "r.png").exists()

    def test_reference_self_check(self, tmp_path, capsys):
        assert cli.main(["analyze", "--config", "toy", "--out", str(tmp_path / "r.tsv"), "--no-figure"]) == 0
        line = next(x for x in capsys.readouterr().out.splitlines() if x.startswith("reference totals"))
        assert "65.67% fewer" in line and "59.25% fewer" in line

    def test_totals_record(self, tmp_path):
        out = tmp_path / "r.tsv"
        cli.main(["analyze", "--config", "toy", "--out", str(out), "--no-figure"])
        totals = {r[1]: r for r in _tsv_records(out, "total")}
        layers = _tsv_records(out, "layer")
        assert int(totals["toy"][3]) == sum(int(r[3]) for r in layers)

    def test_input_size_override(self, tmp_path, capsys):
        cli.main(["analyze", "--config", "toy", "--input-size", "128x96", "--out", str(tmp_path / "r.tsv"),
                  "--no-figure"])
        assert "toy @ 128x96" in capsys.readouterr().out

    def test_bad_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("stacks = two\n")
        assert cli.main(["analyze", "--config", str(cfg), "--out", str(tmp_path / "r.tsv")]) == 2
        assert "error:" in capsys.readouterr().err

    def test_unknown_flag_rejected(self):
        with pytest.raises(SystemExit) as e:
            cli.main(["analyze", "--colour"])
        assert e.value.code == 2


class TestTrainOutputs:
    def test_files(self, toy_run):
        out = toy_run["out"]
        assert toy_run["code"] == 0
        for name in ("epochs.log", "val_detail.log", "best.ckpt", "last.ckpt", "network.cfg", "train.cfg",
                     "val_metrics.tsv", "loss_curves.png"):
            assert (out / name).exists(), name


class TestInfer:
    def test_joints_near_ground_truth(self, toy_run, sample_image, tmp_path):
        image, gt = sample_image
        assert cli.main(["infer", "--ckpt", str(toy_run["out"] / "best.ckpt"), "--image", str(image),
                         "--out", str(tmp_path)]) == 0
        (_, kps), = read_keypoint_file(tmp_path / "keypoints.txt", toy_schema(4))
        assert np.all(np.hypot(*(kps.xy - gt.xy).T) <= 2.0)
        assert kps.confidence is not None

    def test_outputs_parse_and_repeat_identically(self, toy_run, sample_image, tmp_path):
        image, _ = sample_image
        for d in ("a", "b"):
            cli.main(["infer", "--ckpt", str(toy_run["out"] / "best.ckpt"), "--image", str(image),
                      "--out", str(tmp_path / d)])
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert len([f for f in files if f.startswith("heatmap_")]) == 4
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert load_netpbm(tmp_path / "a" / "heatmap_00_j0.pgm").shape == (1, 16, 16)
        overlay = Image.open(tmp_path / "a" / "overlay.ppm")
        assert overlay.format == "PPM" and overlay.mode == "RGB" and overlay.size == (256, 256)

    def test_size_mismatch(self, toy_run, tmp_path, capsys):
        save_netpbm(tmp_path / "small.pgm", np.zeros((1, 32, 48)))
        code = cli.main(["infer", "--ckpt", str(toy_run["out"] / "best.ckpt"), "--image",
                         str(tmp_path / "small.pgm"), "--out", str(tmp_path / "o")])
        assert code == 3
        assert "expected 1x64x64 (CxHxW), got 1x32x48" in capsys.readouterr().err

    @pytest.mark.parametrize("damage, code", [(lambda b: b[:len(b) // 2], 13), (lambda b: b"XXXX" + b[4:], 11)])
    def test_damaged_checkpoint(self, toy_run, sample_image, tmp_path, damage, code):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(damage((toy_run["out"] / "best.ckpt").read_bytes()))
        assert cli.main(["infer", "--ckpt", str(bad), "--image", str(sample_image[0]),
                         "--out", str(tmp_path / "o")]) == code

    def test_missing_checkpoint(self, sample_image, tmp_path):
        assert cli.main(["infer", "--ckpt", str(tmp_path / "none.ckpt"), "--image", str(sample_image[0]),
                         "--out", str(tmp_path / "o")]) == 1


class TestEval:
    def test_toy_validation(self, toy_run, tmp_path, capsys):
        out = tmp_path / "eval.tsv"
        assert cli.main(["eval", "--ckpt", str(toy_run["out"] / "best.ckpt"), "--out", str(out)]) == 0
        assert capsys.readouterr().out.endswith(out.read_text())
        rows = dict(line.split("\t") for line in out.read_text().splitlines())
        assert float(rows["PCK@0.1"]) >= 0.9

    def test_exported_directory(self, toy_run, tmp_path, capsys):
        spec = tmp_path / "small.cfg"
        spec.write_text("num_samples = 6\n")
        assert cli.main(["export-toy", "--dataset", str(spec), "--out", str(tmp_path / "d")]) == 0
        assert len(list((tmp_path / "d").glob("*.pgm"))) == 6
        capsys.readouterr()
        assert cli.main(["eval", "--ckpt", str(toy_run["out"] / "best.ckpt"),
                         "--dataset", str(tmp_path / "d")]) == 0
        assert "#   samples = 6" in capsys.readouterr().out
