import numpy as np
import pytest

from maskrestore import cli
from maskrestore.checkpoint import load_checkpoint
from maskrestore.pipeline import MetricRecord
from maskrestore.ppm import read_ppm


def run_cli(*argv):
    return cli.main(list(argv))


def single_run_dir(parent):
    dirs = sorted(p for p in parent.iterdir() if p.is_dir())
    assert len(dirs) >= 1
    return dirs[-1]


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    """One tiny synth -> pretrain -> mac-rank chain shared by CLI tests."""
    out = tmp_path_factory.mktemp("runs")
    assert run_cli("synth", "--out", str(out / "synth"), "--seed", "3",
                   "--n-train", "12", "--n-eval", "4") == 0
    synth_dir = single_run_dir(out / "synth")
    data = synth_dir / "dataset"

    assert run_cli("pretrain", "--out", str(out / "pre"), "--seed", "3",
                   "--data", str(data), "--pretrain-steps", "12") == 0
    pre_dir = single_run_dir(out / "pre")

    assert run_cli("mac-rank", "--out", str(out / "rank"), "--seed", "3",
                   "--data", str(data), "--checkpoint", str(pre_dir / "stage1.ckpt"),
                   "--path-steps", "8", "--probe-per-kind", "1") == 0
    rank_dir = single_run_dir(out / "rank")
    return {"out": out, "data": data, "pre": pre_dir, "rank": rank_dir}


class TestSynth:
    def test_artifacts(self, pipeline_dirs):
        data = pipeline_dirs["data"]
        assert (data / "train" / "manifest.txt").exists()
        for kind in ("gaussian_noise", "gaussian_blur", "jpeg"):
            assert (data / "eval" / kind / "manifest.txt").exists()
        run_dir = data.parent
        assert (run_dir / "effective.cfg").exists()
        assert (run_dir / "samples.png").stat().st_size > 0


class TestPretrain:
    def test_artifacts(self, pipeline_dirs):
        pre = pipeline_dirs["pre"]
        assert (pre / "stage1.ckpt").exists()
        assert (pre / "loss_curve.png").exists()
        curve = (pre / "loss_curve.txt").read_text().splitlines()
        assert curve[0].startswith("#") and len(curve) == 13

    def test_missing_data_is_an_error(self, tmp_path):
        assert run_cli("pretrain", "--out", str(tmp_path), "--data",
                       str(tmp_path / "nope")) == 1


class TestMacRank:
    def test_report_artifact(self, pipeline_dirs):
        rank = pipeline_dirs["rank"]
        text = (rank / "layer_report.txt").read_text()
        assert text.startswith("# layer report")
        assert len(text.splitlines()) == 23  # 22 groups + header
        assert (rank / "mac_scores.png").exists()

    def test_requires_checkpoint(self, pipeline_dirs, tmp_path):
        assert run_cli("mac-rank", "--out", str(tmp_path),
                       "--data", str(pipeline_dirs["data"])) == 1


@pytest.fixture(scope="module")
def finetune_dir(pipeline_dirs):
    out = pipeline_dirs["out"]
    assert run_cli("finetune", "--out", str(out / "ft"), "--seed", "3",
                   "--data", str(pipeline_dirs["data"]),
                   "--checkpoint", str(pipeline_dirs["pre"] / "stage1.ckpt"),
                   "--report", str(pipeline_dirs["rank"] / "layer_report.txt"),
                   "--finetune-steps", "8") == 0
    return single_run_dir(out / "ft")


class TestFinetuneEvalTwin:
    def test_finetune_without_report_rejected_below_k100(self, pipeline_dirs, tmp_path):
        code = run_cli("finetune", "--out", str(tmp_path),
                       "--data", str(pipeline_dirs["data"]),
                       "--checkpoint", str(pipeline_dirs["pre"] / "stage1.ckpt"),
                       "--finetune-steps", "2")
        assert code == 1

    def test_finetune_k100_without_report_allowed(self, pipeline_dirs, tmp_path):
        code = run_cli("finetune", "--out", str(tmp_path), "--seed", "3",
                       "--data", str(pipeline_dirs["data"]),
                       "--checkpoint", str(pipeline_dirs["pre"] / "stage1.ckpt"),
                       "--k-percent", "100", "--finetune-steps", "2")
        assert code == 0

    def test_stage2_checkpoint_contains_all_models(self, finetune_dir):
        _, tensors = load_checkpoint(finetune_dir / "stage2.ckpt")
        prefixes = {key.split("/")[0] for key in tensors}
        assert prefixes == {"restorer", "fusion", "extractor"}

    def test_eval_artifacts(self, pipeline_dirs, finetune_dir):
        out = pipeline_dirs["out"]
        assert run_cli("eval", "--out", str(out / "ev"), "--seed", "3",
                       "--data", str(pipeline_dirs["data"]),
                       "--checkpoint", str(finetune_dir / "stage2.ckpt")) == 0
        ev = single_run_dir(out / "ev")
        metrics = (ev / "metrics.txt").read_text()
        assert metrics.splitlines()[0].split() == ["kind", "psnr", "ssim", "n"]
        kinds = [line.split()[0] for line in metrics.splitlines()[1:4]]
        assert len(kinds) == 3  # all synthesized degradation kinds are reported
        cka_lines = (ev / "cka.txt").read_text().splitlines()
        assert cka_lines[0].split() == ["kind"] + kinds
        assert len(cka_lines) == 4
        for name in ("metrics.csv", "metrics.png", "cka.png"):
            assert (ev / name).exists()

    def test_eval_works_from_stage1_checkpoint(self, pipeline_dirs, tmp_path):
        assert run_cli("eval", "--out", str(tmp_path), "--seed", "3",
                       "--data", str(pipeline_dirs["data"]),
                       "--checkpoint", str(pipeline_dirs["pre"] / "stage1.ckpt")) == 0

    def test_twin_infer_emits_one_image_per_input(self, pipeline_dirs):
        out = pipeline_dirs["out"]
        assert run_cli("twin-infer", "--out", str(out / "tw"), "--seed", "3",
                       "--data", str(pipeline_dirs["data"]),
                       "--checkpoint", str(pipeline_dirs["pre"] / "stage1.ckpt")) == 0
        tw = single_run_dir(out / "tw")
        restored = sorted((tw / "restored").glob("*.ppm"))
        masks = sorted((tw / "masks").glob("*.pgm"))
        assert len(restored) == 4 and len(masks) == 4  # one per eval input
        img = read_ppm(restored[0])
        assert img.shape == (3, 32, 32)


class TestReportEmit:
    RECORDS = [
        MetricRecord("gaussian_noise", 24.048, 0.83214, 16),
        MetricRecord("jpeg", 31.5, 0.9, 8),
    ]

    def test_table_formatting(self):
        text = cli.report_emit(self.RECORDS, "table")
        lines = text.splitlines()
        assert lines[0].split() == ["kind", "psnr", "ssim", "n"]
        assert "24.05" in lines[1] and "0.8321" in lines[1]
        assert "31.50" in lines[2] and "0.9000" in lines[2]

    def test_csv_lines(self):
        text = cli.report_emit(self.RECORDS, "csv")
        assert text.splitlines()[1] == "gaussian_noise,24.05,0.8321,16"

    def test_identical_records_identical_bytes(self):
        assert cli.report_emit(self.RECORDS, "table") == cli.report_emit(self.RECORDS, "table")

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no records"):
            cli.report_emit([], "table")

    def test_unknown_format_rejected(self):
        with pytest.raises(ValueError, match="format"):
            cli.report_emit(self.RECORDS, "yaml")


class TestConfigRoundTrip:
    def test_effective_config_reproduces_run(self, pipeline_dirs, tmp_path):
        # re-running pretrain from the echoed config yields a bit-identical curve
        effective = pipeline_dirs["pre"] / "effective.cfg"
        assert run_cli("pretrain", "--config", str(effective),
                       "--out", str(tmp_path / "re")) == 0
        redo = single_run_dir(tmp_path / "re")
        original = (pipeline_dirs["pre"] / "loss_curve.txt").read_text()
        assert (redo / "loss_curve.txt").read_text() == original

    def test_invalid_flag_value_exits_nonzero(self, tmp_path):
        assert run_cli("synth", "--out", str(tmp_path), "--rho", "1.5") == 1
