"""Command-line interface."""

import json

import pytest
from click.testing import CliRunner

from drr_volume_seg.cli.commands import cli
from drr_volume_seg.storage import read_imgf, read_volb


@pytest.fixture
def runner():
    return CliRunner()


def _render(runner, vol, out, *extra):
    return runner.invoke(cli, ["render", "--vol", str(vol), "--out", str(out), *extra])


def _json_lines(result):
    return [json.loads(line) for line in result.stdout.splitlines() if line.startswith("{")]


@pytest.fixture
def phantom_dir(runner, tmp_path):
    out = tmp_path / "phantoms"
    result = runner.invoke(cli, ["--seed", "0", "phantom", "thorax", "--dims", "32", "--count", "2", "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


@pytest.mark.integration
class TestPhantomCommand:
    def test_writes_volumes_and_manifest(self, phantom_dir):
        for name in ("phantom_000.volb", "mask_000.volb", "phantom_001.volb", "mask_001.volb"):
            assert (phantom_dir / name).exists()
        manifest = json.loads((phantom_dir / "run_manifest.json").read_text())
        assert manifest["subcommand"] == "phantom"
        assert manifest["statistics"]["total_final"] == 4

    def test_json_result_line(self, runner, tmp_path):
        result = runner.invoke(cli, ["--json", "phantom", "ribcage", "--dims", "32", "--out", str(tmp_path)])
        assert result.exit_code == 0, result.output
        events = _json_lines(result)
        assert events[-1]["event"] == "result"
        assert events[-1]["files"] == 2

    def test_invalid_dims_is_usage_error(self, runner, tmp_path):
        result = runner.invoke(cli, ["phantom", "thorax", "--dims", "8", "--out", str(tmp_path)])
        assert result.exit_code == 2


@pytest.mark.integration
class TestRenderCommand:
    def test_downsampled_render(self, runner, phantom_dir, tmp_path):
        out = tmp_path / "drr" / "p0.imgf"
        result = _render(runner, phantom_dir / "phantom_000.volb", out, "--detector", "32", "--down", "16")
        assert result.exit_code == 0, result.output
        image = read_imgf(out)
        assert image.dims == (16, 16)
        assert image.values.min() >= 0.0 and image.values.max() <= 1.0
        assert out.with_suffix(".pgm").exists()

    def test_mask_rejected(self, runner, phantom_dir, tmp_path):
        result = _render(runner, phantom_dir / "mask_000.volb", tmp_path / "m.imgf")
        assert result.exit_code == 1
        assert "Error" in result.output

    def test_invalid_geometry(self, runner, phantom_dir, tmp_path):
        result = _render(runner, phantom_dir / "phantom_000.volb", tmp_path / "x.imgf", "--pixel-mm", "0")
        assert result.exit_code == 2


@pytest.mark.integration
class TestDatasetCommand:
    def test_small_dataset(self, runner, tmp_path):
        out = tmp_path / "data"
        args = "--workers 1 --json dataset --dims 16 --n-train 1 --n-test 1 --detector 32 --gain 0.9".split()
        result = runner.invoke(cli, [*args, "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert _json_lines(result)[-1]["n_train"] == 1
        assert read_volb(out / "masks" / "item_0001.volb").dims == (16, 16, 16)
        assert (out / "run_manifest.json").exists()

    def test_target_larger_than_phantom(self, runner, tmp_path):
        result = runner.invoke(cli, ["dataset", "--dims", "16", "--target", "32", "--out", str(tmp_path)])
        assert result.exit_code == 2


@pytest.mark.integration
class TestTrainAndEval:
    def test_no_fusion_needs_phiseg(self, runner, tiny_dataset, tmp_path):
        result = runner.invoke(
            cli, ["train", "--model", "unet-det", "--no-fusion", "--dataset", str(tiny_dataset), "--out", str(tmp_path)]
        )
        assert result.exit_code == 2

    def test_uda_model_routed_to_uda_command(self, runner, tiny_dataset, tmp_path):
        result = runner.invoke(
            cli, ["train", "--model", "phiseg-uda", "--dataset", str(tiny_dataset), "--out", str(tmp_path)]
        )
        assert result.exit_code == 2

    def test_invalid_epochs(self, runner, tiny_dataset, tmp_path):
        result = runner.invoke(
            cli, ["train", "--epochs", "0", "--dataset", str(tiny_dataset), "--out", str(tmp_path)]
        )
        assert result.exit_code == 2

    def test_uda_needs_target_dataset(self, runner, tiny_dataset, tmp_path):
        result = runner.invoke(cli, ["uda", "--dataset", str(tiny_dataset), "--out", str(tmp_path)])
        assert result.exit_code == 2

    def test_train_then_eval(self, runner, tiny_dataset, tmp_path):
        run = tmp_path / "run"
        result = runner.invoke(
            cli,
            [
                *"--seed 2 --json train --model unet-dropout --epochs 1 --batch-size 2 --base-channels 2".split(),
                "--dataset",
                str(tiny_dataset),
                "--out",
                str(run),
            ],
        )
        assert result.exit_code == 0, result.output
        events = _json_lines(result)
        assert any(e["event"] == "step" for e in events)
        assert events[-1]["event"] == "result"
        checkpoint = run / "model.ckpt"
        assert checkpoint.exists()

        eval_dir = tmp_path / "eval"
        result = runner.invoke(
            cli,
            [
                *["--json", "eval", str(checkpoint), "--dataset", str(tiny_dataset)],
                *["--mc", "2", "--previews", "--out", str(eval_dir)],
            ],
        )
        assert result.exit_code == 0, result.output
        final = _json_lines(result)[-1]
        assert final["event"] == "result"
        assert "dice" in final["aggregate"]
        assert {c["check"] for c in final["checks"]} >= {"cases", "bounds_ordered"}
        assert (eval_dir / "metrics.json").exists()
        assert list((eval_dir / "previews").glob("*.pgm"))

    def test_eval_cross_family_fails(self, runner, tiny_dataset, tmp_path):
        run = tmp_path / "run"
        runner.invoke(
            cli,
            [
                *"train --model unet-det --epochs 1 --base-channels 2 --max-steps 1".split(),
                "--dataset",
                str(tiny_dataset),
                "--out",
                str(run),
            ],
        )
        result = runner.invoke(
            cli,
            [
                *["eval", str(run / "model.ckpt"), "--dataset", str(tiny_dataset)],
                *["--architecture", "phiseg", "--out", str(tmp_path / "eval")],
            ],
        )
        assert result.exit_code == 1


@pytest.mark.unit
def test_version(runner):
    result = runner.invoke(cli, ["--version"])
    assert result.exit_code == 0
    assert "0.1.0" in result.output
