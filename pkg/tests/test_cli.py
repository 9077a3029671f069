import json

import numpy as np
import pytest

from forgenet.cli import main
from forgenet.data import read_dataset
from forgenet.model import ModelConfig
from forgenet.train import RunConfig


def micro_run_config(data_dir, out_dir):
    return RunConfig(
        model=ModelConfig(
            image_size=16, grid=2, entry_widths=(3, 4, 5), branch_width=5,
            embed_dim=3, bilinear_m=4, bilinear_n=6, seed=0,
        ),
        epochs=1,
        batch_size=8,
        min_real=2,
        min_fake=2,
        seed=1,
        train_dir=str(data_dir),
        out_dir=str(out_dir),
    )


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = main(
        [
            "gen-data", "--out", str(data), "--n-real", "16",
            "--fake", "paste=16", "--size", "16", "--frames", "4", "--seed", "3",
        ]
    )
    assert rc == 0
    cfg_path = root / "run.json"
    out_dir = root / "run_out"
    cfg = micro_run_config(data, out_dir)
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    assert main(["train", "--config", str(cfg_path)]) == 0
    return {
        "root": root,
        "data": data,
        "config": cfg_path,
        "checkpoint": out_dir / "checkpoint",
    }


class TestGenData:
    def test_dataset_readable_and_sized(self, workspace):
        samples = read_dataset(workspace["data"])
        assert len(samples) == 32
        assert sum(s.label for s in samples) == 16

    def test_bad_fake_spec_exits_2(self, tmp_path, capsys):
        rc = main(["gen-data", "--out", str(tmp_path / "x"), "--fake", "paste"])
        assert rc == 2
        assert "error" in capsys.readouterr().err


class TestTrainEval:
    def test_checkpoint_written(self, workspace):
        assert (workspace["checkpoint"] / "manifest.json").exists()
        assert (workspace["checkpoint"] / "params.tnsr").exists()

    def test_eval_writes_report(self, workspace, capsys):
        out = workspace["root"] / "eval_out"
        rc = main(
            [
                "eval", "--checkpoint", str(workspace["checkpoint"]),
                "--data", str(workspace["data"]), "--out", str(out), "--svg",
            ]
        )
        assert rc == 0
        assert (out / "metrics.json").exists()
        assert (out / "roc.csv").exists()
        assert (out / "roc.svg").exists()
        assert any((out / "maps").glob("*.pgm"))

    def test_missing_data_exits_2(self, capsys):
        assert main(["train"]) == 2
        assert "error" in capsys.readouterr().err

    def test_flag_overrides_apply(self, workspace, tmp_path, capsys):
        out = tmp_path / "override_out"
        rc = main(
            [
                "train", "--config", str(workspace["config"]),
                "--mode", "sspsl", "--region", "mouth",
                "--seed", "9", "--out", str(out),
            ]
        )
        assert rc == 0
        manifest = json.loads((out / "checkpoint" / "manifest.json").read_text())
        assert manifest["run_config"]["mode"] == "sspsl"
        assert manifest["run_config"]["region"] == "mouth"
        assert manifest["run_config"]["seed"] == 9


class TestPredict:
    def test_prints_probability(self, workspace, tmp_path, capsys):
        from forgenet.formats import write_tnsr

        samples = read_dataset(workspace["data"])
        img = tmp_path / "probe.tnsr"
        write_tnsr(img, np.rint(samples[0].image * 255).astype(np.uint8))
        rc = main(
            [
                "predict", "--checkpoint", str(workspace["checkpoint"]),
                "--image", str(img), "--out", str(tmp_path / "pred"),
                "--cam", "cls_final",
            ]
        )
        assert rc == 0
        prob = float(capsys.readouterr().out.strip().splitlines()[-1])
        assert 0.0 < prob < 1.0
        assert (tmp_path / "pred" / "forgery_map.pgm").exists()
        assert (tmp_path / "pred" / "cam.pgm").exists()

    def test_unreadable_image_fails(self, workspace, tmp_path, capsys):
        bogus = tmp_path / "missing.tnsr"
        rc = main(
            ["predict", "--checkpoint", str(workspace["checkpoint"]), "--image", str(bogus)]
        )
        assert rc == 1


class TestGradcheckCommand:
    def test_per_op_sweep_passes(self, capsys):
        rc = main(["gradcheck", "--seed", "0"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "FAIL" not in out
        assert "worst" in out
