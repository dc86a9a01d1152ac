import json
import math

import numpy as np
import pytest

from sawunet import data
from sawunet.cli import main
from sawunet.metrics import evaluate, read_report
from sawunet.vca import vca

SMALL = ["--height", "10", "--width", "12", "--bands", "16", "--endmembers", "3"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def echoed(out: str) -> dict:
    return json.loads(out.splitlines()[0])


@pytest.fixture
def scene(tmp_path, capsys):
    code, _, _ = run(capsys, "generate", *SMALL, "--seed", 3, "--out", tmp_path / "scene")
    assert code == 0
    return tmp_path / "scene"


def train_args(scene, out, *extra):
    return ["train", "--cube", scene / "cube.bin", "--endmembers", 3, "--epochs", 2, "--batch", 32,
            "--out", out, *extra]


class TestGenerate:
    def test_defaults_give_30db(self, tmp_path, capsys):
        code, out, _ = run(capsys, "generate", "--out", tmp_path)
        assert code == 0
        assert echoed(out)["snr"] == 30.0
        cube = data.load_cube(tmp_path / "cube.bin")
        gt = data.load_ground_truth(tmp_path / "gt_endmembers.txt", tmp_path / "gt_abundances.bin")
        assert (cube.height, cube.width, cube.bands, gt.endmembers.shape[1]) == (64, 64, 100, 4)
        clean = gt.abundances @ gt.endmembers.T
        assert abs(data.measured_snr(clean, cube.values) - 30.0) <= 0.1
        printed = float(out.split("achieved_snr_db=")[1].split()[0])
        assert abs(printed - 30.0) <= 0.1

    def test_noiseless(self, tmp_path, capsys):
        code, out, _ = run(capsys, "generate", *SMALL, "--snr", "inf", "--out", tmp_path)
        assert code == 0 and "achieved_snr_db=inf" in out

    def test_unwritable_output(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code, _, err = run(capsys, "generate", *SMALL, "--out", blocker / "sub")
        assert code == 2 and "error" in err


class TestTrain:
    def test_echo_and_outputs(self, scene, tmp_path, capsys):
        code, out, _ = run(capsys, *train_args(scene, tmp_path / "t"))
        assert code == 0
        cfg = echoed(out)
        assert (cfg["P"], cfg["K"], cfg["L"], cfg["epochs"], cfg["batch_size"]) == (3, 3, 16, 2, 32)
        assert cfg["use_pixel_attention"] is True
        lines = (tmp_path / "t" / "loss.txt").read_text().splitlines()
        assert [int(line.split()[0]) for line in lines] == [0, 1]
        assert json.loads((tmp_path / "t" / "config.json").read_text()) == cfg

    def test_deterministic(self, scene, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, *train_args(scene, tmp_path / name))[0] == 0
        for f in ("loss.txt", "model.ckpt"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_no_pixel_attention_flag(self, scene, tmp_path, capsys):
        code, out, _ = run(capsys, *train_args(scene, tmp_path / "t", "--no-pixel-attention"))
        assert code == 0 and echoed(out)["use_pixel_attention"] is False

    def test_band_mismatch(self, scene, tmp_path, capsys):
        code, _, err = run(capsys, *train_args(scene, tmp_path / "t", "--bands", 17))
        assert code == 2 and "bands" in err

    def test_missing_cube(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--cube", tmp_path / "none.bin", "--out", tmp_path / "t")
        assert code == 2

    def test_even_window_rejected(self, scene, tmp_path, capsys):
        code, _, _ = run(capsys, *train_args(scene, tmp_path / "t", "--window", 4))
        assert code == 2


class TestConfigFile:
    def test_flags_override_file(self, scene, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"K": 5, "lambda1": 3.0, "epochs": 1}))
        code, out, _ = run(capsys, *train_args(scene, tmp_path / "t", "--config", cfg, "--window", 1))
        got = echoed(out)
        assert code == 0
        assert (got["K"], got["lambda1"], got["epochs"]) == (1, 3.0, 2)

    def test_unknown_key(self, scene, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"learning_rate": 0.1}))
        code, _, err = run(capsys, *train_args(scene, tmp_path / "t", "--config", cfg))
        assert code == 2 and "learning_rate" in err


class TestEval:
    def test_untrained_checkpoint_scores_like_vca(self, scene, tmp_path, capsys):
        assert run(capsys, *train_args(scene, tmp_path / "t", "--epochs", 0, "--seed", 5))[0] == 0
        code, out, _ = run(capsys, "eval", "--checkpoint", tmp_path / "t" / "model.ckpt",
                           "--cube", scene / "cube.bin", "--gt-endmembers", scene / "gt_endmembers.txt",
                           "--gt-abundances", scene / "gt_abundances.bin", "--out", tmp_path / "e")
        assert code == 0 and "Avg" in out
        report = read_report(tmp_path / "e" / "metrics.txt")
        cube = data.load_cube(scene / "cube.bin")
        gt = data.load_matrix(scene / "gt_endmembers.txt")
        direct = evaluate(vca(cube, 3, seed=5).endmembers, gt)
        assert float(report["sad_avg"]) == direct.sad_avg
        sads = [float(report[f"sad_{g}"]) for g in (1, 2, 3)]
        assert float(report["sad_avg"]) == pytest.approx(np.mean(sads), abs=1e-15)
        rmses = [float(report[f"rmse_{g}"]) for g in (1, 2, 3)]
        assert float(report["rmse_avg"]) == pytest.approx(np.mean(rmses), abs=1e-15)
        for g in (1, 2, 3):
            assert (tmp_path / "e" / f"abundance_{g}.pgm").exists()
        assert np.loadtxt(tmp_path / "e" / "endmembers.csv", delimiter=",").shape == (16, 3)

    def test_missing_ground_truth_warns(self, scene, tmp_path, capsys):
        run(capsys, *train_args(scene, tmp_path / "t", "--epochs", 0))
        code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "t" / "model.ckpt",
                           "--cube", scene / "cube.bin", "--out", tmp_path / "e")
        assert code == 0 and "warning" in err
        assert not (tmp_path / "e" / "metrics.txt").exists()

    def test_band_mismatch(self, scene, tmp_path, capsys):
        run(capsys, *train_args(scene, tmp_path / "t", "--epochs", 0))
        other = tmp_path / "other"
        run(capsys, "generate", "--height", 4, "--width", 4, "--bands", 9, "--endmembers", 3, "--out", other)
        code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "t" / "model.ckpt",
                           "--cube", other / "cube.bin", "--out", tmp_path / "e")
        assert code == 2 and "bands" in err


def test_pure_pixel_renders_white(tmp_path):
    ab = np.zeros((2, 2, 2))
    ab[0, 0, 0] = 1.0
    ab[..., 1] = 1.0 - ab[..., 0]
    data.write_pgm(tmp_path / "a.pgm", ab[..., 0])
    assert data.read_pgm(tmp_path / "a.pgm")[0, 0] == 255


def test_ablate_rows(scene, tmp_path, capsys):
    code, out, _ = run(capsys, "ablate", "--cube", scene / "cube.bin",
                       "--gt-endmembers", scene / "gt_endmembers.txt",
                       "--gt-abundances", scene / "gt_abundances.bin", "--endmembers", 3,
                       "--epochs", 1, "--batch", 64, "--seeds", 0, 1, "--out", tmp_path / "ab")
    assert code == 0
    table = [line for line in out.splitlines() if line[:1].isalpha() and not line.startswith("variant")]
    assert [r.split()[0] for r in table] == ["baseline", "no_pa", "sawu"] + ["sawu"] * 5
    assert [int(r.split()[1]) for r in table][3:] == [1, 3, 5, 7, 9]
    lines = (tmp_path / "ab" / "ablation.txt").read_text().splitlines()
    assert sum(".median=" in line for line in lines) == 8
    vals = dict(line.split("=") for line in lines)
    for row in range(8):
        seeds = [float(v) for k, v in vals.items() if k.startswith(f"row{row}.") and ".seed" in k]
        mean = next(float(v) for k, v in vals.items() if k.startswith(f"row{row}.") and k.endswith(".mean"))
        assert len(seeds) == 2 and mean == pytest.approx(np.mean(seeds), abs=1e-15)
        assert all(math.isfinite(s) for s in seeds)
