"""Command-line contracts: outputs, determinism, exit codes."""

import numpy as np
import pytest

from ssmfusion import data, fmt
from ssmfusion.cli import main
from ssmfusion.network import FusionNetConfig, build_fusion_net
from ssmfusion.training import save_checkpoint


def run(*argv):
    return main(list(argv))


class TestGenData:
    def test_count_contract(self, tmp_path, capsys):
        code = run("gen-data", "--seed", "7", "--count", "4", "--height", "64",
                   "--width", "64", "--bands", "8", "--out", str(tmp_path / "d"))
        assert code == 0
        files = [p.name for p in (tmp_path / "d").iterdir()]
        assert len([f for f in files if f.endswith(".fmt")]) == 12
        assert "dataset.manifest" in files

    def test_rerun_is_byte_identical(self, tmp_path):
        for sub in ("a", "b"):
            assert run("gen-data", "--seed", "3", "--count", "2", "--height", "32",
                       "--width", "32", "--bands", "4", "--out", str(tmp_path / sub)) == 0
        for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_indivisible_height_is_argument_error(self, tmp_path, capsys):
        code = run("gen-data", "--seed", "1", "--count", "1", "--height", "63",
                   "--width", "64", "--bands", "4", "--out", str(tmp_path / "d"))
        assert code == 2
        assert "divisible by 4" in capsys.readouterr().err


class TestEval:
    def test_identical_files(self, tmp_path, capsys):
        arr = np.random.default_rng(0).uniform(0, 1, (32, 32, 4)).astype(np.float32)
        fmt.write_tensor(tmp_path / "a.fmt", arr)
        fmt.write_tensor(tmp_path / "b.fmt", arr)
        code = run("eval", "--pred", str(tmp_path / "a.fmt"), "--gt", str(tmp_path / "b.fmt"))
        assert code == 0
        out = capsys.readouterr().out.strip()
        assert out == "psnr=99.000 sam=0.000 ergas=0.000 ssim=1.000"

    def test_missing_file_exit_2(self, tmp_path):
        assert run("eval", "--pred", str(tmp_path / "no.fmt"), "--gt", str(tmp_path / "no.fmt")) == 2

    def test_shape_mismatch_exit_3(self, tmp_path):
        fmt.write_tensor(tmp_path / "a.fmt", np.zeros((16, 16, 2), dtype=np.float32))
        fmt.write_tensor(tmp_path / "b.fmt", np.zeros((16, 16, 3), dtype=np.float32))
        assert run("eval", "--pred", str(tmp_path / "a.fmt"), "--gt", str(tmp_path / "b.fmt")) == 3

    def test_corrupt_file_exit_3(self, tmp_path):
        (tmp_path / "bad.fmt").write_bytes(b"definitely not a tensor")
        fmt.write_tensor(tmp_path / "ok.fmt", np.zeros((16, 16, 1), dtype=np.float32))
        assert run("eval", "--pred", str(tmp_path / "bad.fmt"), "--gt", str(tmp_path / "ok.fmt")) == 3


class TestFlops:
    def test_conv_example(self, capsys):
        assert run("flops", "--kind", "conv", "--height", "1", "--width", "1", "--params", "10") == 0
        assert capsys.readouterr().out.strip() == "20"

    def test_fusion_minus_fourdir(self, capsys):
        args = ["--height", "7", "--width", "9", "--channels", "3", "--state", "5", "--params", "11"]
        run("flops", "--kind", "fusionmamba", *args)
        a = int(capsys.readouterr().out)
        run("flops", "--kind", "fourdir", *args)
        b = int(capsys.readouterr().out)
        assert a - b == 36 * 7 * 9 * 3 * 5

    def test_bad_kind_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            run("flops", "--kind", "dense", "--height", "1", "--width", "1", "--params", "1")
        assert exc.value.code == 2


class TestFuse:
    def test_output_shapes_and_preview(self, tmp_path, capsys):
        cfg = FusionNetConfig(bands=4, channels=4, state_size=2, upsample="bicubic")
        net = build_fusion_net(cfg, seed=0)
        save_checkpoint(net, tmp_path / "ckpt", epoch=0, loss=0.0, seed=0)
        samples, _ = data.generate_synthetic(1, 1, 32, 32, 4)
        fmt.write_tensor(tmp_path / "pan.fmt", samples[0].pan)
        fmt.write_tensor(tmp_path / "lr.fmt", samples[0].lr)
        code = run("fuse", "--ckpt", str(tmp_path / "ckpt"), "--pan", str(tmp_path / "pan.fmt"),
                   "--lr", str(tmp_path / "lr.fmt"), "--out", str(tmp_path / "fused.fmt"))
        assert code == 0
        fused = fmt.read_tensor(tmp_path / "fused.fmt")
        assert fused.shape == (32, 32, 4)  # 4x the low-resolution extent
        assert (tmp_path / "fused.png").exists()
        from PIL import Image

        with Image.open(tmp_path / "fused.png") as img:
            assert img.size == (32, 32)
            assert img.mode == "RGB"

    def test_shape_mismatch_exit_3(self, tmp_path):
        cfg = FusionNetConfig(bands=4, channels=4, state_size=2, upsample="bicubic")
        net = build_fusion_net(cfg, seed=0)
        save_checkpoint(net, tmp_path / "ckpt", epoch=0, loss=0.0, seed=0)
        fmt.write_tensor(tmp_path / "pan.fmt", np.zeros((32, 32, 1), dtype=np.float32))
        fmt.write_tensor(tmp_path / "lr.fmt", np.zeros((16, 16, 4), dtype=np.float32))
        assert run("fuse", "--ckpt", str(tmp_path / "ckpt"), "--pan", str(tmp_path / "pan.fmt"),
                   "--lr", str(tmp_path / "lr.fmt"), "--out", str(tmp_path / "f.fmt")) == 3


class TestTrainCommand:
    def test_config_file_and_overrides(self, tmp_path, capsys):
        data.generate_and_save(tmp_path / "d", 3, 4, 16, 16, 4)
        (tmp_path / "cfg").write_text(
            "bands=4\nchannels=4\nstate_size=2\nupsample=bicubic\n"
            "epochs=2\nbatch_size=2\nlr0=5e-4\nhalve_every=200\nseed=1\n"
        )
        code = run("train", "--data", str(tmp_path / "d"), "--config", str(tmp_path / "cfg"),
                   "--out", str(tmp_path / "run"), "--val-count", "1")
        assert code == 0
        log_lines = (tmp_path / "run" / "train.log").read_text().strip().splitlines()
        assert len(log_lines) == 2
        assert (tmp_path / "run" / "checkpoint.manifest").exists()

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        data.generate_and_save(tmp_path / "d", 3, 2, 16, 16, 4)
        (tmp_path / "cfg").write_text("bands=4\nmomentum=0.9\n")
        code = run("train", "--data", str(tmp_path / "d"), "--config", str(tmp_path / "cfg"),
                   "--out", str(tmp_path / "run"))
        assert code == 2
        assert "momentum" in capsys.readouterr().err

    def test_halve_every_honored(self, tmp_path):
        data.generate_and_save(tmp_path / "d", 3, 2, 16, 16, 4)
        code = run("train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "run"),
                   "--bands", "4", "--channels", "4", "--state-size", "2",
                   "--upsample", "bicubic", "--epochs", "3", "--batch-size", "2",
                   "--lr0", "1e-3", "--halve-every", "2", "--seed", "0")
        assert code == 0
        lines = (tmp_path / "run" / "train.log").read_text().strip().splitlines()
        lrs = [line.split("lr=")[1].split()[0] for line in lines]
        assert lrs == ["0.001", "0.0005", "0.0005"]


class TestGradcheckCommand:
    def test_linear_passes(self, capsys):
        assert run("gradcheck", "--module", "linear", "--tol", "1e-6") == 0
        assert "pass" in capsys.readouterr().out

    def test_impossible_tolerance_fails(self, capsys):
        assert run("gradcheck", "--module", "linear", "--tol", "1e-18") == 1
        assert "FAIL" in capsys.readouterr().out
