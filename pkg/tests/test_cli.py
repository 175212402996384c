import numpy as np
import pytest

from convllava import checkpoint
from convllava.cli import main
from convllava.config import write_kv
from convllava.preprocess import ImageRGB, load_tensor, save_ppm, save_tensor
from convllava.trainer import read_metrics

TRAIN_PLAN = {"stages": "1", "encoder": "tiny", "image_size": 32, "n_samples": 8, "embed_dim": 16, "heads": 2,
              "max_seq": 16, "batch_size": 4, "steps": 3, "peak_lr": 1e-3}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def square_ppm(tmp_path):
    path = tmp_path / "sq.ppm"
    save_ppm(ImageRGB.from_array(np.random.default_rng(0).integers(0, 256, (200, 200, 3))), path)
    return path


class TestAnalyze:
    def test_table_tokens(self, capsys):
        code, out, _ = run(capsys, "analyze", "--kinds", "vit,convnext4,convnext5", "--resolutions",
                           "336,768,1024,1536")
        assert code == 0
        lines = out.strip().splitlines()
        assert lines[0] == "kind,resolution,tokens,encoder_flops,llm_flops,total_flops" and len(lines) == 13
        rows = {tuple(line.split(",")[:2]): int(line.split(",")[2]) for line in lines[1:]}
        assert rows[("vit", "336")] == 576 and rows[("convnext5", "1536")] == 576

    def test_bogus_kind(self, capsys):
        code, _, err = run(capsys, "analyze", "--kinds", "bogus")
        assert code == 2 and "vit, convnext4, convnext5" in err and "usage" in err

    def test_repeatable_and_plot(self, capsys, tmp_path):
        a = run(capsys, "analyze", "--out", tmp_path / "a.csv")
        b = run(capsys, "analyze", "--out", tmp_path / "b.csv", "--plot", tmp_path / "f.png")
        assert a[0] == b[0] == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "f.png").read_bytes()[:4] == b"\x89PNG"


class TestEncode:
    def test_square_1536(self, capsys, square_ppm, tmp_path):
        code, out, _ = run(capsys, "encode", "--config", "toy5", "--image", square_ppm, "--mode", "square",
                           "--res", 1536, "--out", tmp_path / "t.cvt")
        assert code == 0 and out.strip() == "tokens=576 grid=24x24"
        assert load_tensor(tmp_path / "t.cvt").shape == (1, 576, 64)

    def test_short_side_wide(self, capsys, tmp_path):
        path = tmp_path / "wide.ppm"
        save_ppm(ImageRGB.from_array(np.zeros((100, 200, 3))), path)
        code, out, _ = run(capsys, "encode", "--config", "toy5", "--image", path, "--mode", "short_side",
                           "--res", 1024)
        assert code == 0 and "grid=16x32" in out

    def test_tensor_input(self, capsys, tmp_path):
        save_tensor(np.zeros((1, 3, 128, 192), dtype=np.float32), tmp_path / "x.cvt")
        code, out, _ = run(capsys, "encode", "--config", "toy5", "--image", tmp_path / "x.cvt")
        assert code == 0 and out.strip() == "tokens=6 grid=2x3"

    def test_resolution_not_multiple(self, capsys, square_ppm):
        code, _, err = run(capsys, "encode", "--config", "toy5", "--image", square_ppm, "--res", 1000)
        assert code == 2 and "64" in err

    def test_missing_file(self, capsys, tmp_path):
        code, _, err = run(capsys, "encode", "--config", "toy5", "--image", tmp_path / "nope.ppm")
        assert code == 1 and "not found" in err

    def test_checkpoint_is_used(self, capsys, square_ppm, tmp_path):
        from convllava.encoder import PRESETS, build_encoder

        state = build_encoder(PRESETS["toy5"], seed=4)
        checkpoint.save({f"encoder.{k}": v for k, v in state.params.items()}, tmp_path / "c")
        args = ["encode", "--config", "toy5", "--image", square_ppm, "--res", 128]
        run(capsys, *args, "--out", tmp_path / "a.cvt", "--ckpt", tmp_path / "c")
        run(capsys, *args, "--out", tmp_path / "b.cvt", "--seed", 4)
        run(capsys, *args, "--out", tmp_path / "d.cvt")
        a, b, d = (load_tensor(tmp_path / f) for f in ("a.cvt", "b.cvt", "d.cvt"))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, d)


def test_preprocess_command(capsys, square_ppm, tmp_path):
    code, out, _ = run(capsys, "preprocess", "--config", "tiny", "--image", square_ppm, "--res", 64,
                       "--out", tmp_path / "p.cvt")
    assert code == 0 and out.strip() == "shape=1x3x64x64"


class TestProperties:
    def test_gradcheck_seed7(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--seed", 7)
        assert code == 0 and out.strip().splitlines()[-1] == "max_rel_err<1e-5 PASS"

    def test_gradcheck_failure_exit(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--seed", 0, "--tol", 1e-30)
        assert code == 1 and "FAIL" in out and "worst seed=0" in out

    def test_equivariance(self, capsys):
        code, out, _ = run(capsys, "equivariance", "--shift", 64)
        assert code == 0 and out.strip().endswith("< 1e-5 PASS") and "interior max |d|=" in out

    def test_equivariance_bad_shift(self, capsys):
        code, _, _ = run(capsys, "equivariance", "--shift", 10)
        assert code == 2


class TestTrain:
    def test_deterministic_hash_and_artifacts(self, capsys, tmp_path):
        write_kv(tmp_path / "stage1.cfg", TRAIN_PLAN)
        outs = []
        for i in range(2):
            code, out, _ = run(capsys, "train", "--plan", tmp_path / "stage1.cfg", "--det",
                               "--out", tmp_path / f"c{i}", "--log", tmp_path / "m.csv",
                               "--run-config", tmp_path / "run.cfg", "--plot", tmp_path / "loss.png")
            assert code == 0
            outs.append(out)
        assert outs[0].splitlines()[-1] == outs[1].splitlines()[-1]
        assert outs[0].splitlines()[-1].startswith("checkpoint sha256=")
        assert (tmp_path / "c0").read_bytes() == (tmp_path / "c1").read_bytes()
        recs = read_metrics(tmp_path / "m.csv")
        assert [r.step for r in recs] == [1, 2, 3] and {r.stage for r in recs} == {1}
        assert "stage1.peak_lr=0.001" in (tmp_path / "run.cfg").read_text()
        assert (tmp_path / "loss.png").exists()

    def test_unknown_data(self, capsys, tmp_path):
        write_kv(tmp_path / "p.cfg", TRAIN_PLAN)
        code, _, err = run(capsys, "train", "--plan", tmp_path / "p.cfg", "--data", "laion")
        assert code == 2 and "synth" in err


class TestUsage:
    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["analyze", "--nope"])
        assert exc.value.code == 2

    def test_inspect(self, capsys, tmp_path):
        checkpoint.save({"w": np.zeros((2, 3), dtype=np.float32)}, tmp_path / "c")
        code, out, _ = run(capsys, "inspect", "--ckpt", tmp_path / "c")
        assert code == 0 and "w\tfloat32\t2x3" in out and "params=6" in out
        code, out, _ = run(capsys, "inspect", "--config", "convnext-l")
        assert "params=196230336" in out and "downsample_factor=32" in out
