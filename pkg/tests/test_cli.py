"""End-to-end contract tests for the command-line verbs, run in-process."""

import numpy as np
import pytest
from PIL import Image

from runet.cli import EXIT_CONFIG, EXIT_OK, main
from runet.data import save_gray_png, synth_generate

TRAIN_CFG = """\
[model]
variant = dru
level = 4
iterations = 2
in_channels = 1

[train]
alpha = 0.4
epochs = 2
batch_size = 4
seed = 3

[data]
source = synth
synth_task = curves
synth_train = 8
synth_val = 4
height = 32
width = 32
synth_seed = 3

[output]
dir = {out}
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_train")
    cfg_path = root / "run.ini"
    out = root / "out"
    cfg_path.write_text(TRAIN_CFG.format(out=out))
    assert main(["train", "--config", str(cfg_path)]) == EXIT_OK
    return {"root": root, "cfg": cfg_path, "out": out}


class TestTrain:
    def test_outputs_exist(self, trained):
        assert (trained["out"] / "best.ckpt").exists()
        assert (trained["out"] / "metrics.csv").exists()
        assert (trained["out"] / "config.resolved.ini").exists()

    def test_resolved_snapshot_reparses_identically(self, trained):
        from runet.config import load_config, render_config

        snap = trained["out"] / "config.resolved.ini"
        cfg = load_config(str(snap))
        assert render_config(cfg) == snap.read_text()

    def test_seed_determinism(self, trained, tmp_path):
        cfg_a = tmp_path / "a.ini"
        cfg_a.write_text(TRAIN_CFG.format(out=tmp_path / "a_out"))
        cfg_b = tmp_path / "b.ini"
        cfg_b.write_text(TRAIN_CFG.format(out=tmp_path / "b_out"))
        assert main(["train", "--config", str(cfg_a), "--seed", "7"]) == EXIT_OK
        assert main(["train", "--config", str(cfg_b), "--seed", "7"]) == EXIT_OK
        a = (tmp_path / "a_out" / "metrics.csv").read_bytes()
        b = (tmp_path / "b_out" / "metrics.csv").read_bytes()
        assert a == b

    def test_invalid_alpha_exits_2_naming_field(self, tmp_path, capsys):
        bad = TRAIN_CFG.format(out=tmp_path / "o").replace("alpha = 0.4", "alpha = 0")
        cfg = tmp_path / "bad.ini"
        cfg.write_text(bad)
        assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG
        assert "train.alpha" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "unk.ini"
        cfg.write_text(
            TRAIN_CFG.format(out=tmp_path / "o").replace(
                "variant = dru", "variant = dru\nbogus = 1"
            )
        )
        assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG
        assert "bogus" in capsys.readouterr().err

    def test_missing_config_exits_2(self, capsys):
        assert main(["train", "--config", "/nonexistent.ini"]) == EXIT_CONFIG


class TestEval:
    def test_eval_twice_identical(self, trained, tmp_path, capsys):
        args = [
            "eval", "--checkpoint", str(trained["out"] / "best.ckpt"),
            "--config", str(trained["cfg"]), "--split", "val",
        ]
        assert main(args + ["--out", str(tmp_path / "e1")]) == EXIT_OK
        assert main(args + ["--out", str(tmp_path / "e2")]) == EXIT_OK
        a = (tmp_path / "e1" / "eval.csv").read_bytes()
        b = (tmp_path / "e2" / "eval.csv").read_bytes()
        assert a == b

    def test_iteration_override(self, trained, capsys):
        args = [
            "eval", "--checkpoint", str(trained["out"] / "best.ckpt"),
            "--config", str(trained["cfg"]), "--split", "val",
            "--iterations", "5",
        ]
        assert main(args) == EXIT_OK
        out = capsys.readouterr().out
        rows = [l for l in out.splitlines() if l and l[0].isdigit()]
        assert len(rows) == 5

    def test_random_init_near_chance(self, trained, capsys):
        args = [
            "eval", "--random-init", "--config", str(trained["cfg"]),
            "--split", "val", "--seed", "0",
        ]
        assert main(args) == EXIT_OK
        out = capsys.readouterr().out
        final_row = [l for l in out.splitlines() if l and l[0].isdigit()][-1]
        miou = float(final_row.split(",")[1])
        assert miou < 0.5  # untrained two-class mean stays below chance bound

    def test_checkpoint_required_without_random_init(self, trained, capsys):
        assert main(["eval", "--config", str(trained["cfg"])]) == EXIT_CONFIG


class TestPredict:
    def test_outputs_and_consistency(self, trained, tmp_path):
        sample = synth_generate(9, 1, 32, 32, "curves")[0]
        img_path = tmp_path / "input.png"
        save_gray_png(img_path, sample.image[0])
        out_dir = tmp_path / "pred"
        args = [
            "predict", "--checkpoint", str(trained["out"] / "best.ckpt"),
            "--image", str(img_path), "--out", str(out_dir),
        ]
        assert main(args) == EXIT_OK
        masks = sorted(out_dir.glob("mask_t*.png"))
        probs = sorted(out_dir.glob("prob_t*.pgm"))
        assert len(masks) == 2 and len(probs) == 2  # trained with N=2
        for mask_path, prob_path in zip(masks, probs):
            mask = np.asarray(Image.open(mask_path))
            prob = np.asarray(Image.open(prob_path))
            assert set(np.unique(mask)) <= {0, 255}
            # thresholding the stored probability map at 0.5 reproduces the mask
            npt_mask = (prob >= 128).astype(np.uint8) * 255
            assert np.array_equal(npt_mask, mask)

    def test_iterations_override(self, trained, tmp_path):
        sample = synth_generate(9, 1, 32, 32, "curves")[0]
        img_path = tmp_path / "input.png"
        save_gray_png(img_path, sample.image[0])
        out_dir = tmp_path / "pred5"
        args = [
            "predict", "--checkpoint", str(trained["out"] / "best.ckpt"),
            "--image", str(img_path), "--out", str(out_dir),
            "--iterations", "4",
        ]
        assert main(args) == EXIT_OK
        assert len(list(out_dir.glob("mask_t*.png"))) == 4

    def test_non_multiple_of_16_image_padded(self, trained, tmp_path):
        rng = np.random.default_rng(0)
        img_path = tmp_path / "odd.png"
        save_gray_png(img_path, rng.uniform(size=(30, 45)))
        out_dir = tmp_path / "pred_odd"
        args = [
            "predict", "--checkpoint", str(trained["out"] / "best.ckpt"),
            "--image", str(img_path), "--out", str(out_dir),
        ]
        assert main(args) == EXIT_OK
        mask = np.asarray(Image.open(out_dir / "mask_t1.png"))
        assert mask.shape == (30, 45)


class TestBench:
    def test_reports_param_count_and_fps(self, trained, capsys):
        args = [
            "bench", "--checkpoint", str(trained["out"] / "best.ckpt"),
            "--input-size", "32x32", "--repetitions", "5",
        ]
        assert main(args) == EXIT_OK
        out = capsys.readouterr().out
        from runet.blocks import count_parameters
        from runet.config import model_config_from_dict
        from runet.recurrent import build_model
        from runet.training import load_checkpoint

        ckpt = load_checkpoint(trained["out"] / "best.ckpt")
        model = build_model(model_config_from_dict(ckpt.model_config), np.random.default_rng(0))
        expected = count_parameters(model)[0]
        assert f"parameters: {expected}" in out
        fps_line = [l for l in out.splitlines() if l.startswith("fps:")][0]
        total_line = [l for l in out.splitlines() if "iterations):" in l][0]
        ms = float(total_line.split(":")[1].strip().split(" ")[0])
        assert float(fps_line.split(":")[1]) == pytest.approx(1000.0 / ms, rel=1e-3)

    def test_total_latency_scales_with_iterations(self, trained):
        # minimum over repetitions is robust to background load; the
        # recurrence dominates, so N=3 costs ~3x one iteration
        import time

        import numpy as np

        from runet.config import model_config_from_dict
        from runet.recurrent import build_model, recurrent_forward
        from runet.tensor import Tensor, no_grad
        from runet.training import load_checkpoint

        ckpt = load_checkpoint(trained["out"] / "best.ckpt")
        model = build_model(model_config_from_dict(ckpt.model_config),
                            np.random.default_rng(0))
        model.load_state_dict(ckpt.params)
        x = Tensor(np.random.default_rng(2).uniform(0, 1, (1, 1, 64, 64)).astype(np.float32))

        def best_of(n, reps=12):
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                with no_grad():
                    recurrent_forward(model, x, n)
                times.append(time.perf_counter() - t0)
            return min(times)

        best_of(3, reps=3)  # warmup
        ratio = best_of(3) / best_of(1)
        assert 2.4 <= ratio <= 3.6, f"latency ratio {ratio:.2f} outside 3x +/- 20%"

    def test_param_breakdown_flag(self, trained, capsys):
        args = [
            "bench", "--checkpoint", str(trained["out"] / "best.ckpt"),
            "--input-size", "32x32", "--repetitions", "1", "--params",
        ]
        assert main(args) == EXIT_OK
        assert "cell.f_z" in capsys.readouterr().out


class TestExitCodes:
    def test_corrupt_checkpoint_exits_1(self, trained, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        blob = bytearray((trained["out"] / "best.ckpt").read_bytes())
        blob[50] ^= 0xFF
        bad.write_bytes(bytes(blob))
        from runet.cli import EXIT_RUNTIME

        rc = main([
            "eval", "--checkpoint", str(bad),
            "--config", str(trained["cfg"]), "--split", "val",
        ])
        assert rc == EXIT_RUNTIME
        assert "CRC" in capsys.readouterr().err


class TestPatchedEval:
    def test_eval_with_patching_config(self, trained, tmp_path):
        # dataset of 48x48 images scored through the 32x32 patch pipeline
        from runet.cli import EXIT_OK

        ds = tmp_path / "ds"
        assert main([
            "synth", "--out", str(ds), "--task", "curves",
            "--train", "2", "--val", "2", "--size", "48x48", "--seed", "3",
        ]) == EXIT_OK
        cfg = tmp_path / "patched.ini"
        cfg.write_text(
            "[model]\nvariant = dru\nlevel = 4\niterations = 2\nin_channels = 1\n\n"
            "[train]\nepochs = 1\n\n"
            f"[data]\nsource = manifest\nmanifest = {ds / 'manifest.tsv'}\n"
            "patch_size = 32\npatch_stride = 32\n\n"
            f"[output]\ndir = {tmp_path / 'out'}\n"
        )
        assert main([
            "eval", "--random-init", "--config", str(cfg), "--split", "val",
            "--out", str(tmp_path / "ev"),
        ]) == EXIT_OK
        assert (tmp_path / "ev" / "eval.csv").exists()


class TestSynthCommand:
    def test_emits_loadable_dataset(self, tmp_path):
        out = tmp_path / "ds"
        args = [
            "synth", "--out", str(out), "--task", "blobs",
            "--train", "3", "--val", "1", "--size", "32x32", "--seed", "5",
        ]
        assert main(args) == EXIT_OK
        from runet.data import load_split, read_manifest

        manifest = read_manifest(out / "manifest.tsv")
        assert len(load_split(manifest, "train")) == 3
        assert len(load_split(manifest, "val")) == 1


class TestGradcheckCommand:
    def test_quick_run_passes(self, capsys):
        assert main(["gradcheck", "--seeds", "1", "--skip-model"]) == EXIT_OK
        assert "all gradient checks passed" in capsys.readouterr().out
