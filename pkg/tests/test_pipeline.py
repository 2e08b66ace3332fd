import math

import numpy as np
import pytest

from gsdyn import cli
from gsdyn.checkpoint import load_checkpoint
from gsdyn.config import ConfigError, TrainConfig
from gsdyn.data import load_dataset, synth
from gsdyn.engine import Tensor, precision
from gsdyn.field import FieldConfig
from gsdyn.hashgrid import GridConfig
from gsdyn.imageio import read_image, write_image
from gsdyn.losses import LossWeights, psnr
from gsdyn.render import render_gaussians
from gsdyn.split import SplitConfig
from gsdyn.train import CHECKPOINT_NAME, build_model, evaluate, load_model, render_sequence, train

SMALL = """
synth_gaussians = 5
synth_frames = 6
synth_width = 24
synth_height = 24
synth_cameras = 2
synth_test_every = 3
iterations = 4
probe_interval = 2
log_interval = 1
dyn_dim = 4
hash_levels = 2
hash_features = 2
hash_log2_table = 8
hash_n_min = 4
hash_n_max = 8
hash_n_min_t = 2
hash_n_max_t = 4
lap_k = 4
lap_dim = 6
gate_hidden = 8
trunk_width = 8
trunk_depth = 2
ncc_window = 5
ncc_stride = 4
densify_from = 2
densify_interval = 2
"""


def small_cfg(**kw):
    return TrainConfig.from_text(SMALL).replace(**kw)


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    return synth(small_cfg(), tmp_path_factory.mktemp("synth") / "ds")


class TestConfig:
    def test_defaults_come_from_modules(self):
        c, g, f, w, s = TrainConfig(), GridConfig(), FieldConfig(), LossWeights(), SplitConfig()
        assert c.grid_config() == g
        assert c.field_config() == f
        assert c.loss_weights() == w
        assert c.split_config() == s

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key 'lr_everything'"):
            TrainConfig.from_text("seed = 1\nlr_everything = 3\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="bad value for iterations"):
            TrainConfig.from_text("iterations = many")

    def test_text_round_trip(self):
        c = small_cfg(seed=7, lr_hash=0.0123, densify=False)
        assert TrainConfig.from_text(c.to_text()) == c

    def test_comments_and_blank_lines(self):
        assert TrainConfig.from_text("# header\n\nseed = 3  # trailing\n").seed == 3

    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(precision=16)
        with pytest.raises(ConfigError):
            TrainConfig(synth_gaussians=3)


class TestSynth:
    def test_layout(self, small_data):
        assert len(small_data.frames) == 12
        assert len(small_data.split("test")) == 4
        assert small_data.image(0).shape == (24, 24, 3)
        assert small_data.points.shape == (20, 3)

    def test_deterministic(self, small_data, tmp_path):
        again = synth(small_cfg(), tmp_path / "again")
        for i in range(len(small_data.frames)):
            assert np.array_equal(again.image(i), small_data.image(i))

    def test_refuses_non_empty_dir(self, small_data):
        with pytest.raises(ValueError, match="not empty"):
            synth(small_cfg(), small_data.root)

    def test_single_static_blob(self, tmp_path):
        ds = synth(small_cfg(synth_gaussians=1, synth_static=True), tmp_path / "s")
        for cam in ds.cameras:
            imgs = [ds.image(i) for i, f in enumerate(ds.frames) if f.camera == cam]
            assert all(np.array_equal(imgs[0], im) for im in imgs[1:])

    def test_single_blob_follows_sine(self, tmp_path):
        synth(small_cfg(synth_gaussians=1, synth_freqs="1"), tmp_path / "s")
        rows = [ln.split("\t") for ln in (tmp_path / "s" / "trajectories.tsv").read_text().splitlines()[1:]]
        for r in rows:
            t, x = float(r[1]), float(r[3])
            assert x == pytest.approx(0.3 * math.sin(2 * math.pi * t), abs=1e-12)
            assert float(r[4]) == float(r[5]) == 0.0


class TestTrain:
    def test_zero_iterations_saves_initial_model(self, small_data, tmp_path):
        cfg = small_cfg(iterations=0)
        train(cfg, small_data, tmp_path, log=None)
        init = build_model(cfg, small_data, np.random.default_rng(cfg.seed))
        ck = load_checkpoint(tmp_path / CHECKPOINT_NAME)
        for name, arr in init.scene.arrays().items():
            assert np.array_equal(ck.arrays[f"scene.{name}"], arr)
        for name, arr in init.field_arrays().items():
            assert np.array_equal(ck.arrays[name], arr)

    def test_deterministic_logs(self, small_data, tmp_path):
        for run in ("a", "b"):
            train(small_cfg(), small_data, tmp_path / run, log=None)
        for name in ("metrics.tsv", "densify.tsv", CHECKPOINT_NAME):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_metrics_columns(self, small_data, tmp_path):
        train(small_cfg(), small_data, tmp_path, log=None)
        lines = (tmp_path / "metrics.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["step", "orig", "ncc", "lap", "dy", "total", "n_gaussians", "probe_psnr"]
        assert [ln.split("\t")[0] for ln in lines[1:]] == ["1", "2", "3", "4"]
        assert lines[2].split("\t")[-1] != "" and lines[1].split("\t")[-1] == ""

    def test_resume_from_checkpoint(self, small_data, tmp_path):
        train(small_cfg(), small_data, tmp_path, log=None)
        model = load_model(tmp_path / CHECKPOINT_NAME, small_cfg())
        assert model.cfg == small_cfg()
        assert len(model.scene) == int(load_checkpoint(tmp_path / CHECKPOINT_NAME).counts["N"])

    def test_loss_decreases_on_single_blob(self, tmp_path):
        """Training on one moving blob improves the probe frame."""
        cfg = small_cfg(synth_gaussians=1, iterations=60, probe_interval=20, densify=False, precision=64)
        ds = synth(cfg, tmp_path / "ds")
        train(cfg, ds, tmp_path / "run", log=None)
        rows = [ln.split("\t") for ln in (tmp_path / "run" / "metrics.tsv").read_text().splitlines()[1:]]
        probes = [float(r[-1]) for r in rows if r[-1]]
        assert len(probes) == 3
        assert probes[-1] > probes[0]
        assert float(rows[-1][5]) < float(rows[0][5])


class TestEvalRender:
    def test_rows_match_metric(self, small_data, tmp_path):
        model = build_model(small_cfg(), small_data, np.random.default_rng(0))
        res = evaluate(model, small_data, out=tmp_path / "eval.tsv")
        for (path, cam, t, p, _), i in zip(res["rows"], small_data.split("test")):
            with precision(32):
                img = model.render(t, small_data.camera(i)).image.data
            assert p == pytest.approx(psnr(img, small_data.image(i)), abs=1e-9)
        last = (tmp_path / "eval.tsv").read_text().splitlines()[-1].split("\t")
        assert last[0] == "mean" and float(last[3]) == pytest.approx(res["psnr"], abs=1e-6)

    def test_own_renders_hit_the_cap(self, small_data, tmp_path):
        model = build_model(small_cfg(precision=64), small_data, np.random.default_rng(0))
        ds = synth(small_cfg(), tmp_path / "ds")
        with precision(64):
            for i, f in enumerate(ds.frames):
                write_image(ds.root / f.path[: -len(".pfm")], model.render(f.time, ds.camera(i)).image.data)
        res = evaluate(model, load_dataset(ds.root))
        assert res["psnr"] == 99.0
        assert res["ssim"] == pytest.approx(1.0, abs=1e-6)

    def test_empty_times_write_nothing(self, small_data, tmp_path):
        model = build_model(small_cfg(), small_data, np.random.default_rng(0))
        assert render_sequence(model, small_data.cameras, [], tmp_path) == []

    def test_fresh_model_renders_canonical_scene(self, small_data, tmp_path):
        model = build_model(small_cfg(precision=64), small_data, np.random.default_rng(0))
        render_sequence(model, {0: small_data.cameras[0]}, [0.0], tmp_path)
        s = model.scene
        with precision(64):
            want = render_gaussians(
                Tensor(s.mu.data), Tensor(s.quat.data), Tensor(s.log_scale.data),
                Tensor(s.opacity_logit.data), Tensor(s.color.data), small_data.cameras[0],
            ).image.data
        got = read_image(tmp_path / "c0_t0.000000.pfm")
        np.testing.assert_allclose(got, want, atol=1e-6)


class TestCLI:
    def write_cfg(self, tmp_path, extra=""):
        path = tmp_path / "small.cfg"
        path.write_text(SMALL + "iterations = 2\n" + extra)
        return str(path)

    def error_line(self, capsys):
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1
        return err[0].split("\t")

    def test_end_to_end(self, tmp_path, capsys):
        cfg = self.write_cfg(tmp_path)
        data, run = str(tmp_path / "ds"), str(tmp_path / "run")
        assert cli.main(["synth", "--config", cfg, "--out", data]) == 0
        assert cli.main(["train", "--config", cfg, "--data", data, "--out", run]) == 0
        assert "test PSNR" in capsys.readouterr().out
        assert cli.main(["eval", "--data", data, "--out", run]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "path\tcamera\ttime\tpsnr\tssim" and out[-1].startswith("mean")
        assert cli.main(["render", "--data", data, "--out", str(tmp_path / "frames"),
                         "--checkpoint", f"{run}/{CHECKPOINT_NAME}", "--times", "0,0.5", "--camera", "1"]) == 0
        assert sorted(p.name for p in (tmp_path / "frames").glob("*.pfm")) == ["c1_t0.000000.pfm", "c1_t0.500000.pfm"]

    def test_train_refuses_existing_run(self, tmp_path, capsys):
        cfg = self.write_cfg(tmp_path)
        data, run = str(tmp_path / "ds"), str(tmp_path / "run")
        cli.main(["synth", "--config", cfg, "--out", data])
        cli.main(["train", "--config", cfg, "--data", data, "--out", run])
        capsys.readouterr()
        assert cli.main(["train", "--config", cfg, "--data", data, "--out", run]) == 1
        assert self.error_line(capsys)[:3] == ["error", "train", "CLIError"]

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = self.write_cfg(tmp_path, "warp_speed = 9\n")
        assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "ds")]) == 1
        line = self.error_line(capsys)
        assert line[:3] == ["error", "synth", "ConfigError"]
        assert "warp_speed" in line[3]

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert cli.main(["eval", "--data", str(tmp_path), "--checkpoint", str(tmp_path / "none")]) == 1
        assert self.error_line(capsys)[:3] == ["error", "eval", "FileNotFoundError"]

    def test_time_out_of_range(self, tmp_path, capsys):
        cfg = self.write_cfg(tmp_path)
        data, run = str(tmp_path / "ds"), str(tmp_path / "run")
        cli.main(["synth", "--config", cfg, "--out", data])
        cli.main(["train", "--config", cfg, "--data", data, "--out", run])
        capsys.readouterr()
        assert cli.main(["render", "--data", data, "--out", run, "--times", "1.5"]) == 1
        line = self.error_line(capsys)
        assert line[:3] == ["error", "render", "CLIError"] and "1.5" in line[3]

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = self.write_cfg(tmp_path)
        cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "1"])
        cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "2"])
        assert (tmp_path / "a" / "gt_gaussians.tsv").read_text() != (tmp_path / "b" / "gt_gaussians.tsv").read_text()
