import json
from pathlib import Path

import pytest

from msafeb.cli import main, parse_kv_file
from msafeb.data import read_ppm

from oracles import t_two_sided_p_quad


TINY_MODEL_CONFIG = """
image_size=16x16
backbone.stage_channels=4,8
backbone.out_channels=8
msafeb.input_channels=8
msafeb.branch_filters=8
msafeb.branch_dilation=1
msafeb.branch_groups=8
msafeb.aspp_branch_channels=2
msafeb.fusion_channels=8
msafeb.attention.reduction_ratio=2
msafeb.attention.spatial_kernel=3
max_epochs=2
batch_size=8
val_fraction=0.25
augment=false
"""


def synth_args(out, classes=2, per_class=8, size="16x16", seed=5):
    return ["synth", "--classes", str(classes), "--per-class", str(per_class),
            "--size", size, "--seed", str(seed), "--out", str(out)]


@pytest.fixture()
def tiny_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert main(synth_args(out)) == 0
    return out


def _train_args(data_dir, out, extra=()):
    cfg = out.parent / "cfg.kv"
    cfg.write_text(TINY_MODEL_CONFIG)
    return ["train", "--data", str(data_dir), "--ratio", "0.5", "--splits", "1",
            "--seed", "3", "--out", str(out), "--config", str(cfg),
            *extra]


class TestSynth:
    def test_layout_and_manifest(self, tmp_path):
        out = tmp_path / "ds"
        assert main(synth_args(out, classes=3, per_class=4)) == 0
        dirs = sorted(d.name for d in out.iterdir() if d.is_dir())
        assert dirs == ["class_00", "class_01", "class_02"]
        assert len(list((out / "class_01").glob("*.ppm"))) == 4
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert len(manifest["patch_boxes"]) == 12

    def test_rerun_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(synth_args(a)) == 0
        assert main(synth_args(b)) == 0
        for pa in sorted(a.rglob("*.ppm")):
            pb = b / pa.relative_to(a)
            assert pa.read_bytes() == pb.read_bytes()

    def test_single_class_usage_error(self, tmp_path):
        assert main(synth_args(tmp_path / "x", classes=1)) == 1

    def test_refuses_nonempty_without_force(self, tmp_path):
        out = tmp_path / "ds"
        assert main(synth_args(out)) == 0
        assert main(synth_args(out)) == 1
        assert main(synth_args(out) + ["--force"]) == 0


class TestTrain:
    def test_writes_reports_and_checkpoints(self, tiny_dataset_dir, tmp_path):
        out = tmp_path / "run"
        assert main(_train_args(tiny_dataset_dir, out)) == 0
        metrics = parse_kv_file(out / "metrics.kv")
        assert set(metrics) == {"mean_oa", "sd_oa", "split0_oa"}
        assert float(metrics["sd_oa"]) == 0.0  # single split
        assert (out / "split0.ckpt").exists()
        assert (out / "split0.model.kv").exists()
        assert (out / "report.txt").exists()
        assert (out / "manifest.json").exists()

    def test_idempotent_metrics(self, tiny_dataset_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(_train_args(tiny_dataset_dir, a)) == 0
        assert main(_train_args(tiny_dataset_dir, b)) == 0
        assert (a / "metrics.kv").read_text() == (b / "metrics.kv").read_text()
        assert (a / "split0.ckpt").read_bytes() == (b / "split0.ckpt").read_bytes()

    def test_augment_flags_from_config(self, tiny_dataset_dir, tmp_path):
        out = tmp_path / "aug"
        cfg = tmp_path / "cfg.kv"
        cfg.write_text(TINY_MODEL_CONFIG.replace(
            "augment=false", "augment=true\naugment.hflip=false"))
        args = ["train", "--data", str(tiny_dataset_dir), "--ratio", "0.5",
                "--splits", "1", "--seed", "3", "--out", str(out),
                "--config", str(cfg)]
        assert main(args) == 0
        assert (out / "metrics.kv").exists()

    def test_ablation_pair(self, tiny_dataset_dir, tmp_path):
        w = tmp_path / "with"
        wo = tmp_path / "without"
        assert main(_train_args(tiny_dataset_dir, w,
                                ("--with-msafeb", "true"))) == 0
        assert main(_train_args(tiny_dataset_dir, wo,
                                ("--with-msafeb", "false"))) == 0
        mw = parse_kv_file(w / "metrics.kv")
        mwo = parse_kv_file(wo / "metrics.kv")
        assert 0.0 <= float(mw["mean_oa"]) <= 1.0
        assert 0.0 <= float(mwo["mean_oa"]) <= 1.0

    def test_bad_ratio_usage_error(self, tiny_dataset_dir, tmp_path):
        args = _train_args(tiny_dataset_dir, tmp_path / "r")
        args[args.index("--ratio") + 1] = "1.5"
        assert main(args) == 1

    def test_unreadable_data_dir(self, tmp_path):
        assert main(_train_args(tmp_path / "missing", tmp_path / "out")) == 2


class TestParams:
    def test_desk_default_matches(self, capsys):
        assert main(["params"]) == 0
        lines = capsys.readouterr().out.splitlines()
        kv = dict(l.split("=", 1) for l in lines if "=" in l and not l.startswith("#"))
        assert kv["match"] == "true"
        assert int(kv["total"]) == int(kv["enumerated"])

    def test_full_geometry_prints_reference_note(self, capsys):
        assert main(["params", "--geometry", "full"]) == 0
        out = capsys.readouterr().out
        assert "16.8M" in out
        assert "34.9M" in out

    def test_malformed_config_reports_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.kv"
        cfg.write_text("msafeb.branch_filters=32\nnot a kv line\n")
        assert main(["params", "--config", str(cfg)]) == 2
        assert ":2:" in capsys.readouterr().err


class TestGradcam:
    @pytest.fixture()
    def trained_run(self, tiny_dataset_dir, tmp_path_factory):
        out = tmp_path_factory.mktemp("run")
        assert main(_train_args(tiny_dataset_dir, out)) == 0
        image = next(iter(sorted((tiny_dataset_dir / "class_00").glob("*.ppm"))))
        return out, image

    def test_renders_overlay_and_map(self, trained_run, tmp_path):
        out_dir, image = trained_run
        overlay = tmp_path / "cam.ppm"
        code = main(["gradcam", "--checkpoint", str(out_dir / "split0.ckpt"),
                     "--image", str(image), "--class", "0",
                     "--out", str(overlay)])
        assert code == 0
        rendered = read_ppm(overlay)
        assert rendered.shape == read_ppm(image).shape
        from msafeb.serialize import read_features
        raw = read_features(Path(str(overlay) + ".map"))
        assert raw.dims[:2] == (1, 1)
        assert 0.0 <= raw.data.min() and raw.data.max() <= 1.0

    def test_class_out_of_range(self, trained_run, tmp_path):
        out_dir, image = trained_run
        code = main(["gradcam", "--checkpoint", str(out_dir / "split0.ckpt"),
                     "--image", str(image), "--class", "99",
                     "--out", str(tmp_path / "x.ppm")])
        assert code == 1

    def test_unknown_layer_lists_valid_names(self, trained_run, tmp_path, capsys):
        out_dir, image = trained_run
        code = main(["gradcam", "--checkpoint", str(out_dir / "split0.ckpt"),
                     "--image", str(image), "--class", "0", "--layer", "bogus",
                     "--out", str(tmp_path / "x.ppm")])
        assert code == 1
        err = capsys.readouterr().err
        assert "attended" in err and "backbone" in err


class TestTtest:
    def test_identical_files(self, tmp_path, capsys):
        f = tmp_path / "a.txt"
        f.write_text("0.90\n0.91\n0.92\n")
        assert main(["ttest", "--a", str(f), "--b", str(f)]) == 0
        out = dict(l.split("=") for l in capsys.readouterr().out.splitlines())
        assert float(out["p"]) == 1.0
        assert float(out["t"]) == 0.0

    def test_worked_case_matches_oracle(self, tmp_path, capsys):
        fa, fb = tmp_path / "a.txt", tmp_path / "b.txt"
        fa.write_text("\n".join(str(v) for v in (1, 2, 3, 4, 5)))
        fb.write_text("\n".join(str(v) for v in (2, 3, 4, 5, 6)))
        assert main(["ttest", "--a", str(fa), "--b", str(fb)]) == 0
        out = dict(l.split("=") for l in capsys.readouterr().out.splitlines())
        assert float(out["df"]) == pytest.approx(8.0, abs=1e-9)
        oracle = t_two_sided_p_quad(abs(float(out["t"])), float(out["df"]))
        assert float(out["p"]) == pytest.approx(oracle, abs=1e-3)

    def test_single_value_file(self, tmp_path, capsys):
        fa, fb = tmp_path / "a.txt", tmp_path / "b.txt"
        fa.write_text("0.5\n")
        fb.write_text("0.5\n0.6\n")
        assert main(["ttest", "--a", str(fa), "--b", str(fb)]) == 2
        assert ">= 2 observations" in capsys.readouterr().err

    def test_non_numeric_line(self, tmp_path, capsys):
        fa, fb = tmp_path / "a.txt", tmp_path / "b.txt"
        fa.write_text("0.5\nhello\n")
        fb.write_text("0.5\n0.6\n")
        assert main(["ttest", "--a", str(fa), "--b", str(fb)]) == 2
        assert ":2:" in capsys.readouterr().err


class TestManifests:
    def test_synth_rerun_from_manifest(self, tmp_path):
        a = tmp_path / "a"
        assert main(synth_args(a, classes=3, per_class=4)) == 0
        b = tmp_path / "b"
        assert main(["synth", "--from-manifest", str(a / "manifest.json"),
                     "--out", str(b)]) == 0
        for pa in sorted(a.rglob("*.ppm")):
            assert pa.read_bytes() == (b / pa.relative_to(a)).read_bytes()

    def test_train_rerun_from_manifest(self, tiny_dataset_dir, tmp_path):
        a = tmp_path / "a"
        assert main(_train_args(tiny_dataset_dir, a)) == 0
        b = tmp_path / "b"
        assert main(["train", "--from-manifest", str(a / "manifest.json"),
                     "--out", str(b)]) == 0
        assert (a / "metrics.kv").read_text() == (b / "metrics.kv").read_text()
        assert (a / "split0.ckpt").read_bytes() == (b / "split0.ckpt").read_bytes()

    def test_params_manifest_records_results(self, tmp_path):
        out = tmp_path / "params.json"
        assert main(["params", "--manifest", str(out)]) == 0
        blob = json.loads(out.read_text())
        assert blob["results"]["total"] == blob["results"]["enumerated"]

    def test_ttest_manifest_records_results(self, tmp_path):
        f = tmp_path / "obs.txt"
        f.write_text("0.9\n0.91\n0.92\n")
        out = tmp_path / "t.json"
        assert main(["ttest", "--a", str(f), "--b", str(f),
                     "--manifest", str(out)]) == 0
        assert json.loads(out.read_text())["results"]["p"] == 1.0


class TestExitCodes:
    def test_numerical_failure_maps_to_3(self, tiny_dataset_dir, tmp_path,
                                         monkeypatch):
        from msafeb.tensor import NumericalError
        import msafeb.cli as cli

        def explode(*args, **kwargs):
            raise NumericalError("non-finite training loss at epoch 1")

        monkeypatch.setattr(cli, "run_protocol", explode)
        assert main(_train_args(tiny_dataset_dir, tmp_path / "x")) == 3


class TestSeedFallback:
    def test_env_seed_used(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MSAFEB_SEED", "5")
        a = tmp_path / "env"
        args = synth_args(a)
        del args[args.index("--seed"):args.index("--seed") + 2]
        assert main(args) == 0
        b = tmp_path / "flag"
        assert main(synth_args(b, seed=5)) == 0
        for pa in sorted(a.rglob("*.ppm")):
            assert pa.read_bytes() == (b / pa.relative_to(a)).read_bytes()
