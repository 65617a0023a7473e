"""Strict configuration and the batch command-line interface."""

import numpy as np
import pytest
import yaml

from msm3d.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main, parse_overrides
from msm3d.config import DEFAULTS, load_config
from msm3d.errors import ConfigError
from msm3d.pipeline import read_manifest, select_split, split_assignment, write_index
from msm3d.scene import FeatureDump, read_feature_dump, read_ply, write_feature_dump
from msm3d.train import load_state, pretrain

TINY = {
    "model": {"levels": 3, "enc_channels": [4, 6, 8], "dec_channels": [4, 6, 8], "enc_resnet": [1, 1, 1],
              "dec_resnet": [1, 1, 1], "enc_attention": [0, 1, 1], "dec_attention": [0, 1, 1], "window": 8,
              "heads": [0, 2, 2], "ff_ratio": 2, "curves": ["Z", "H"]},
    "crop": {"max_points": 500},
    "train": {"epochs": 2, "batch_size": 2},
    "probe": {"epochs": 3, "batch_points": 2048, "offset_epochs": 2, "offset_hidden": 8},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert main(["gen-data", "--out", str(root / "data"), "--scenes", "5", "--seed", "3"]) == EXIT_OK
    assert main(["pretrain", "--config", str(cfg), "--data", str(root / "data"),
                 "--out", str(root / "model.ckpt")]) == EXIT_OK
    return root


def run(*argv):
    return main([str(a) for a in argv])


class TestConfig:
    def test_defaults_cover_namespaces(self):
        assert set(DEFAULTS) == {"aug", "crop", "mask", "model", "train", "probe"}
        cfg = load_config()
        assert cfg.train().mask_ratio == 0.4 and cfg.model().window == 64

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("train:\n  epochs: 5\nmask.ratio: 0.3\n")
        cfg = load_config(path, {"train.epochs": 7})
        assert cfg.train().epochs == 7 and cfg.train().mask_ratio == 0.3

    @pytest.mark.parametrize("key", ["train.epoch", "optim.lr", "model.voxelsize", "train"])
    def test_unknown_key_named(self, key):
        with pytest.raises(ConfigError, match=key.split(".")[-1]):
            load_config(None, {key: 1})

    def test_misspelled_key_in_file(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("probe:\n  metirc: L1\n")
        with pytest.raises(ConfigError, match="probe.metirc"):
            load_config(path)

    @pytest.mark.parametrize("key,value", [("train.epochs", "many"), ("train.no_mask", 1),
                                           ("model.enc_channels", 5), ("probe.metric", 2)])
    def test_type_checked(self, key, value):
        with pytest.raises(ConfigError):
            load_config(None, {key: value})

    def test_semantic_checks(self):
        with pytest.raises(ConfigError):
            load_config(None, {"probe.metric": "L3"}).probe()
        with pytest.raises(ConfigError):
            load_config(None, {"train.warmup_epochs": 40}).train()
        with pytest.raises(ConfigError):
            load_config(None, {"aug.scale_min": 0.5}).views()

    def test_exponent_numbers(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("train:\n  lr: 1e-3\n")
        assert load_config(path).train().lr == 0.001
        assert load_config(None, parse_overrides(["--train.weight_decay", "5e-2"])).train().weight_decay == 0.05

    def test_override_parsing(self):
        assert parse_overrides(["--train.epochs", "3", "--train.no_mask", "--mask.ratio=0.5"]) == {
            "train.epochs": 3, "train.no_mask": True, "mask.ratio": 0.5}
        with pytest.raises(ConfigError):
            parse_overrides(["--verbose"])


class TestGenData:
    def test_empty_dataset(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "d", "--scenes", 0) == EXIT_OK
        assert read_manifest(tmp_path / "d") == []

    def test_default_size_manifest(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "d", "--scenes", 64, "--jobs", 4) == EXIT_OK
        entries = read_manifest(tmp_path / "d")
        assert len(entries) == 64
        assert [e.split for e in entries].count("train") == 51

    def test_same_seed_same_bytes_any_jobs(self, tmp_path):
        run("gen-data", "--out", tmp_path / "a", "--scenes", 4, "--seed", 9)
        run("gen-data", "--out", tmp_path / "b", "--scenes", 4, "--seed", 9, "--jobs", 3)
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()

    def test_split_fraction(self):
        assert split_assignment(10, 0).count("train") == 8

    def test_negative_count(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--scenes", -1) == EXIT_CONFIG


class TestPretrain:
    def test_checkpoint_and_metrics(self, work):
        state, ck = load_state(work / "model.ckpt")
        assert state.epoch == 2 and ck.config.levels == 3
        lines = (work / "model.metrics.tsv").read_text().splitlines()
        assert lines[-1].startswith("2\t")

    def test_flag_recorded_in_metrics_header(self, work, tmp_path):
        assert run("pretrain", "--config", work / "tiny.yaml", "--data", work / "data", "--out",
                   tmp_path / "nm.ckpt", "--train.no_mask", "--train.epochs", 2) == EXIT_OK
        assert "# train.no_mask=True" in (tmp_path / "nm.metrics.tsv").read_text().splitlines()

    def test_resume_reproduces_uninterrupted(self, work, tmp_path):
        cfg = load_config(work / "tiny.yaml")
        scenes = [read_ply(e.path) for e in select_split(read_manifest(work / "data"), "train")]
        pretrain(scenes, cfg.model(), cfg.train(), cfg.views(), checkpoint=tmp_path / "half.ckpt", stop_after=1)
        assert run("pretrain", "--config", work / "tiny.yaml", "--data", work / "data", "--out",
                   tmp_path / "resumed.ckpt", "--resume", tmp_path / "half.ckpt") == EXIT_OK
        a, _ = load_state(work / "model.ckpt")
        b, _ = load_state(tmp_path / "resumed.ckpt")
        assert a.log == b.log
        for k, v in a.student.items():
            assert v.tobytes() == b.student[k].tobytes()

    def test_unknown_key_exit_code(self, work, tmp_path, capsys):
        code = run("pretrain", "--data", work / "data", "--out", tmp_path / "x.ckpt", "--train.epohcs", 1)
        assert code == EXIT_CONFIG
        assert "train.epohcs" in capsys.readouterr().err

    def test_missing_data_exit_code(self, tmp_path):
        assert run("pretrain", "--data", tmp_path / "none", "--out", tmp_path / "x.ckpt") == EXIT_DATA

    def test_divergence_exit_code(self, work, tmp_path):
        with np.errstate(over="ignore", invalid="ignore"):
            code = run("pretrain", "--config", work / "tiny.yaml", "--data", work / "data", "--out",
                       tmp_path / "x.ckpt", "--train.lr", "1e300", "--train.epochs", 2)
        assert code == EXIT_NUMERIC


@pytest.fixture(scope="module")
def dumps(work):
    for split in ("train", "val"):
        assert run("features", "--config", work / "tiny.yaml", "--ckpt", work / "model.ckpt", "--data",
                   work / "data", "--split", split, "--out", work / f"f_{split}") == EXIT_OK
    return work


class TestFeaturesAndProbes:
    def test_dump_rows_and_widths(self, dumps, tmp_path):
        run("features", "--ckpt", dumps / "model.ckpt", "--data", dumps / "data", "--levels", "0",
            "--split", "val", "--out", tmp_path)
        for p in sorted(tmp_path.glob("*.msmf")):
            one = read_feature_dump(p)
            full = read_feature_dump(dumps / "f_val" / p.name)
            assert one.features.shape[1] == 4 and full.features.shape[1] == 18
            np.testing.assert_array_equal(one.features, full.features[:, :4])
            ply = [e for e in read_manifest(dumps / "data") if e.scene_id == p.stem.split(".")[0]][0]
            assert one.num_points == len(read_ply(ply.path))

    def test_missing_checkpoint(self, work, tmp_path):
        assert run("features", "--ckpt", tmp_path / "no.ckpt", "--data", work / "data",
                   "--out", tmp_path) == EXIT_DATA

    def test_bad_levels(self, work, tmp_path):
        assert run("features", "--ckpt", work / "model.ckpt", "--data", work / "data", "--levels", "5",
                   "--out", tmp_path) == EXIT_CONFIG

    def test_nn_self_match_is_perfect(self, dumps, tmp_path):
        out = tmp_path / "r.tsv"
        assert run("probe", "--task", "nn", "--train", dumps / "f_train", "--val", dumps / "f_train",
                   "--out", out) == EXIT_OK
        assert out.read_text().splitlines()[1] == "nn\tval\tmIoU[L2]\t1.000000"

    def test_limited_points(self, dumps, tmp_path):
        out = tmp_path / "r.tsv"
        assert run("probe", "--task", "linear", "--train", dumps / "f_train", "--val", dumps / "f_val",
                   "--limited", "points:20", "--out", out, "--config", dumps / "tiny.yaml") == EXIT_OK
        rows = [ln.split("\t") for ln in out.read_text().splitlines()]
        frac = [float(r[3]) for r in rows if r[2] == "labeled_fraction"][0]
        n = [len(read_ply(e.path)) for e in select_split(read_manifest(dumps / "data"), "train")]
        assert frac == pytest.approx(20 * len(n) / sum(n), abs=1e-6)

    def test_linear_on_separable_dump(self, tmp_path):
        rng = np.random.default_rng(0)
        for split in ("train", "val"):
            d = tmp_path / split
            d.mkdir()
            x = rng.normal(size=(300, 4))
            x = x[np.abs(x[:, 1]) > 0.2]
            y = (x[:, 1] > 0).astype(np.int64)
            write_feature_dump(FeatureDump(x, [4], y), d / "s.msmf")
            write_index(d, [("s", "s.msmf", "")])
        out = tmp_path / "r.tsv"
        assert run("probe", "--task", "linear", "--train", tmp_path / "train", "--val", tmp_path / "val",
                   "--out", out, "--probe.epochs", 60, "--probe.batch_points", 64) == EXIT_OK
        assert float(out.read_text().splitlines()[1].split("\t")[3]) >= 0.99

    def test_instance_probe_runs(self, dumps, tmp_path):
        out = tmp_path / "r.tsv"
        assert run("probe", "--task", "instance", "--train", dumps / "f_train", "--val", dumps / "f_val",
                   "--config", dumps / "tiny.yaml", "--out", out) == EXIT_OK
        value = float(out.read_text().splitlines()[1].split("\t")[3])
        assert 0.0 <= value <= 1.0

    @pytest.mark.parametrize("task", ["linear", "nn", "instance"])
    def test_reports_identical_across_jobs(self, dumps, tmp_path, task):
        outs = []
        for jobs in (1, 3):
            out = tmp_path / f"{jobs}.tsv"
            run("probe", "--task", task, "--train", dumps / "f_train", "--val", dumps / "f_val",
                "--config", dumps / "tiny.yaml", "--jobs", jobs, "--out", out)
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestVizPCA:
    def test_colors_and_repeatability(self, work, tmp_path):
        scene = read_manifest(work / "data")[0].path
        for name in ("a.ply", "b.ply"):
            assert run("viz-pca", "--ckpt", work / "model.ckpt", "--scene", scene,
                       "--out", tmp_path / name) == EXIT_OK
        out = read_ply(tmp_path / "a.ply")
        assert len(out) == len(read_ply(scene))
        assert out.colors.min() >= 0.0 and out.colors.max() <= 1.0
        assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


class TestAblate:
    def rows(self, path):
        return [ln.split("\t") for ln in path.read_text().splitlines()[1:]]

    def test_mask_ratio_sweep(self, work, tmp_path):
        out = tmp_path / "r.tsv"
        assert run("ablate", "--which", "mask-ratio", "--data", work / "data", "--config", work / "tiny.yaml",
                   "--train.epochs", 2, "--out", out) == EXIT_OK
        assert [r[2] for r in self.rows(out)] == [f"mIoU[ratio={r}]" for r in
                                                  ("0.2", "0.3", "0.4", "0.5", "0.6", "0.7")]

    def test_supervision_rows(self, work, tmp_path):
        out = tmp_path / "r.tsv"
        assert run("ablate", "--which", "supervision", "--data", work / "data", "--config",
                   work / "tiny.yaml", "--out", out) == EXIT_OK
        assert [r[2] for r in self.rows(out)] == ["mIoU[last]", "mIoU[all]"]

    def test_layers_rows(self, work, tmp_path):
        out = tmp_path / "r.tsv"
        assert run("ablate", "--which", "layers", "--data", work / "data", "--config", work / "tiny.yaml",
                   "--ckpt", work / "model.ckpt", "--out", out) == EXIT_OK
        assert [r[2] for r in self.rows(out)] == ["mIoU[all]", "mIoU[alone=0]", "mIoU[remove=0]",
                                                  "mIoU[alone=1]", "mIoU[remove=1]", "mIoU[alone=2]",
                                                  "mIoU[remove=2]"]

    def test_nn_metric_identical_across_jobs(self, work, tmp_path):
        outs = []
        for jobs in (1, 2):
            out = tmp_path / f"{jobs}.tsv"
            assert run("ablate", "--which", "nn-metric", "--data", work / "data", "--config",
                       work / "tiny.yaml", "--ckpt", work / "model.ckpt", "--jobs", jobs, "--out", out) == EXIT_OK
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        assert [r[2] for r in self.rows(tmp_path / "1.tsv")] == ["mIoU[L1]", "mIoU[L2]", "mIoU[cosine]"]
