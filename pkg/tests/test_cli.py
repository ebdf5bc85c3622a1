import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from adassl import cli
from adassl.datagen import SplitDataset, make_rng, make_two_moons, write_dataset_csv
from adassl.divergence import read_density_csv, read_mmd_curve_csv
from adassl.errors import ConfigError
from adassl.model import load_params
from adassl.trainer import MetricsReport

FAST = ["--epochs", "2"]


def run(*args) -> int:
    return cli.main([str(a) for a in args])


def snapshot(directory: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


class TestTrain:
    def test_preset_outputs(self, tmp_path):
        out = tmp_path / "run"
        assert run("train", "--preset", "twomoon-ada", "--seed", 7, *FAST, "--out", out) == 0
        assert sorted(p.name for p in out.iterdir()) == ["metrics.csv", "params.ckpt",
                                                         "summary.json"]
        report = MetricsReport.from_csv((out / "metrics.csv").read_text())
        assert len(report) == 2
        summary = json.loads((out / "summary.json").read_text())
        assert summary["seed"] == 7 and summary["ablation"] == "full"
        params, spec = load_params(out / "params.ckpt")
        assert spec.feature_dim == summary["config"]["feature_layers"][-1]

    def test_json_format(self, tmp_path):
        assert run("train", *FAST, "--format", "json", "--out", tmp_path) == 0
        report = MetricsReport.from_json((tmp_path / "metrics.json").read_text())
        assert len(report) == 2

    def test_rerun_is_byte_identical(self, tmp_path):
        args = ("train", "--seed", 3, *FAST, "--out", tmp_path)
        assert run(*args) == 0
        first = snapshot(tmp_path)
        assert run(*args) == 0
        assert snapshot(tmp_path) == first

    def test_negative_gamma_names_field(self, tmp_path, capsys):
        assert run("train", "--gamma", -1, "--out", tmp_path) == 2
        assert "gamma" in capsys.readouterr().err
        assert not tmp_path.joinpath("metrics.csv").exists()

    @pytest.mark.parametrize("ablation", ["baseline", "dist", "aug", "full"])
    def test_ablation_flag(self, tmp_path, ablation):
        assert run("train", "--ablation", ablation, *FAST, "--out", tmp_path) == 0
        assert json.loads((tmp_path / "summary.json").read_text())["ablation"] == ablation

    def test_seed_sweep_subdirectories(self, tmp_path):
        assert run("train", "--seeds", "1..2", *FAST, "--out", tmp_path) == 0
        a = (tmp_path / "seed_1" / "metrics.csv").read_bytes()
        b = (tmp_path / "seed_2" / "metrics.csv").read_bytes()
        assert a != b
        solo = tmp_path / "solo"
        assert run("train", "--seed", 2, *FAST, "--out", solo) == 0
        assert (solo / "metrics.csv").read_bytes() == b

    def test_bad_seed_range(self, tmp_path):
        assert run("train", "--seeds", "5..2", "--out", tmp_path) == 2

    def test_numeric_failure_exit_3(self, tmp_path):
        assert run("train", "--lr", 1e300, *FAST, "--ablation", "baseline", "--out",
                   tmp_path) == 3

    def test_no_temp_files_left(self, tmp_path):
        assert run("train", *FAST, "--out", tmp_path) == 0
        assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]


class TestConfig:
    def test_precedence(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"gamma": 0.25, "epochs": 5, "alpha": 2.0}))
        cfg = cli.resolve_config("twomoon-baseline", str(path), {"epochs": 3})
        assert cfg.ablation == "baseline"  # preset
        assert cfg.gamma == 0.25 and cfg.alpha == 2.0  # config file beats preset
        assert cfg.epochs == 3  # flag beats config file

    def test_flag_can_repair_config_value(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"gamma": -1}))
        assert cli.resolve_config(None, str(path), {"gamma": 0.5}).gamma == 0.5

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"gama": 1.0}))
        with pytest.raises(ConfigError, match="gama"):
            cli.resolve_config(None, str(path), {})
        assert run("train", "--config", path, "--out", tmp_path) == 2

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{nope")
        assert run("train", "--config", path, "--out", tmp_path) == 2

    def test_missing_config_file(self, tmp_path):
        assert run("train", "--config", tmp_path / "absent.json", "--out", tmp_path) == 2

    @pytest.mark.parametrize("name", cli.PRESETS)
    def test_presets_are_valid(self, name):
        cfg = cli.ExperimentConfig.from_dict(cli.load_preset(name))
        assert cfg.n_labeled == 6 and cfg.n_unlabeled == 1000

    def test_presets_differ_only_in_ablation(self):
        ada = cli.ExperimentConfig.from_dict(cli.load_preset("twomoon-ada")).to_dict()
        base = cli.ExperimentConfig.from_dict(cli.load_preset("twomoon-baseline")).to_dict()
        assert {k for k in ada if ada[k] != base[k]} == {"ablation"}

    def test_defaults_equal_ada_preset(self):
        assert cli.ExperimentConfig.from_dict(cli.load_preset("twomoon-ada")) == \
            cli.ExperimentConfig()

    def test_parse_seed_range(self):
        assert cli.parse_seed_range("3..5") == [3, 4, 5]


class TestMMDCurve:
    def test_default_sizes(self, tmp_path):
        assert run("mmd-curve", "--trials", 5, "--out", tmp_path) == 0
        rows = read_mmd_curve_csv(tmp_path / "mmd_curve.csv")
        assert [r.n for r in rows] == [4, 8, 16, 32, 64, 128, 256, 512, 1000]
        assert all(r.mean_mmd > 0 for r in rows)
        by_n = {r.n: r.mean_mmd for r in rows}
        assert by_n[4] > by_n[512]

    def test_rerun_identical_and_custom_sizes(self, tmp_path):
        args = ("mmd-curve", "--trials", 3, "--sizes", "5,10", "--out", tmp_path)
        assert run(*args) == 0
        first = snapshot(tmp_path)
        assert run(*args) == 0
        assert snapshot(tmp_path) == first
        assert [r.n for r in read_mmd_curve_csv(tmp_path / "mmd_curve.csv")] == [5, 10]

    def test_oversized_request(self, tmp_path):
        assert run("mmd-curve", "--sizes", "10", "--pool-size", 5, "--out", tmp_path) == 2


def _degenerate_csv(path: Path) -> Path:
    x = np.random.default_rng(0).normal(size=(8, 2))
    write_dataset_csv(SplitDataset(x, np.arange(8) % 2, x.copy(), 2), path)
    return path


class TestPropCheck:
    def test_outputs(self, tmp_path):
        assert run("prop-check", "--trials", 100, "--out", tmp_path) == 0
        prop1 = json.loads((tmp_path / "prop1.json").read_text())
        prop2 = json.loads((tmp_path / "prop2.json").read_text())
        assert [r["epsilon"] for r in prop1["rows"]] == [0.3, 0.5, 0.8]
        for r in prop1["rows"]:
            if r["prob_bound"] < 1:
                assert r["exceedance_rate"] <= r["prob_bound"]
        assert 0.20 <= prop2["ratio"] <= 0.30
        assert prop2["deviation"] == pytest.approx(prop2["ratio"] - 0.25)

    def test_too_few_trials(self, tmp_path):
        assert run("prop-check", "--trials", 10, "--out", tmp_path) == 2

    def test_degenerate_pool_exit_3(self, tmp_path):
        data = _degenerate_csv(tmp_path / "d.csv")
        assert run("prop-check", "--trials", 100, "--data", data, "--out", tmp_path / "o") == 3

    def test_rerun_identical(self, tmp_path):
        args = ("prop-check", "--trials", 100, "--n-mix", 1000, "--seed", 4, "--out", tmp_path)
        assert run(*args) == 0
        first = snapshot(tmp_path)
        assert run(*args) == 0
        assert snapshot(tmp_path) == first


class TestKde:
    @pytest.fixture
    def checkpoint(self, tmp_path):
        assert run("train", *FAST, "--out", tmp_path / "train") == 0
        return tmp_path / "train" / "params.ckpt"

    def test_six_files(self, tmp_path, checkpoint):
        out = tmp_path / "kde"
        assert run("kde", "--checkpoint", checkpoint, "--out", out) == 0
        names = sorted(p.name for p in out.iterdir())
        assert names == [f"kde_{s}_{d}.csv" for s in ("labeled", "unlabeled") for d in range(3)]
        for name in names:
            curve = read_density_csv(out / name)
            assert np.all(curve.density >= 0)

    def test_missing_checkpoint(self, tmp_path):
        assert run("kde", "--out", tmp_path) == 2
        assert run("kde", "--checkpoint", tmp_path / "nope.ckpt", "--out", tmp_path) == 2

    def test_identical_sets_identical_curves(self, tmp_path, checkpoint):
        data = _degenerate_csv(tmp_path / "d.csv")
        out = tmp_path / "kde"
        assert run("kde", "--checkpoint", checkpoint, "--data", data, "--out", out) == 0
        for d in range(3):
            assert ((out / f"kde_labeled_{d}.csv").read_bytes()
                    == (out / f"kde_unlabeled_{d}.csv").read_bytes())

    def test_rerun_identical(self, tmp_path, checkpoint):
        out = tmp_path / "kde"
        assert run("kde", "--checkpoint", checkpoint, "--out", out) == 0
        first = snapshot(out)
        assert run("kde", "--checkpoint", checkpoint, "--out", out) == 0
        assert snapshot(out) == first

    def test_dim_out_of_range(self, tmp_path, checkpoint):
        assert run("kde", "--checkpoint", checkpoint, "--dims", "999", "--out", tmp_path) == 2


class TestEntryPoint:
    def test_usage_error_from_argparse(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", "--ablation", "bogus"])
        assert exc.value.code == 2
