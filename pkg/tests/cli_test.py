import csv

import numpy as np
import pytest
import yaml

from ncflow import cli, dataset


@pytest.fixture
def workspace(toy_dataset, toy_config, tmp_path):
    dataset.save(toy_dataset, tmp_path / "data")
    toy_config.to_yaml(tmp_path / "config.yaml")
    return tmp_path


def train_run(workspace, name="run", *extra):
    argv = ["train", "--dataset", str(workspace / "data"), "--config", str(workspace / "config.yaml"), "--out", str(workspace / name), *extra]
    return cli.main(argv)


class TestGenerate:
    def test_unknown_system(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["generate", "--system", "xx", "--out", str(tmp_path)])
        assert info.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_sp_desk(self, tmp_path):
        assert cli.main(["generate", "--system", "sp", "--preset", "desk", "--seed", "1", "--out", str(tmp_path)]) == 0
        ds = dataset.load(tmp_path)
        assert ds["train"].X.shape[0] == 8
        assert ds["ood_train"].X.shape[0] == 2
        manifest = yaml.safe_load((tmp_path / cli.MANIFEST_NAME).read_text())
        assert manifest["subcommand"] == "generate"
        assert manifest["seed"] == 1

    def test_grid_needs_lv(self, tmp_path):
        assert cli.main(["generate", "--system", "sp", "--grid", "3", "--out", str(tmp_path)]) == 2


class TestRuns:
    def test_train_writes_reports(self, workspace):
        assert train_run(workspace) == 0
        for name in ["report.yaml", "losses.csv", "contexts.npy", cli.MANIFEST_NAME]:
            assert (workspace / "run" / name).exists()

    def test_train_is_reproducible(self, workspace):
        assert train_run(workspace, "a") == 0
        assert train_run(workspace, "b") == 0
        assert (workspace / "a" / "losses.csv").read_bytes() == (workspace / "b" / "losses.csv").read_bytes()

    def test_baseline(self, workspace):
        assert train_run(workspace, "ofa", "--baseline", "ofa") == 0
        out = workspace / "ofa_eval"
        assert cli.main(["eval", "--dataset", str(workspace / "data"), "--run", str(workspace / "ofa"), "--out", str(out)]) == 0
        assert (out / "metrics.csv").exists()

    def test_eval_needs_contexts(self, workspace):
        train_run(workspace)
        argv = ["eval", "--dataset", str(workspace / "data"), "--run", str(workspace / "run"), "--out", str(workspace / "eval")]
        assert cli.main(argv) == 2

    def test_adapt_then_eval(self, workspace):
        train_run(workspace)
        data, run = str(workspace / "data"), str(workspace / "run")
        assert cli.main(["adapt", "--dataset", data, "--run", run, "--mode", "sequential", "--out", str(workspace / "adapt")]) == 0
        contexts = str(workspace / "adapt" / "adapted_contexts.npy")
        argv = ["eval", "--dataset", data, "--run", run, "--contexts", contexts, "--split", "ood_test", "--out", str(workspace / "eval")]
        assert cli.main(argv) == 0
        metrics = yaml.safe_load((workspace / "eval" / "metrics.yaml").read_text())
        assert metrics["split"] == "ood_test"
        assert len(metrics["mse"]) == 2

    def test_bulk_matches_sequential_for_one_environment(self, workspace):
        train_run(workspace)
        data, run = str(workspace / "data"), str(workspace / "run")
        for mode in ("sequential", "bulk"):
            assert cli.main(["adapt", "--dataset", data, "--run", run, "--mode", mode, "--envs", "1", "--out", str(workspace / mode)]) == 0
        sequential = np.load(workspace / "sequential" / "adapted_contexts.npy")
        bulk = np.load(workspace / "bulk" / "adapted_contexts.npy")
        assert sequential.shape == (1, 2)
        np.testing.assert_allclose(bulk, sequential, rtol=0, atol=1e-8)

    def test_uq_and_identify(self, workspace):
        train_run(workspace)
        data, run = str(workspace / "data"), str(workspace / "run")
        assert cli.main(["uq", "--dataset", data, "--run", run, "--out", str(workspace / "uq")]) == 0
        summary = yaml.safe_load((workspace / "uq" / "uq.yaml").read_text())
        assert summary["p"] == 2
        assert cli.main(["identify", "--dataset", data, "--run", run, "--out", str(workspace / "identify")]) == 0
        assert (workspace / "identify" / "identification.yaml").exists()

    def test_uq_all_needs_adapted(self, workspace):
        train_run(workspace)
        argv = ["uq", "--dataset", str(workspace / "data"), "--run", str(workspace / "run"), "--expansion", "all", "--out", str(workspace / "uq")]
        assert cli.main(argv) == 2

    def test_corrupted_dataset(self, workspace):
        blob = bytearray((workspace / "data" / "train.X.bin").read_bytes())
        blob[0] ^= 0x01
        (workspace / "data" / "train.X.bin").write_bytes(bytes(blob))
        assert train_run(workspace) == 2

    def test_divergence_exit_code(self, toy_dataset, toy_config, tmp_path):
        split = toy_dataset["train"]
        toy_dataset.splits["train"] = dataset.Split(split.t, split.X * 1e200)
        dataset.save(toy_dataset, tmp_path / "data")
        toy_config.to_yaml(tmp_path / "config.yaml")
        assert train_run(tmp_path) == 3
        report = yaml.safe_load((tmp_path / "run" / "report.yaml").read_text())
        assert report["status"] == "diverged"


class TestExportPlots:
    def test_series(self, workspace, toy_config):
        train_run(workspace)
        data, run = str(workspace / "data"), str(workspace / "run")
        train_contexts = str(workspace / "run" / "contexts.npy")
        cli.main(["eval", "--dataset", data, "--run", run, "--contexts", train_contexts, "--out", str(workspace / "eval")])
        argv = ["export-plots", "--run", run, "--eval", str(workspace / "eval"), "--dataset", data, "--out", str(workspace / "plots")]
        assert cli.main(argv) == 0
        plots = workspace / "plots"
        assert len((plots / "loss_curve.csv").read_text().splitlines()) == 1 + toy_config.epochs
        scatter = (plots / "contexts_scatter.csv").read_text().splitlines()
        assert scatter[0] == "env,xi1,xi2"
        assert len(scatter) == 1 + 2
        heatmap = (plots / "heatmap.csv").read_text().splitlines()
        assert heatmap[0] == "env,rate,mse"
        assert len(heatmap) == 1 + 2

    def test_missing_series(self, tmp_path, caplog):
        assert cli.main(["export-plots", "--run", str(tmp_path / "nothing"), "--out", str(tmp_path / "plots")]) == 2
        assert "losses.csv" in caplog.text

    def test_quoted_csv(self, workspace):
        train_run(workspace)
        data, run = str(workspace / "data"), str(workspace / "run")
        cli.main(["eval", "--dataset", data, "--run", run, "--contexts", str(workspace / "run" / "contexts.npy"), "--out", str(workspace / "eval")])
        argv = ["export-plots", "--run", run, "--eval", str(workspace / "eval"), "--dataset", data, "--out", str(workspace / "plots")]
        assert cli.main(argv) == 0
        plots = workspace / "plots"
        assert (plots / "loss_curve.csv").read_bytes() == (workspace / "run" / "losses.csv").read_bytes()
        with open(plots / "heatmap.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["env", "rate", "mse"]
        assert [int(row[0]) for row in rows[1:]] == [0, 1]
        assert all(len(row) == 3 and float(row[2]) >= 0.0 for row in rows[1:])
        with open(plots / "contexts_scatter.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        np.testing.assert_array_equal(np.array(rows[1:], dtype=float)[:, 1:], np.load(workspace / "run" / "contexts.npy"))


class TestSeed:
    def test_precedence(self, monkeypatch):
        monkeypatch.delenv("NCF_SEED", raising=False)
        assert cli.resolve_seed(None, 7) == 7
        monkeypatch.setenv("NCF_SEED", "5")
        assert cli.resolve_seed(None, 7) == 5
        assert cli.resolve_seed(3, 7) == 3

    def test_environment_seed_without_config(self, workspace, monkeypatch):
        monkeypatch.setenv("NCF_SEED", "5")
        data, run = str(workspace / "data"), str(workspace / "run")
        assert cli.main(["train", "--dataset", data, "--epochs", "1", "--out", run]) == 0
        assert yaml.safe_load((workspace / "run" / cli.MANIFEST_NAME).read_text())["seed"] == 5
        report = yaml.safe_load((workspace / "run" / "report.yaml").read_text())
        assert report["seed"] == 5
        assert report["config"]["seed"] == 5

        monkeypatch.setenv("NCF_SEED", "9")
        assert cli.main(["adapt", "--dataset", data, "--run", run, "--iters", "1", "--out", str(workspace / "adapt")]) == 0
        assert yaml.safe_load((workspace / "adapt" / cli.MANIFEST_NAME).read_text())["seed"] == 9

    def test_flag_beats_environment(self, workspace, monkeypatch):
        monkeypatch.setenv("NCF_SEED", "5")
        assert train_run(workspace, "run", "--seed", "3") == 0
        report = yaml.safe_load((workspace / "run" / "report.yaml").read_text())
        assert report["seed"] == 3
        assert report["config"]["seed"] == 3


class TestErrors:
    def test_malformed_config(self, workspace):
        (workspace / "config.yaml").write_text("epochs: [1, 2\n")
        assert train_run(workspace) == 2

    def test_report_without_config(self, workspace):
        train_run(workspace)
        path = workspace / "run" / "report.yaml"
        summary = yaml.safe_load(path.read_text())
        del summary["config"]
        path.write_text(yaml.safe_dump(summary))
        argv = ["adapt", "--dataset", str(workspace / "data"), "--run", str(workspace / "run"), "--out", str(workspace / "adapt")]
        assert cli.main(argv) == 2


@pytest.mark.slow
class TestPipeline:
    def test_lv_desk(self, tmp_path):
        data, run = str(tmp_path / "data"), str(tmp_path / "run")
        config = tmp_path / "config.yaml"
        config.write_text(
            yaml.safe_dump(
                {
                    "taylor_order": 2,
                    "context_size": 2,
                    "widths": {"state": [16], "context": [16], "main": [16]},
                    "epochs": 20,
                    "lr_theta": 3e-3,
                    "lr_ctx": 3e-3,
                    "adapt_iters": 20,
                }
            )
        )
        assert cli.main(["generate", "--system", "lv", "--grid", "2", "--out", data]) == 0
        assert cli.main(["train", "--dataset", data, "--config", str(config), "--out", run]) == 0
        adapt = str(tmp_path / "adapt")
        assert cli.main(["adapt", "--dataset", data, "--run", run, "--mode", "bulk", "--out", adapt]) == 0
        contexts = str(tmp_path / "adapt" / "adapted_contexts.npy")
        evaluation = str(tmp_path / "eval")
        assert cli.main(["eval", "--dataset", data, "--run", run, "--contexts", contexts, "--split", "ood_test", "--out", evaluation]) == 0
        assert cli.main(["uq", "--dataset", data, "--run", run, "--out", str(tmp_path / "uq")]) == 0
        assert cli.main(["identify", "--dataset", data, "--run", run, "--adapted", contexts, "--out", str(tmp_path / "identify")]) == 0
        assert cli.main(["export-plots", "--run", run, "--eval", evaluation, "--dataset", data, "--out", str(tmp_path / "plots")]) == 0
        heatmap = (tmp_path / "plots" / "heatmap.csv").read_text().splitlines()
        assert heatmap[0] == "env,beta,delta,mse"
        assert len(heatmap) == 1 + 4
