import math
import os

import numpy as np
import pytest
import yaml

from ncflow import systems
from ncflow.core import ConfigError
from ncflow.dataset import SPLITS, validate


class TestPresets:
    def test_lv_paper(self):
        benchmark = systems.preset("lv", "paper")
        assert len(benchmark.grid.train) == 9
        assert len(benchmark.grid.adapt) == 4
        assert benchmark.counts() == {"train": 4, "test": 32, "ood_train": 1, "ood_test": 32}

    def test_sp_desk(self):
        benchmark = systems.preset("sp", "desk")
        assert len(benchmark.grid.train) == 8
        assert [env["g"] for env in benchmark.grid.adapt] == [10.25, 14.75]
        gravities = [env["g"] for env in benchmark.grid.train]
        assert min(gravities) == 2.0 and max(gravities) == 24.0

    def test_sp_paper_overlap_warns(self):
        with pytest.warns(UserWarning):
            benchmark = systems.preset("sp", "paper")
        assert len(benchmark.grid.train) == 25

    @pytest.mark.parametrize("scale,count", [("desk", 9), ("paper", 21)])
    def test_sm_bands(self, scale, count):
        assert len(systems.preset("sm", scale).grid.train) == count

    def test_go_and_bt(self):
        assert systems.preset("go", "paper").counts()["train"] == 32
        bt = systems.preset("bt", "desk")
        assert bt.spec.state_size == 128
        assert len(bt.grid.adapt) == 12

    def test_unknown(self):
        with pytest.raises(ConfigError):
            systems.preset("xx")
        with pytest.raises(ConfigError):
            systems.preset("lv", "huge")

    def test_lv_adaptation_grid(self):
        grid = systems.lv_adaptation_grid(5)
        assert len(grid) == 25
        assert grid[0] == {"beta": 0.25, "delta": 0.25}
        assert grid[-1] == {"beta": 1.25, "delta": 1.25}

    def test_overlap_rejected(self):
        with pytest.raises(ConfigError):
            systems.EnvironmentGrid([{"g": 1.0}], [{"g": 1.0}])

    def test_time_grids(self):
        spec = systems.system_spec("sm")
        np.testing.assert_array_equal(spec.t_eval, 4.0 * np.arange(11))
        assert spec.horizon == 40.0
        assert systems.system_spec("sp").t_eval[-1] == 4.75


class TestFields:
    def test_lotka_volterra(self):
        spec = systems.system_spec("lv")
        np.testing.assert_allclose(systems.true_field(spec, {"beta": 0.75, "delta": 1.0}, [1.0, 2.0]), [-1.0, 1.0], rtol=1e-15)

    def test_pendulum(self):
        spec = systems.system_spec("sp")
        np.testing.assert_allclose(systems.true_field(spec, {"g": 9.81}, [math.pi / 2, 0.0]), [0.0, -9.81], atol=1e-15)

    def test_selkov(self):
        spec = systems.system_spec("sm")
        np.testing.assert_allclose(systems.true_field(spec, {"b": 0.5}, [1.0, 2.0]), [-1 + 0.2 + 2, 0.5 - 0.2 - 2], rtol=1e-14)

    def test_glycolytic_shape(self):
        spec = systems.system_spec("go")
        rhs = systems.true_field(spec, {"k1": 100.0, "K1": 1.0}, np.full(7, 0.5))
        assert rhs.shape == (7,)
        assert np.all(np.isfinite(np.asarray(rhs)))

    def test_brusselator_equivariance(self):
        spec = systems.system_spec("bt")
        rng = np.random.default_rng(0)
        x = rng.uniform(0.5, 3.0, size=128)
        params = {"A": 1.0, "B": 3.5}

        def shift(state):
            grids = state.reshape(2, 8, 8)
            return np.roll(grids, (2, -3), axis=(1, 2)).ravel()

        np.testing.assert_allclose(systems.true_field(spec, params, shift(x)), shift(np.asarray(systems.true_field(spec, params, x))), atol=1e-12)

    def test_laplacian_of_constant(self):
        np.testing.assert_array_equal(systems.periodic_laplacian(np.ones((4, 4))), np.zeros((4, 4)))

    @pytest.mark.parametrize("params", [{"beta": 1.0}, {"beta": 1.0, "delta": 1.0, "omega": 2.0}])
    def test_unbound_or_unknown(self, params):
        with pytest.raises(ConfigError):
            systems.true_field(systems.system_spec("lv"), params, [1.0, 1.0])


class TestGeneration:
    def small_grid(self):
        return systems.EnvironmentGrid([{"beta": 0.5, "delta": 0.5}, {"beta": 1.0, "delta": 1.0}], [{"beta": 0.75, "delta": 0.75}])

    def test_shapes_and_metadata(self):
        spec = systems.system_spec("lv")
        ds = systems.generate_dataset(spec, self.small_grid(), 2, 1, systems.default_solver("lv"), seed=3)
        assert ds["train"].X.shape == (2, 2, 20, 2)
        assert ds["ood_test"].X.shape == (1, 1, 20, 2)
        assert validate(ds) == []
        assert ds.metadata["seed"] == 3
        assert ds.metadata["solver"] == {"method": "rk4", "dt": 0.1, "max_steps": 128}
        assert ds.environments("ood_train") == [{"beta": 0.75, "delta": 0.75}]

    def test_lv_shares_initial_conditions(self):
        ds = systems.generate_dataset(systems.system_spec("lv"), self.small_grid(), 3, 1, None, seed=0)
        np.testing.assert_array_equal(ds["train"].X[0, :, 0], ds["train"].X[1, :, 0])

    def test_deterministic_across_jobs(self):
        spec = systems.system_spec("lv")
        one = systems.generate_dataset(spec, self.small_grid(), 2, 1, None, seed=11, jobs=1)
        two = systems.generate_dataset(spec, self.small_grid(), 2, 1, None, seed=11, jobs=2)
        for name in SPLITS:
            np.testing.assert_array_equal(one[name].X, two[name].X)

    def test_reference_accuracy(self):
        spec = systems.system_spec("sp")
        trajectory = systems.simulate(spec, {"g": 9.81}, np.array([0.5, 0.0]))
        energy = 0.5 * trajectory[:, 1] ** 2 - 9.81 * np.cos(trajectory[:, 0])
        np.testing.assert_allclose(energy, energy[0], atol=1e-6)

    def test_corrupt(self):
        X = np.ones((1, 1, 3, 2))
        np.testing.assert_array_equal(systems.corrupt(X, 0.0, np.random.default_rng(0)), X)
        noisy = systems.corrupt(np.zeros((100, 100)), 0.05, np.random.default_rng(0))
        assert np.std(noisy) == pytest.approx(0.05, rel=0.05)

    def test_default_solver(self):
        assert systems.default_solver("lv").method == "rk4"
        assert systems.default_solver("go").method == "dopri5"


class TestGoRanges:
    def test_load(self, tmp_path):
        path = tmp_path / "go.yaml"
        path.write_text(yaml.safe_dump({"low": list(systems.GO_IC_LOW), "high": list(systems.GO_IC_HIGH)}))
        low, high = systems.load_go_ranges(path)
        assert low == systems.GO_IC_LOW and high == systems.GO_IC_HIGH

    def test_invalid(self, tmp_path):
        path = tmp_path / "go.yaml"
        path.write_text(yaml.safe_dump({"low": [0.0] * 7, "high": [1.0] * 6}))
        with pytest.raises(ConfigError):
            systems.load_go_ranges(path)

    def test_shipped(self):
        path = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs", "go_config.yaml")
        assert systems.load_go_ranges(path) == (systems.GO_IC_LOW, systems.GO_IC_HIGH)
