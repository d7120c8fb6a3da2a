import math

from ncflow import filters


class TestRelativeChange:
    def test_new_data(self):
        filter_ = filters.RelativeChange(1e-6)
        assert filter_(1.0, 1) == 1.0
        assert filter_(0.5, 1) == 0.5

    def test_dupe_data(self):
        filter_ = filters.RelativeChange(1e-6)
        assert filter_(1.0, 1) == 1.0
        assert filter_(1.0, 1) is None

    def test_keys_are_independent(self):
        filter_ = filters.RelativeChange(1e-6)
        filter_(1.0, "theta")
        assert filter_(1.0, "contexts") == 1.0
        assert filter_(1.0, "theta") is None

    def test_non_finite_never_converges(self):
        filter_ = filters.RelativeChange(1e-6)
        filter_(math.nan)
        assert math.isnan(filter_(math.nan))

    def test_reset(self):
        filter_ = filters.RelativeChange(1e-6)
        filter_(2.0)
        filter_.reset()
        assert filter_(2.0) == 2.0


class TestBestCheckpoint:
    def test_keeps_lowest(self):
        best = filters.BestCheckpoint()
        assert best(3.0, 1, "a") == "a"
        assert best(5.0, 2, "b") is None
        assert best(1.0, 3, "c") == "c"
        assert (best.best_score, best.best_step, best.best) == (1.0, 3, "c")

    def test_ignores_nan(self):
        best = filters.BestCheckpoint()
        assert best(math.nan, 1, "a") is None
        assert best.best is None
