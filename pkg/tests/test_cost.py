import math

import numpy as np
import pytest

from prunefl import cost
from prunefl.cost import CostModel, RoundKind, TimingSample


class TestRoundTime:
    def test_zero_kept_is_constant(self):
        cm = CostModel(0.7, (1e-3, 2e-3))
        assert cost.round_time(cm, [0, 0]) == 0.7

    def test_full_model(self):
        cm = CostModel(0.5, (1e-4, 2e-4), bandwidth=1e6)
        kept = [1000, 300]
        expected = 0.5 + 1e-4 * 1000 + 2e-4 * 300 + 8 * 1300 / 1e6
        assert cost.round_time(cm, kept) == pytest.approx(expected, rel=1e-15)

    def test_reconfig_round_adds_importance_and_sparse_download(self):
        cm = CostModel(0.0, (1e-9,), bandwidth=1.0)
        up, down = cost.comm_split([100], RoundKind.RECONFIG, [800], [100])
        assert up == 4 * 800
        assert down == cost.storage_cost(800, 100).sparse_bytes
        t = cost.round_time(cm, [100], RoundKind.RECONFIG, [800], [100])
        assert t == pytest.approx(1e-7 + up + down)

    def test_reconfig_needs_capacity(self):
        with pytest.raises(ValueError):
            cost.comm_split([10], RoundKind.RECONFIG)

    def test_layer_count_checked(self):
        with pytest.raises(ValueError):
            CostModel(0.1, (1.0,)).compute_time([1, 2])

    @pytest.mark.parametrize("kwargs", [
        dict(c=-1.0, t_per_layer=(1.0,)),
        dict(c=1.0, t_per_layer=(0.0,)),
        dict(c=1.0, t_per_layer=(1.0,), bandwidth=0.0),
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            CostModel(**kwargs)


class TestCommBytes:
    def test_normal_examples(self):
        assert cost.comm_bytes([0], RoundKind.NORMAL) == 0
        assert cost.comm_bytes([1000], RoundKind.NORMAL) == 8000
        assert cost.comm_bytes([600, 400], "normal") == 8000

    def test_sparse_download_per_layer(self):
        up, down = cost.comm_split([10, 5], RoundKind.RECONFIG, [64, 3200], [10, 1600])
        assert up == 4 * 3264
        assert down == min(80, 8 + 40) + min(12800, 400 + 6400)


class TestLinearCost:
    def test_per_coordinate_time_includes_traffic(self):
        cm = CostModel(1.0, (1e-3, 2e-3), bandwidth=1e4)
        lc = cm.linear_cost([2, 3])
        np.testing.assert_allclose(lc.t, [1e-3 + 8e-4] * 2 + [2e-3 + 8e-4] * 3)
        assert lc(np.ones(5, bool)) == pytest.approx(cm.compute_time([2, 3]) + 5 * 8 / 1e4)

    def test_infinite_bandwidth(self):
        lc = CostModel(1.0, (1e-3,)).linear_cost([4])
        np.testing.assert_array_equal(lc.t, [1e-3] * 4)


class TestFit:
    def test_recovers_known_model(self):
        truth = CostModel(2.0, (1e-5, 3e-5))
        counts = [(0, 0), (1000, 0), (0, 1000), (5000, 2000), (300, 7000), (10000, 10000)]
        cm = cost.fit(cost.synthesize(truth, counts))
        assert abs(cm.c - 2.0) <= 1e-9
        np.testing.assert_allclose(cm.t_per_layer, (1e-5, 3e-5), rtol=0, atol=1e-9)
        assert cm.r_squared == pytest.approx(1.0)

    def test_identical_counts_rank_deficient(self):
        samples = [TimingSample((100, 200), s) for s in (1.0, 1.1, 0.9)]
        with pytest.raises(cost.RankDeficientError):
            cost.fit(samples)

    def test_no_samples(self):
        with pytest.raises(cost.RankDeficientError):
            cost.fit([])

    def test_constant_only(self):
        cm = cost.fit([TimingSample((0, 0), 5.0), TimingSample((0, 0), 5.0)])
        assert cm.c == 5.0
        assert cm.t_per_layer == (cost.CLAMP_FLOOR, cost.CLAMP_FLOOR)

    def test_negative_slope_clamped_and_refit(self):
        # time falls with layer 1 count: its coefficient is pinned at the floor
        samples = [TimingSample((k, 10 * k), 1.0 + 1e-3 * 10 * k - 1e-4 * k) for k in range(1, 6)]
        samples += [TimingSample((0, 0), 1.0), TimingSample((7, 0), 1.0 - 7e-4 + 1e-9)]
        cm = cost.fit(samples)
        assert cm.t_per_layer[0] == cost.CLAMP_FLOOR
        assert cm.t_per_layer[1] > 0
        assert cm.c >= 0

    def test_noisy_fit_reports_r_squared(self, rng):
        truth = CostModel(0.5, (1e-4,))
        samples = [TimingSample((int(k),), truth.compute_time([int(k)]) * (1 + 0.01 * rng.normal()))
                   for k in rng.integers(0, 20000, 40)]
        cm = cost.fit(samples)
        assert 0.9 < cm.r_squared <= 1.0
        assert cm.t_per_layer[0] == pytest.approx(1e-4, rel=0.05)

    def test_sample_validation(self):
        with pytest.raises(ValueError):
            TimingSample((1,), 0.0)
        with pytest.raises(ValueError):
            TimingSample((-1,), 1.0)


class TestPresets:
    def test_round_trip(self, tmp_path):
        cm = CostModel(0.5, (1e-4, 2e-4), bandwidth=1e5)
        path = tmp_path / "preset.yaml"
        cost.save_preset(cm, path)
        assert cost.load_preset(path) == cm

    def test_infinite_bandwidth_is_null(self, tmp_path):
        cm = CostModel(0.5, (1e-4,))
        assert cost.preset_to_dict(cm)["bandwidth_Bps"] is None
        assert math.isinf(cost.preset_from_dict(cost.preset_to_dict(cm)).bandwidth)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            cost.preset_from_dict({"c_seconds": 1, "t_per_layer": [1e-3], "speed": 2})
