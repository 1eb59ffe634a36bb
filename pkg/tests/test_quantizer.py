import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smjls.model import SojournDistribution
from smjls.quantizer import (
    GridFileError,
    QuantizationGrid,
    clvq_train,
    distortion_estimate,
    distortion_estimate_points,
    lloyd_refine,
    load_grid,
    project,
    rate_diagnostic,
    save_grid,
)

UNIF = SojournDistribution("uniform", a=0.0, b=1.0)
EXP20 = SojournDistribution("exponential", rate=20.0)


def _grid(points):
    points = np.asarray(points, dtype=float)
    return QuantizationGrid(mode=0, points=points,
                            weights=np.full(len(points), 1 / len(points)),
                            distortion=0.0)


class TestProject:
    def test_exact_codeword(self):
        idx, cw = project(_grid([0.5, 1.5]), 1.5)
        assert (idx, cw) == (1, 1.5)

    def test_tie_breaks_low(self):
        idx, cw = project(_grid([1.0, 3.0]), 2.0)
        assert (idx, cw) == (0, 1.0)

    def test_nearest(self):
        idx, cw = project(_grid([0.25, 0.75]), 0.6)
        assert (idx, cw) == (1, 0.75)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            project(_grid([1.0]), -0.1)

    @settings(max_examples=100, deadline=None)
    @given(
        pts=st.lists(st.floats(0.01, 100.0), min_size=1, max_size=12, unique=True),
        s=st.floats(0.0, 120.0),
    )
    def test_idempotent(self, pts, s):
        g = _grid(sorted(pts))
        _, cw = project(g, s)
        idx2, cw2 = project(g, cw)
        assert cw2 == cw
        assert g.points[idx2] == cw


class TestClvqTrain:
    def test_single_point_is_mean(self):
        g = clvq_train(UNIF, 1, iters=200_000, seed=0)
        assert abs(g.points[0] - 0.5) < 0.01
        g = clvq_train(EXP20, 1, iters=200_000, seed=0)
        assert abs(g.points[0] - 0.05) < 0.002

    def test_uniform_two_points(self):
        g = clvq_train(UNIF, 2, iters=400_000, seed=1)
        np.testing.assert_allclose(g.points, [0.25, 0.75], atol=0.02)
        assert abs(g.distortion - 1 / (4 * np.sqrt(3))) < 0.005

    def test_weights_sum_to_one(self):
        g = clvq_train(EXP20, 6, iters=50_000, seed=2)
        assert abs(g.weights.sum() - 1.0) < 1e-6
        assert np.all(np.diff(g.points) > 0)
        assert np.all(g.points > 0)

    def test_deterministic_under_seed(self):
        a = clvq_train(EXP20, 5, iters=30_000, seed=3)
        b = clvq_train(EXP20, 5, iters=30_000, seed=3)
        np.testing.assert_array_equal(a.points, b.points)

    def test_point_mass_collapses_with_warning(self, caplog):
        atom = SojournDistribution("empirical", samples=[2.0], lipschitz=0.0)
        with caplog.at_level("WARNING"):
            g = clvq_train(atom, 3, iters=5_000, seed=0)
        assert len(g.points) == 1
        assert g.points[0] == 2.0
        assert any("collapsed" in r.message for r in caplog.records)

    def test_monotone_in_grid_size(self):
        d10 = clvq_train(EXP20, 10, iters=300_000, seed=5)
        d100 = clvq_train(EXP20, 100, iters=300_000, seed=6)
        se = np.hypot(d10.train_meta["distortion_se"], d100.train_meta["distortion_se"])
        assert d100.distortion < d10.distortion - 3 * se

    def test_centroid_self_consistency(self):
        g = clvq_train(UNIF, 8, iters=600_000, seed=7)
        rng = np.random.default_rng(99)
        s = UNIF.sample(rng, size=100_000)
        idx = np.array([project(g, v)[0] for v in s[:20_000]])
        for i in range(8):
            cell = s[:20_000][idx == i]
            assert len(cell) > 0
            assert abs(cell.mean() - g.points[i]) / g.points[i] < 0.05

    def test_bad_args(self):
        with pytest.raises(ValueError):
            clvq_train(UNIF, 0)
        with pytest.raises(ValueError):
            clvq_train(UNIF, 10, iters=5)

    def test_weibull_sample_seeded_path(self):
        # no closed-form compander for weibull: k-means++ seeding branch
        wb = SojournDistribution("weibull", shape=2.0, scale=0.5)
        g = clvq_train(wb, 8, iters=60_000, seed=4)
        assert g.train_meta["init"] == "kmeans++"
        assert np.all(np.diff(g.points) > 0) and np.all(g.points > 0)
        assert abs(g.weights.sum() - 1.0) < 1e-6
        g16 = clvq_train(wb, 16, iters=60_000, seed=5)
        assert g16.distortion < g.distortion


class TestLloydRefine:
    def test_agrees_with_clvq_fixed_point(self):
        g = clvq_train(EXP20, 10, iters=400_000, seed=11)
        r = lloyd_refine(EXP20, g, iters=40, samples_per_iter=50_000, seed=12)
        assert abs(r.distortion - g.distortion) / g.distortion < 0.02

    def test_uniform_converges_from_bad_start(self):
        start = _grid([0.1, 0.9])
        r = lloyd_refine(UNIF, start, iters=80, samples_per_iter=50_000, seed=13)
        np.testing.assert_allclose(r.points, [0.25, 0.75], atol=0.01)

    def test_point_mass_collapses(self):
        atom = SojournDistribution("empirical", samples=[1.5], lipschitz=0.0)
        r = lloyd_refine(atom, _grid([0.5, 2.5]), iters=5, samples_per_iter=100, seed=0)
        np.testing.assert_array_equal(r.points, [1.5])

    def test_distortion_never_increases_much(self):
        g = clvq_train(UNIF, 5, iters=100_000, seed=21)
        r = lloyd_refine(UNIF, g, iters=30, samples_per_iter=30_000, seed=22)
        assert r.distortion <= g.distortion * 1.02


class TestDistortionEstimate:
    def test_perfect_grid_zero_error(self):
        atoms = SojournDistribution("empirical", samples=[1.0, 2.0, 3.0], lipschitz=1.0)
        d, se = distortion_estimate(_grid([1.0, 2.0, 3.0]), atoms, n_samples=2_000, seed=0)
        assert d == 0.0

    def test_sample_floor(self):
        with pytest.raises(ValueError):
            distortion_estimate(_grid([1.0]), UNIF, n_samples=10)

    def test_uniform_closed_form(self):
        # the optimal nu-point uniform codebook has error 1/(sqrt(12) nu)
        for nu in (2, 4, 8):
            pts = (2 * np.arange(nu) + 1) / (2 * nu)
            d, se = distortion_estimate(_grid(pts), UNIF, n_samples=100_000, seed=nu)
            assert abs(d - 1 / (np.sqrt(12) * nu)) < 4 * se + 1e-4


class TestRateDiagnostic:
    def test_uniform_exact_grids_slope_minus_one(self):
        nus = [4, 8, 16, 32]
        ds = []
        for nu in nus:
            pts = (2 * np.arange(nu) + 1) / (2 * nu)
            d, _ = distortion_estimate_points(pts, UNIF, 200_000, seed=nu)
            ds.append(d)
        slope = np.polyfit(np.log(nus), np.log(ds), 1)[0]
        assert abs(slope + 1.0) < 0.03

    def test_trained_exponential_slope(self):
        res = rate_diagnostic(EXP20, [4, 8, 16, 32], iters=150_000, seed=1)
        assert -1.35 < res["slope"] < -0.65
        assert res["consistent"] in (True, False)

    def test_flat_distortions_flagged(self):
        # fit logic alone: constant distortions give slope 0 and a failure flag
        x = np.log([10.0, 50.0, 100.0])
        y = np.log([0.3, 0.3, 0.3])
        slope = np.polyfit(x, y, 1)[0]
        assert abs(slope) < 1e-12
        assert not (abs(slope - (-1.0)) <= 0.2)

    def test_needs_three_sizes(self):
        with pytest.raises(ValueError):
            rate_diagnostic(UNIF, [2, 4])


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        g = clvq_train(EXP20, 7, iters=30_000, seed=3)
        path = tmp_path / "g.json"
        save_grid(g, path, model_hash="abc")
        g2 = load_grid(path, expected_model_hash="abc")
        np.testing.assert_array_equal(g.points, g2.points)
        np.testing.assert_array_equal(g.weights, g2.weights)
        assert g.distortion == g2.distortion
        assert g2.train_meta["iterations"] == 30_000

    def test_tamper_detected(self, tmp_path):
        g = clvq_train(EXP20, 4, iters=20_000, seed=3)
        path = tmp_path / "g.json"
        save_grid(g, path)
        doc = json.loads(path.read_text())
        doc["payload"]["points"][0] = repr(0.123)
        path.write_text(json.dumps(doc))
        with pytest.raises(GridFileError, match="checksum"):
            load_grid(path)

    def test_wrong_model_refused(self, tmp_path):
        g = clvq_train(EXP20, 4, iters=20_000, seed=3)
        path = tmp_path / "g.json"
        save_grid(g, path, model_hash="modelA")
        with pytest.raises(GridFileError, match="different model"):
            load_grid(path, expected_model_hash="modelB")
