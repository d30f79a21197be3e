import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_table
from shiftpl.errors import FitError, ValidationError
from shiftpl.predictor import (
    Prediction,
    ReferencePredictor,
    ReplayPredictor,
    ResidualSet,
    compute_residuals,
    fit_reference_predictor,
    load_predictor,
    load_residuals,
    normalize_residual,
    normalize_residuals,
    reconstruct,
)
from shiftpl.trajectory import N_SLOTS, WindowBatch, build_state_windows


def synthetic_batch(n, rng, weights=(0.5, 0.1, -0.15), noise=0.0, direction="longitudinal"):
    """One-row windows whose target follows the linear rule plus Gaussian noise."""
    v = rng.uniform(5.0, 35.0, n)
    v_lead = v + rng.normal(0.0, 2.0, n)
    gap = rng.uniform(5.0, 80.0, n)
    ego = np.zeros((n, 5))
    ego[:, 0] = v
    ego[:, 1] = rng.normal(0.0, 0.3, n)
    nb = np.zeros((n, N_SLOTS, 5))
    nb[:, 0, 0] = v_lead
    nb[:, 0, 4] = gap + 4.5
    present = np.zeros((n, N_SLOTS), dtype=bool)
    present[:, 0] = True
    lat = rng.uniform(-1.0, 1.0, n)
    if direction == "longitudinal":
        mean = weights[0] * (v_lead - v) + weights[1] * gap + weights[2] * v
    else:
        mean = weights[0] * lat + weights[1] * ego[:, 1]
    target = mean + noise * rng.standard_normal(n)
    return WindowBatch(
        ego=ego, neighbors=nb, present=present, neighbor_length=np.full((n, N_SLOTS), 4.5),
        lat_offset=lat, ego_length=np.full(n, 4.5), end=np.arange(1, n + 1), T=1,
        direction=direction, target=target, vehicle_id=np.arange(n), frame=np.zeros(n, dtype=np.int64),
    )


def pair_windows(v_ego=20.0, v_lead=18.0, gap=30.0, T=12):
    rows = []
    for f in range(T + 1):
        rows.append({"frame": f, "id": 1, "x": v_ego * 0.2 * f, "vx": v_ego})
        rows.append({"frame": f, "id": 2, "x": gap + 4.5 + v_ego * 0.2 * f, "vx": v_lead})
    windows = build_state_windows(make_table(rows), T=T)
    return windows.subset(np.flatnonzero(windows.vehicle_id == 1))


class TestNormalize:
    def test_examples(self):
        assert normalize_residual(1.0, Prediction(0.6, 0.2), 1e-6) == pytest.approx(2.0)
        assert normalize_residual(0.7, Prediction(0.7, 0.3)) == 0.0
        assert normalize_residual(0.5, Prediction(0.5 - 1e-9, 0.0), 1e-6) == pytest.approx(1e-3, rel=1e-6)

    def test_reconstruct_examples(self):
        assert reconstruct(Prediction(0.0, 1.0), -3.5) == -3.5
        assert reconstruct(Prediction(0.6, 0.2), 2.0) == pytest.approx(1.0)
        p = Prediction(0.6, 0.2)
        assert reconstruct(p, normalize_residual(1.3, p)) == pytest.approx(1.3, abs=1e-15)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValidationError):
            normalize_residual(1.0, Prediction(0, 1), 0.0)

    def test_negative_std_rejected(self):
        with pytest.raises(ValidationError):
            Prediction(0.0, -0.1)

    @given(st.floats(-1e3, 1e3), st.floats(1e-6, 1e2), st.floats(-50, 50))
    @settings(max_examples=200, deadline=None)
    def test_inverse(self, mean, std, sigma):
        p = Prediction(mean, std)
        back = normalize_residual(reconstruct(p, sigma), p)
        assert back == pytest.approx(sigma, abs=1e-9 * (1 + abs(mean) / std))


class TestReference:
    def test_pair_fixture(self):
        w = pair_windows()[0]
        p = ReferencePredictor.longitudinal().predict(w)
        # 0.5 * (18 - 20) + 0.1 * (30 - 20 * 1.5)
        assert p.mean == pytest.approx(-1.0, abs=1e-12)
        assert p.std == 1.0

    def test_zero_motion(self):
        table = make_table([{"frame": f, "id": 1} for f in range(13)])
        w = build_state_windows(table)[0]
        assert ReferencePredictor.longitudinal().predict(w).mean == 0.0
        lat = build_state_windows(table, direction="lateral")[0]
        assert ReferencePredictor.lateral().predict(lat).mean == 0.0

    def test_deterministic(self):
        w = pair_windows(22.0, 25.0, 17.0)[0]
        ref = ReferencePredictor.longitudinal()
        assert ref.predict(w) == ref.predict(w)

    def test_direction_mismatch(self):
        table = make_table([{"frame": f, "id": 1} for f in range(13)])
        lat = build_state_windows(table, direction="lateral")[0]
        with pytest.raises(ValidationError):
            ReferencePredictor.longitudinal().predict(lat)

    def test_lateral_pull_sign(self):
        rows = [{"frame": f, "id": i, "y": y, "lane": 0} for f in range(13) for i, y in ((1, 1.0), (2, -1.0))]
        windows = build_state_windows(make_table(rows), direction="lateral")
        mean, _ = ReferencePredictor.lateral().predict_batch(windows)
        # lane center is 0: vehicle above is pulled down and vice versa
        np.testing.assert_allclose(mean[windows.vehicle_id == 1], -0.1)
        np.testing.assert_allclose(mean[windows.vehicle_id == 2], 0.1)

    def test_save_load(self, tmp_path, rng):
        pred = fit_reference_predictor(synthetic_batch(500, rng, noise=0.3))
        path = pred.save(tmp_path / "p.json")
        back = load_predictor(path)
        assert back == pred
        d = json.loads(path.read_text())
        assert d["version"] == 1 and d["rule"] == "linear-car-following"
        assert len(d["std_bins"]["values"]) == 10

    def test_load_rejects_other_files(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text(json.dumps({"format": "other"}))
        with pytest.raises(ValidationError):
            load_predictor(p)


class TestFit:
    def test_too_few_windows(self, rng):
        with pytest.raises(FitError):
            fit_reference_predictor(synthetic_batch(99, rng))

    @pytest.mark.parametrize("s", [0.05, 0.4, 1.5])
    def test_recovers_noise_std(self, rng, s):
        pred = fit_reference_predictor(synthetic_batch(5000, rng, noise=s))
        np.testing.assert_allclose(pred.std_values, s, rtol=0.10)
        np.testing.assert_allclose(pred.weights, (0.5, 0.1, -0.15), atol=0.05)

    def test_noiseless_exact(self, rng):
        batch = synthetic_batch(400, rng)
        pred = fit_reference_predictor(batch)
        mean, _ = pred.predict_batch(batch)
        assert abs(np.mean(batch.target - mean)) < 1e-8
        np.testing.assert_allclose(pred.coefficients["tau"], 1.5, rtol=1e-8)

    def test_lateral_fit(self, rng):
        batch = synthetic_batch(1000, rng, weights=(-0.2, -0.7), noise=0.1, direction="lateral")
        pred = fit_reference_predictor(batch)
        np.testing.assert_allclose(pred.weights, (-0.2, -0.7), atol=0.03)
        assert pred.coefficients["k_offset"] == pytest.approx(0.2, abs=0.03)

    def test_refit_identical(self, rng):
        batch = synthetic_batch(300, rng, noise=0.2)
        assert fit_reference_predictor(batch) == fit_reference_predictor(batch)


class TestResiduals:
    def test_mean_converges_to_zero(self):
        rng = np.random.default_rng(7)
        n = 100_000
        batch = synthetic_batch(n, rng, noise=0.0)
        pred = ReferencePredictor.longitudinal(std=0.7)
        noisy = batch.with_direction("longitudinal", batch.target + 0.7 * rng.standard_normal(n))
        rs = compute_residuals(pred, noisy)
        assert rs.n == n
        assert abs(rs.values.mean()) < 3 / np.sqrt(n)

    def test_order_independent(self, rng):
        batch = synthetic_batch(200, rng, noise=0.5)
        pred = ReferencePredictor.longitudinal(std=0.5)
        perm = rng.permutation(200)
        a = compute_residuals(pred, batch).values
        b = compute_residuals(pred, batch.subset(perm)).values
        np.testing.assert_array_equal(b, a[perm])

    def test_csv_round_trip(self, tmp_path, rng):
        rs = ResidualSet(rng.standard_normal(100), dataset="synthetic", direction="lateral", dt=0.2,
                         predictor="reference", extra={"eps": 1e-6})
        path = tmp_path / "r.csv"
        rs.save(path)
        back = load_residuals(path)
        np.testing.assert_array_equal(back.values, rs.values)
        assert back.provenance() == rs.provenance()
        assert (tmp_path / "r.json").exists()

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            ResidualSet(np.array([0.0, np.nan]))

    def test_vectorized_floor(self):
        out = normalize_residuals([1.0, 1.0], np.array([0.0, 0.0]), np.array([0.0, 2.0]), 0.5)
        np.testing.assert_allclose(out, [2.0, 0.5])


class TestReplay:
    def test_returns_recorded_accel(self):
        rows = [{"frame": f, "id": 1, "ax": 0.1 * f} for f in range(15)]
        table = make_table(rows)
        windows = build_state_windows(table, T=4)
        mean, std = ReplayPredictor(table).predict_batch(windows)
        np.testing.assert_allclose(mean, windows.target)
        assert np.all(std == 0)
        rs = compute_residuals(ReplayPredictor(table), windows)
        assert np.all(rs.values == 0)
