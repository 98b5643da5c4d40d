import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from safesynth.behavior import (BootstrapPlan, DataRecord, OracleTruth,
                                RankDeficientDataError, assess_errors,
                                build_hankel, check_pe, estimate_ls,
                                estimate_ml, partition_data, record_from_csv,
                                record_to_csv)
from safesynth.experiments import benchmark_model, collect_record
from safesynth.plant import (SignalTrajectory, true_free_response,
                             true_impulse_response)

N_HORIZON = 12


def noiseless_record(model, T=200, T_ini=30, N=N_HORIZON, seed=0):
    return collect_record(model, T, T_ini, N, 0.0, np.random.default_rng(seed))


class TestHankel:
    def test_scalar_example(self):
        H = build_hankel(SignalTrajectory(np.array([1.0, 2, 3, 4]), 1), 2)
        assert_allclose(H, [[1, 2, 3], [2, 3, 4]])

    def test_full_depth_single_column(self):
        sig = SignalTrajectory(np.array([1.0, 2, 3]), 1)
        assert_allclose(build_hankel(sig, 3), [[1], [2], [3]])

    def test_vector_blocks(self):
        sig = SignalTrajectory.from_matrix(np.array([[1.0, 2], [3, 4], [5, 6]]))
        H = build_hankel(sig, 2)
        assert H.shape == (4, 2)
        for i in range(2):
            for j in range(2):
                assert_allclose(H[2 * i:2 * i + 2, j], sig.block(i + j))

    def test_depth_exceeding_length_rejected(self):
        with pytest.raises(ValueError):
            build_hankel(SignalTrajectory(np.ones(3), 1), 4)

    @given(st.integers(2, 5), st.integers(1, 3), st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_shift_structure(self, depth, dim, seed):
        rng = np.random.default_rng(seed)
        T = depth + rng.integers(1, 6)
        sig = SignalTrajectory(rng.normal(size=T * dim), dim)
        H = build_hankel(sig, depth)
        for i in range(depth - 1):
            for j in range(H.shape[1] - 1):
                assert_allclose(H[(i + 1) * dim:(i + 2) * dim, j],
                                H[i * dim:(i + 1) * dim, j + 1])


class TestPersistency:
    def test_constant_input_not_pe(self):
        report = check_pe(SignalTrajectory(np.ones(20), 1), 2)
        assert not report.is_pe and report.rank == 1

    def test_random_input_pe(self):
        rng = np.random.default_rng(3)
        report = check_pe(SignalTrajectory(rng.normal(size=50), 1), 2)
        assert report.is_pe and report.rank == 2

    def test_shape_necessary_condition(self):
        # m*L rows exceed T-L+1 columns: can never be full row rank
        rng = np.random.default_rng(4)
        report = check_pe(SignalTrajectory(rng.normal(size=9), 1), 6)
        assert not report.is_pe


class TestPartition:
    def test_single_column(self):
        rng = np.random.default_rng(0)
        model = benchmark_model(1.0)
        rec = collect_record(model, T=14, T_ini=2, N=12, sigma=0.0, rng=rng)
        part = partition_data(rec)
        assert part.columns == 1

    def test_scalar_slicing(self):
        u = SignalTrajectory(np.array([10.0, 11, 12]), 1)
        y = SignalTrajectory(np.array([20.0, 21, 22]), 1)
        rec = DataRecord(u_hist=u, y_hist=y,
                         u_recent=SignalTrajectory(np.array([0.0]), 1),
                         y_recent=SignalTrajectory(np.array([0.0]), 1),
                         T_ini=1, N=1)
        part = partition_data(rec)
        assert_allclose(part.U_p, [[10, 11]])
        assert_allclose(part.U_f, [[11, 12]])
        assert_allclose(part.Y_p, [[20, 21]])
        assert_allclose(part.Y_f, [[21, 22]])

    def test_column_count_matches_arithmetic(self, bench):
        rec = noiseless_record(bench, T=200, T_ini=30, N=11)
        assert partition_data(rec).columns == 160

    def test_excitation_warning(self, bench):
        rec = noiseless_record(bench, T=40, T_ini=10, N=12)
        with pytest.warns(UserWarning, match="excitation"):
            rec.warn_if_short(n_hint=2)  # needs (m+1)(n+T_ini+N)-1 = 47 > 40


class TestLeastSquares:
    def test_noiseless_recovers_truth(self, bench):
        rec = noiseless_record(bench)
        bundle = estimate_ls(partition_data(rec), rec)
        truth_col = true_impulse_response(bench, N_HORIZON)
        truth_y0 = true_free_response(bench, N_HORIZON).values
        assert np.max(np.abs(bundle.g_column - truth_col)) <= 1e-6
        assert np.max(np.abs(bundle.y0_hat - truth_y0)) <= 1e-6

    def test_any_solution_gives_same_product(self, bench):
        # the estimated first block-column is invariant over the solution set
        rec = noiseless_record(bench)
        part = partition_data(rec)
        S = np.vstack([part.U_p, part.Y_p, part.U_f])
        rhs = np.zeros((S.shape[0], 1))
        rhs[60] = 1.0  # unit first input, zero initial condition
        from scipy.linalg import null_space
        G_min = np.linalg.pinv(S, rcond=1e-10) @ rhs
        basis = null_space(S, rcond=1e-10)
        assert basis.shape[1] > 0
        G_other = G_min + basis @ np.linspace(0.5, 1.5, basis.shape[1])[:, None]
        assert_allclose(S @ G_other, rhs, atol=1e-8)
        assert_allclose(part.Y_f @ G_min, part.Y_f @ G_other, atol=1e-8)

    def test_zero_recent_trajectory(self, bench):
        rec = noiseless_record(bench.with_x0([0.0, 0.0]))
        bundle = estimate_ls(partition_data(rec), rec)
        assert_allclose(bundle.y0_hat, 0.0, atol=1e-8)

    def test_leading_block_zeroed(self, bench):
        rec = collect_record(bench, 200, 30, N_HORIZON, 0.05,
                             np.random.default_rng(5))
        bundle = estimate_ls(partition_data(rec), rec)
        assert_allclose(bundle.g_column[:1], 0.0)


class TestMaxLikelihood:
    def test_matches_ls_on_noiseless_data(self, bench):
        rec = noiseless_record(bench)
        part = partition_data(rec)
        ls = estimate_ls(part, rec)
        ml = estimate_ml(part, rec, sigma=1e-8)
        assert np.max(np.abs(ls.g_column - ml.g_column)) <= 1e-4
        assert np.max(np.abs(ls.y0_hat - ml.y0_hat)) <= 1e-4

    def test_zero_recent_trajectory(self, bench):
        from dataclasses import replace
        rec = noiseless_record(bench.with_x0([0.0, 0.0]))
        rec = replace(rec, u_recent=SignalTrajectory.zeros(rec.T_ini, 1),
                      y_recent=SignalTrajectory.zeros(rec.T_ini, 1))
        ml = estimate_ml(partition_data(rec), rec, sigma=0.05)
        assert_allclose(ml.y0_hat, 0.0, atol=1e-8)

    def test_not_worse_than_ls_at_p90(self, bench):
        truth = OracleTruth(true_impulse_response(bench, N_HORIZON),
                            true_free_response(bench, N_HORIZON).values)
        rng = np.random.default_rng(7)
        errs = []
        for _ in range(40):
            rec = collect_record(bench, 200, 30, N_HORIZON, 0.05, rng)
            part = partition_data(rec)
            ls = assess_errors(estimate_ls(part, rec), truth)
            ml = assess_errors(estimate_ml(part, rec, 0.05), truth)
            errs.append((ls.eps2, ls.eps_inf, ml.eps2, ml.eps_inf))
        p90 = np.percentile(np.asarray(errs), 90, axis=0)
        assert p90[2] <= p90[0]
        assert p90[3] <= p90[1]

    def test_unexciting_input_rejected(self, bench):
        rec = noiseless_record(bench)
        flat = DataRecord(u_hist=SignalTrajectory(np.ones(rec.T), 1),
                          y_hist=rec.y_hist, u_recent=rec.u_recent,
                          y_recent=rec.y_recent, T_ini=rec.T_ini, N=rec.N)
        with pytest.raises(RankDeficientDataError):
            estimate_ml(partition_data(flat), flat, sigma=0.01)

    def test_sigma_must_be_positive(self, bench):
        rec = noiseless_record(bench)
        with pytest.raises(ValueError):
            estimate_ml(partition_data(rec), rec, sigma=0.0)


class TestErrorAssessment:
    def test_exact_estimate_has_zero_error(self, bench):
        g = true_impulse_response(bench, N_HORIZON)
        y0 = true_free_response(bench, N_HORIZON).values
        from safesynth.behavior import EstimateBundle
        bundle = EstimateBundle(g_column=g, y0_hat=y0, p=1, m=1)
        out = assess_errors(bundle, OracleTruth(g, y0))
        assert out.eps2 == 0.0 and out.eps_inf == 0.0

    def test_two_by_two_example(self):
        from safesynth.behavior import EstimateBundle
        bundle = EstimateBundle(g_column=np.array([[0.0], [1.1]]),
                                y0_hat=np.zeros(2), p=1, m=1)
        out = assess_errors(bundle, OracleTruth(np.array([[0.0], [1.0]]),
                                                np.zeros(2)))
        assert out.eps2 == pytest.approx(0.1)
        assert out.eps_inf == pytest.approx(0.1)

    def test_errors_grow_with_noise(self, bench):
        truth = OracleTruth(true_impulse_response(bench, N_HORIZON),
                            true_free_response(bench, N_HORIZON).values)
        p90 = []
        for sigma in (0.01, 0.05, 0.1):
            rng = np.random.default_rng(11)
            vals = []
            for _ in range(30):
                rec = collect_record(bench, 200, 30, N_HORIZON, sigma, rng)
                b = assess_errors(estimate_ls(partition_data(rec), rec), truth)
                vals.append((b.eps2, b.eps_inf))
            p90.append(np.percentile(np.asarray(vals), 90, axis=0))
        p90 = np.asarray(p90)
        assert np.all(np.diff(p90[:, 0]) > 0)
        assert np.all(np.diff(p90[:, 1]) > 0)

    def test_bootstrap_mode(self, bench):
        sigma = 0.05
        rec = collect_record(bench, 200, 30, N_HORIZON, sigma,
                             np.random.default_rng(13))
        part = partition_data(rec)
        bundle = estimate_ls(part, rec)
        plan = BootstrapPlan(estimator=estimate_ls, record=rec, sigma=sigma,
                             resamples=25, seed=1)
        out = assess_errors(bundle, plan)
        assert 0 < out.eps2 < 10
        assert 0 < out.eps_inf < 10

    def test_unset_errors_raise(self, bench):
        rec = noiseless_record(bench)
        bundle = estimate_ls(partition_data(rec), rec)
        with pytest.raises(ValueError, match="unset"):
            bundle.require_errors()


class TestCsvRoundTrip:
    def test_record_round_trip(self, bench, tmp_path):
        rec = collect_record(bench, 40, 5, 8, 0.02, np.random.default_rng(2))
        u_path, y_path = record_to_csv(rec, tmp_path)
        back = record_from_csv(u_path, y_path, N=8)
        assert back.T == rec.T and back.T_ini == rec.T_ini
        assert_allclose(back.u_hist.values, rec.u_hist.values)
        assert_allclose(back.y_hist.values, rec.y_hist.values)
        assert_allclose(back.u_recent.values, rec.u_recent.values)
        assert_allclose(back.y_recent.values, rec.y_recent.values)
