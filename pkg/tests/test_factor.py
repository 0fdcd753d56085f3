import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binomtest

from cfstat import baseline, factor
from cfstat.dataset import RatingsDataset, SplitSpec, SyntheticSpec, generate_synthetic, split
from cfstat.errors import DivergenceError

from oracles import central_gradient, complete, from_dense, random_sparse, rel_error


def probe_rmse(model, probe):
    e = probe.values - model.predict_values(probe.users, probe.movies)
    return float(np.sqrt(np.mean(e * e)))


@pytest.fixture(scope="module")
def rank3():
    """Planted rank-3 data split into train, validation and probe."""
    data, _ = generate_synthetic(SyntheticSpec(300, 100, rank=3, mu=0.0, noise_std=0.1,
                                               density=0.3, seed=21))
    fit_data, probe = split(data, SplitSpec(fraction=0.1, seed=1))
    train, valid = split(fit_data, SplitSpec(fraction=0.1, seed=2))
    return fit_data, train, valid, probe


class TestAlsJoint:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_eckart_young_every_rank(self, seed):
        R = np.random.default_rng(seed).standard_normal((8, 6))
        sv = np.linalg.svd(R, compute_uv=False)
        data = complete(R)
        for k in range(1, 7):
            m = factor.fit_als_joint(data, k, 0.0, 0.0, factor.FitSchedule(max_epochs=5000, tol_obj=1e-15))
            e = data.values - m.predict_values(data.users, data.movies)
            assert float(e @ e) == pytest.approx(float(np.sum(sv[k:] ** 2)), abs=1e-6)

    def test_p_zero_is_baseline(self):
        ds = from_dense(random_sparse(np.random.default_rng(0), 6, 5, 0.6))
        base = baseline.fit_twoway_sparse(ds, 1.0, 1.0)
        m = factor.fit_als_joint(ds, 0, 1.0, 1.0, baseline=base)
        np.testing.assert_array_equal(m.predict_values(ds.users, ds.movies),
                                      base.predict_values(ds.users, ds.movies))

    def test_recovery(self, rank3):
        fit_data, _, _, probe = rank3
        m = factor.fit_als_joint(fit_data, 3, 0.0, 0.0, factor.FitSchedule(max_epochs=300, tol_obj=1e-10))
        assert probe_rmse(m, probe) <= 1.2 * 0.1

    def test_monotone_per_half_sweep(self):
        ds = from_dense(random_sparse(np.random.default_rng(1), 15, 10, 0.4))
        r = ds.values
        # one epoch at a time from the previous state, via the ridge solves directly
        U = np.random.default_rng(0).standard_normal((15, 3)) * 0.1
        V = np.zeros((10, 3))
        S_m = factor._indicator(ds.movies.astype(np.int64), 10)
        S_u = factor._indicator(ds.users.astype(np.int64), 15)
        objs = [factor.als_objective(ds, U, V, 0.5, 0.8, r)]
        for _ in range(20):
            V, _ = factor._ridge_half_sweep(S_m, U[ds.users], r, 0.8, 3)
            objs.append(factor.als_objective(ds, U, V, 0.5, 0.8, r))
            U, _ = factor._ridge_half_sweep(S_u, V[ds.movies], r, 0.5, 3)
            objs.append(factor.als_objective(ds, U, V, 0.5, 0.8, r))
        assert all(b <= a + 1e-10 * a for a, b in zip(objs, objs[1:]))

    def test_singular_rows_flagged(self):
        # movie 2 has a single rating, so its Gram matrix is rank one for p = 2
        X = np.full((4, 3), np.nan)
        X[:, :2] = np.random.default_rng(2).normal(size=(4, 2))
        X[0, 2] = 1.0
        m = factor.fit_als_joint(from_dense(X), 2, 0.0, 0.0, factor.FitSchedule(max_epochs=20))
        assert m.fit_log["singular_rows"] > 0
        assert np.all(np.isfinite(m.U)) and np.all(np.isfinite(m.V))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 1000), c=st.floats(0.1, 10))
    def test_gauge_covariance(self, seed, c):
        ds = from_dense(random_sparse(np.random.default_rng(seed), 8, 6, 0.5))
        m = factor.fit_als_joint(ds, 2, 0.0, 0.0, factor.FitSchedule(max_epochs=20, seed=seed))
        scaled = factor.FactorModel(m.U.copy(), m.V.copy())
        scaled.U[:, 0] *= c
        scaled.V[:, 0] /= c
        users, movies = np.meshgrid(np.arange(8), np.arange(6), indexing="ij")
        np.testing.assert_allclose(scaled.predict_values(users.ravel(), movies.ravel()),
                                   m.predict_values(users.ravel(), movies.ravel()), rtol=0, atol=1e-10)


class TestAlsSequential:
    def test_energy_nonincreasing(self):
        R = np.random.default_rng(3).standard_normal((10, 7))
        m = factor.fit_als_sequential(complete(R), 5, lam=0.0,
                                      schedule=factor.FitSchedule(max_epochs=2000, tol_obj=1e-14))
        energy = factor.feature_energy(m)
        assert np.all(np.diff(energy) <= 1e-8 * energy[0])
        sv = np.linalg.svd(R, compute_uv=False)
        np.testing.assert_allclose(np.sqrt(energy), sv[:5], rtol=1e-5)

    def test_infinite_shrinkage(self):
        R = np.random.default_rng(4).standard_normal((10, 7))
        m = factor.fit_als_sequential(complete(R), 3, lambda_schedule=[0.0, np.inf, np.inf])
        energy = factor.feature_energy(m)
        assert energy[0] > 0 and np.all(energy[1:] == 0)
        assert m.fit_log["features"][1]["zero_residual"]

    def test_first_feature_is_top_singular_vector(self):
        R = np.random.default_rng(5).standard_normal((9, 6))
        m = factor.fit_als_sequential(complete(R), 1, schedule=factor.FitSchedule(max_epochs=2000,
                                                                                   tol_obj=1e-14))
        top = np.linalg.svd(R)[2][0]
        v = m.V[:, 0]
        assert abs(v @ top) / np.linalg.norm(v) > 0.999

    def test_default_schedule_increases(self):
        lams = factor.default_lambda_schedule(2.0, 4)
        assert lams == pytest.approx([2.2, 2.4, 2.6, 2.8])

    def test_rejects_decreasing_schedule(self):
        ds = complete(np.ones((3, 3)))
        with pytest.raises(ValueError):
            factor.fit_als_sequential(ds, 2, lambda_schedule=[2.0, 1.0])

    def test_ridge_mode(self):
        R = np.random.default_rng(6).standard_normal((8, 5))
        m = factor.fit_als_sequential(complete(R), 2, shrink="ridge", lam=1.0)
        assert m.reg["convention"] == "sequential-ridge"
        assert np.all(np.isfinite(m.U))


class TestSgd:
    def test_single_observation_update(self):
        ds = RatingsDataset([0], [0], np.array([2.0]))
        U = np.ones((1, 1))
        V = np.ones((1, 1))
        from cfstat import _kernels
        _kernels.sgd_epoch(np.array([0]), np.array([0]), np.array([2.0]), np.array([0]),
                           U, V, np.zeros(1), np.zeros(1), 0.1, 0, 1)
        assert U[0, 0] == pytest.approx(1.2) and V[0, 0] == pytest.approx(1.2)
        assert ds.n == 1

    @pytest.mark.parametrize("conv", [factor.PER_PARAMETER, factor.PER_OBSERVATION])
    def test_gradient_check(self, conv):
        rng = np.random.default_rng(7)
        X = random_sparse(rng, 4, 3, 0.7)
        ds = from_dense(X)
        U = rng.standard_normal((4, 2))
        V = rng.standard_normal((3, 2))
        gU, gV = factor.sgd_gradient(ds, U, V, 0.9, conv)
        nU = central_gradient(lambda A: factor.sgd_objective(ds, A, V, 0.9, conv), U.copy())
        nV = central_gradient(lambda B: factor.sgd_objective(ds, U, B, 0.9, conv), V.copy())
        assert rel_error(np.concatenate([gU.ravel(), gV.ravel()]),
                         np.concatenate([nU.ravel(), nV.ravel()])) < 1e-6

    def test_epoch_descends_on_objective(self):
        """With a tiny step one epoch moves along minus the full gradient."""
        rng = np.random.default_rng(8)
        ds = from_dense(random_sparse(rng, 6, 5, 0.6))
        U = rng.standard_normal((6, 2)) * 0.5
        V = rng.standard_normal((5, 2)) * 0.5
        for conv in (factor.PER_PARAMETER, factor.PER_OBSERVATION):
            reg_u, reg_v = factor._reg_arrays(ds, 0.7, conv, 6, 5)
            U1, V1 = U.copy(), V.copy()
            eta = 1e-7
            from cfstat import _kernels
            _kernels.sgd_epoch(ds.users.astype(np.int64), ds.movies.astype(np.int64), ds.values,
                               np.arange(ds.n), U1, V1, reg_u, reg_v, eta, 0, 2)
            gU, gV = factor.sgd_gradient(ds, U, V, 0.7, conv)
            assert rel_error(-(U1 - U) / eta, gU) < 1e-4
            assert rel_error(-(V1 - V) / eta, gV) < 1e-4

    def test_matches_als_at_zero_penalty(self):
        R = np.random.default_rng(9).normal(0, 1, (6, 5))
        R[0, 0] = np.nan
        ds = from_dense(R)
        als = factor.fit_als_joint(ds, 2, 0.0, 0.0, factor.FitSchedule(max_epochs=5000, tol_obj=1e-15))
        sgd = factor.fit_sgd(ds, 2, factor.PER_PARAMETER, 0.0,
                             factor.FitSchedule(max_epochs=20000, eta=0.02, eta_decay=0.9995,
                                                tol_obj=1e-14, init_std=0.1))
        a = als.fit_log["objective"]
        b = sgd.fit_log["objective"]
        assert b == pytest.approx(a, abs=1e-4)

    def test_recovery_with_early_stopping(self, rank3):
        _, train, valid, probe = rank3
        m = factor.fit_sgd(train, 3, factor.PER_PARAMETER, 0.5,
                           factor.FitSchedule(max_epochs=1000, tol_obj=1e-7, init_std=0.1, seed=3),
                           probe=valid)
        assert probe_rmse(m, probe) <= 0.12
        assert m.fit_log["blocks"][0]["best_probe_rmse"] == pytest.approx(probe_rmse(m, valid))

    def test_multi_start_stability(self, rank3):
        _, train, valid, probe = rank3
        scores, preds = [], []
        for seed in range(5):
            m = factor.fit_sgd(train, 3, factor.PER_PARAMETER, 0.5,
                               factor.FitSchedule(max_epochs=1000, tol_obj=1e-7, init_std=0.1, seed=seed),
                               probe=valid)
            scores.append(probe_rmse(m, probe))
            preds.append(m.predict_values(probe.users, probe.movies))
        assert (max(scores) - min(scores)) / min(scores) <= 0.005
        avg = np.mean(preds, axis=0)
        assert np.sqrt(np.mean((probe.values - avg) ** 2)) <= min(scores) + 1e-3

    def test_feature_at_a_time(self):
        R = np.random.default_rng(10).standard_normal((8, 6))
        m = factor.fit_sgd(complete(R), 2, factor.PER_OBSERVATION, 0.0,
                           factor.FitSchedule(max_epochs=2000, eta=0.02, tol_obj=1e-10, init_std=0.1),
                           mode="feature_at_a_time")
        assert len(m.fit_log["blocks"]) == 2
        sv = np.linalg.svd(R, compute_uv=False)
        e = complete(R).values - m.predict_values(*np.nonzero(np.ones((8, 6))))
        assert float(e @ e) == pytest.approx(float(np.sum(sv[2:] ** 2)), rel=1e-3)

    def test_large_step_diverges(self):
        ds = from_dense(random_sparse(np.random.default_rng(11), 20, 10, 0.5))
        with pytest.raises(DivergenceError):
            factor.fit_sgd(ds, 3, factor.PER_OBSERVATION, 0.0, factor.FitSchedule(eta=5.0, init_std=0.5))

    def test_deterministic(self):
        ds = from_dense(random_sparse(np.random.default_rng(12), 20, 10, 0.5))
        sch = factor.FitSchedule(max_epochs=20, seed=7)
        a = factor.fit_sgd(ds, 2, factor.PER_PARAMETER, 1.0, sch)
        b = factor.fit_sgd(ds, 2, factor.PER_PARAMETER, 1.0, sch)
        assert a.to_json() == b.to_json()

    def test_unknown_convention(self):
        ds = complete(np.ones((2, 2)))
        with pytest.raises(ValueError):
            factor.fit_sgd(ds, 1, "nope")


def planted_nsvd(seed, I=600, J=150, p=2, density=0.05, noise=0.1):
    """Ratings v_j'(|J(i)|^-1/2 sum_{J(i)} y) + noise.

    J(i) is the user's training set, so the fitted model can represent the
    planted one exactly; probe cells are drawn from the remaining cells.
    """
    rng = np.random.default_rng(seed)
    mask = rng.random((I, J)) < density
    mask[np.arange(I), rng.integers(0, J, I)] = True
    probe = (rng.random((I, J)) < 0.25 * density) & ~mask
    Y = rng.normal(0, 1, (J, p))
    V = rng.normal(0, 1, (J, p))
    Z = (mask @ Y) / np.sqrt(mask.sum(1))[:, None]

    def observe(cells):
        u, m = np.nonzero(cells)
        r = np.einsum("nk,nk->n", Z[u], V[m]) + rng.normal(0, noise, u.size)
        return RatingsDataset(u, m, r, num_users=I, num_movies=J)

    return observe(mask), observe(probe)


class TestNsvd:
    def test_zero_secondary_matches_sgd_family(self):
        R = np.random.default_rng(13).normal(0, 1, (6, 5))
        ds = complete(R)
        sch = factor.FitSchedule(max_epochs=20000, eta=0.02, eta_decay=0.9995, tol_obj=1e-14, init_std=0.1)
        nsvd = factor.fit_nsvd(ds, 2, 0.3, sch, train_secondary=False)
        sgd = factor.fit_sgd(ds, 2, factor.PER_PARAMETER, 0.3, sch)
        assert np.all(nsvd.Y == 0)
        assert nsvd.fit_log["objective"] == pytest.approx(sgd.fit_log["objective"], abs=1e-4)

    def test_composite_single_rating(self):
        ds = RatingsDataset([0, 1, 1], [2, 0, 1], np.array([3, 4, 5]), num_movies=3)
        rng = np.random.default_rng(0)
        U = rng.normal(size=(2, 2))
        Y = rng.normal(size=(3, 2))
        Z = factor.composite_user_factors(ds, U, Y)
        np.testing.assert_array_equal(Z[0], U[0] + Y[2])
        np.testing.assert_allclose(Z[1], U[1] + (Y[0] + Y[1]) / np.sqrt(2))

    def test_gradient_matches_kernel(self):
        rng = np.random.default_rng(14)
        ds = from_dense(random_sparse(rng, 6, 5, 0.6, integer=False))
        U, V, Y = (rng.normal(0, 0.5, (n, 2)) for n in (6, 5, 5))
        reg_u, reg_v = factor._reg_arrays(ds, 0.7, factor.PER_PARAMETER, 6, 5)
        U1, V1, Y1 = U.copy(), V.copy(), Y.copy()
        eta = 1e-7
        from cfstat import _kernels
        _kernels.nsvd_epoch(ds.user_ptr.astype(np.int64), ds.movies.astype(np.int64), ds.values,
                            np.arange(6), U1, V1, Y1, reg_u, reg_v, reg_v.copy(), eta, True, True)
        for A, A1, which in ((U, U1, 0), (V, V1, 1), (Y, Y1, 2)):
            def f(x, which=which):
                args = [U, V, Y]
                args[which] = x
                return factor.nsvd_objective(ds, *args, 0.7, ds.values)
            assert rel_error(-(A1 - A) / eta, central_gradient(f, A.copy())) < 1e-4

    def test_beats_svd_when_users_are_starved(self):
        wins = 0
        for seed in range(20):
            train, probe = planted_nsvd(seed)
            sch = factor.FitSchedule(max_epochs=300, eta=0.002, init_std=0.1, tol_obj=1e-6, seed=seed)
            nsvd = factor.fit_nsvd(train, 2, 0.5, sch, train_user=False)
            svd = factor.fit_sgd(train, 2, factor.PER_PARAMETER, 0.5, sch)
            wins += probe_rmse(nsvd, probe) < probe_rmse(svd, probe)
        assert binomtest(wins, 20, 0.5, alternative="greater").pvalue < 0.05

    def test_unseen_user_uses_baseline(self):
        ds = from_dense(random_sparse(np.random.default_rng(15), 6, 5, 0.6))
        base = baseline.fit_constant(ds)
        m = factor.fit_nsvd(ds, 2, 0.1, factor.FitSchedule(max_epochs=5), baseline=base)
        assert m.predict_values([99], [0])[0] == base.mu


class TestPredict:
    def test_zero_factors(self):
        base = baseline.BaselineModel(3.0, np.array([0.5, -0.5]), np.array([0.25]))
        m = factor.FactorModel(np.zeros((2, 2)), np.zeros((1, 2)), baseline=base)
        np.testing.assert_array_equal(factor.predict(m, [0, 1], [0, 0]).values, [3.75, 2.75])

    def test_clip(self):
        m = factor.FactorModel(np.array([[1.0]]), np.array([[5.7]]))
        assert factor.predict(m, [0], [0], clip_range=(1, 5)).values[0] == 5.0
        assert factor.predict(m, [0], [0]).values[0] == pytest.approx(5.7)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=1000))
    def test_clip_idempotent(self, xs):
        x = np.array(xs)
        once = factor.clip(x)
        np.testing.assert_array_equal(factor.clip(once), once)
        assert once.min() >= 1 and once.max() <= 5

    def test_serialization(self, tmp_path):
        ds = from_dense(random_sparse(np.random.default_rng(16), 6, 5, 0.6))
        base = baseline.fit_twoway_sparse(ds, 1.0, 1.0)
        m = factor.fit_nsvd(ds, 2, 0.1, factor.FitSchedule(max_epochs=5), baseline=base)
        path = tmp_path / "f.json"
        path.write_text(m.to_json())
        back = factor.load_factor(path)
        np.testing.assert_array_equal(back.predict_values(ds.users, ds.movies),
                                      m.predict_values(ds.users, ds.movies))
        assert json.loads(path.read_text())["schema_version"] == factor.SCHEMA_VERSION
