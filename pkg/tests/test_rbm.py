import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfstat import rbm
from cfstat.dataset import RatingsDataset

from oracles import central_gradient, rbm_joint, rel_error


def random_model(seed, J=3, F=2, K=3, scale=0.5):
    rng = np.random.default_rng(seed)
    return rbm.RbmModel(rng.normal(0, scale, (J, F, K)), rng.normal(0, scale, (J, K)),
                        rng.normal(0, scale, F))


def tiny_data(seed, I=4, J=3, K=3):
    rng = np.random.default_rng(seed)
    u, m = np.divmod(np.arange(I * J), J)
    return RatingsDataset(u, m, rng.integers(1, K + 1, I * J), num_users=I, num_movies=J, K=K)


class TestConditionals:
    @pytest.mark.parametrize("seed", range(3))
    def test_against_enumeration(self, seed):
        model = random_model(seed)
        vs, hs, table = rbm_joint(model.W, model.b_vis, model.b_hid)
        movies = np.arange(3)
        hs = np.array(hs, float)
        for a, v in enumerate(vs):
            ph = table[a] / table[a].sum()
            expect = hs.T @ ph
            got = rbm.hidden_given_visible(model, movies, np.array(v))
            np.testing.assert_allclose(got, expect, rtol=0, atol=1e-12)
        for b, h in enumerate(hs):
            col = table[:, b] / table[:, b].sum()
            got = rbm.visible_given_hidden(model, h, movies)
            for j in range(3):
                marg = np.zeros(3)
                for a, v in enumerate(vs):
                    marg[v[j]] += col[a]
                np.testing.assert_allclose(got[j], marg, rtol=0, atol=1e-12)

    def test_energy_and_free_energy(self):
        model = random_model(5)
        vs, hs, table = rbm_joint(model.W, model.b_vis, model.b_hid)
        movies = np.arange(3)
        for a, v in enumerate(vs[:7]):
            for b, h in enumerate(hs):
                assert np.exp(-rbm.energy(model, movies, np.array(v), h)) == pytest.approx(table[a, b])
            assert np.exp(-rbm.free_energy(model, movies, np.array(v))) == pytest.approx(table[a].sum())

    def test_subset_marginal(self):
        """An RBM over a user's rated subset is the full model restricted to those movies."""
        model = random_model(6, J=4)
        sub = np.array([0, 2])
        small = rbm.RbmModel(model.W[sub], model.b_vis[sub], model.b_hid)
        lv = np.array([1, 2])
        np.testing.assert_allclose(rbm.hidden_given_visible(model, sub, lv),
                                   rbm.hidden_given_visible(small, np.arange(2), lv))


class TestExact:
    def test_log_likelihood(self):
        model = random_model(7)
        data = tiny_data(7, J=3)
        vs, _, table = rbm_joint(model.W, model.b_vis, model.b_hid)
        logZ = np.log(table.sum())
        index = {v: a for a, v in enumerate(vs)}
        dense = data.to_dense().astype(int) - 1
        expect = np.mean([np.log(table[index[tuple(row)]].sum()) - logZ for row in dense])
        assert rbm.exact_log_likelihood(model, data) == pytest.approx(expect, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_finite_difference(self, seed):
        model = random_model(seed)
        # leave a hole so users rate different subsets
        data = RatingsDataset([0, 0, 0, 1, 1, 2], [0, 1, 2, 0, 2, 1], np.array([1, 3, 2, 2, 2, 3]), K=3)
        shapes = [p.shape for p in model.params()]
        sizes = [int(np.prod(s)) for s in shapes]
        theta0 = np.concatenate([p.ravel() for p in model.params()])

        def unpack(theta):
            parts = np.split(theta, np.cumsum(sizes)[:-1])
            return rbm.RbmModel(*(p.reshape(s) for p, s in zip(parts, shapes)))

        num = central_gradient(lambda t: rbm.exact_log_likelihood(unpack(t), data), theta0)
        got = np.concatenate([g.ravel() for g in rbm.exact_gradient(model, data)])
        assert rel_error(got, num) < 1e-6

    def test_mean_field_close_to_exact(self):
        model = random_model(8, J=6, F=3, K=5, scale=0.1)
        movies, levels = np.array([0, 2, 3]), np.array([4, 0, 2])
        mf = rbm.expected_rating(model, movies, levels, np.array([1, 4, 5]))
        ex = rbm.exact_expected_rating(model, movies, levels, np.array([1, 4, 5]))
        np.testing.assert_allclose(mf, ex, atol=0.05)


class TestCd:
    def test_unrated_movies_untouched(self):
        data = RatingsDataset([0, 0, 1], [0, 1, 0], np.array([1, 3, 2]), num_movies=4, K=3)
        model = rbm.init_rbm(data, 2, K=3, seed=1, init_std=0.1)
        g = rbm.cd_gradient(model, data, 1, seed=2)
        assert np.all(g[0][2:] == 0) and np.all(g[1][2:] == 0)
        trained = rbm.train_cd(model, data, epochs=5, eta=0.1, minibatch=1, seed=3)
        np.testing.assert_array_equal(trained.W[2:], model.W[2:])
        np.testing.assert_array_equal(trained.b_vis[2:], model.b_vis[2:])

    def test_user_order_irrelevant(self):
        data = tiny_data(9, I=6)
        model = rbm.init_rbm(data, 3, K=3, seed=0, init_std=0.3)
        full = rbm.cd_gradient(model, data, 2, seed=4)
        parts = [rbm.cd_gradient(model, data, 2, seed=4, users=[i]) for i in (5, 3, 1, 0, 2, 4)]
        for k in range(3):
            np.testing.assert_allclose(full[k], np.mean([p[k] for p in parts], axis=0), atol=1e-15)
        back = rbm.cd_gradient(model, data, 2, seed=4, users=[4, 2, 0])
        fwd = rbm.cd_gradient(model, data, 2, seed=4, users=[0, 2, 4])
        for a, b in zip(back, fwd):
            np.testing.assert_array_equal(a, b)

    def test_cd1_estimator_unbiased(self):
        """Monte Carlo mean of the CD-1 estimate matches the expectation of the
        plainly sampled CD-1 statistics, enumerated over h0 and v1."""
        import itertools
        from scipy.special import expit

        model = random_model(16, J=2, F=2, K=3, scale=0.8)
        data = RatingsDataset([0, 0], [0, 1], np.array([3, 1]), K=3)
        movies, levels = np.array([0, 1]), np.array([2, 0])
        ph0 = expit(rbm.hidden_input(model, movies, levels))
        expect_W = np.zeros_like(model.W)
        expect_W[movies, :, levels] += ph0
        for h in itertools.product((0.0, 1.0), repeat=2):
            h = np.array(h)
            p_h = np.prod(np.where(h == 1, ph0, 1 - ph0))
            pv = rbm.visible_given_hidden(model, h, movies)
            for v in itertools.product(range(3), repeat=2):
                v = np.array(v)
                p_v = pv[0, v[0]] * pv[1, v[1]]
                expect_W[movies, :, v] -= p_h * p_v * expit(rbm.hidden_input(model, movies, v))
        draws = np.array([rbm.cd_gradient(model, data, 1, seed=s)[0] for s in range(4000)])
        se = draws.std(axis=0) / np.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - expect_W) <= 5 * se + 1e-12)

    def test_training_deterministic(self):
        data = tiny_data(10)
        model = rbm.init_rbm(data, 2, K=3, seed=0)
        a = rbm.train_cd(model, data, epochs=3, eta=0.2, minibatch=2, seed=5)
        b = rbm.train_cd(model, data, epochs=3, eta=0.2, minibatch=2, seed=5)
        np.testing.assert_array_equal(a.W, b.W)
        assert not np.array_equal(a.W, model.W)

    def test_bias_gradient_at_init_matches_data(self):
        """With W = 0 the visible bias statistics reduce to data minus model marginals."""
        data = tiny_data(11, I=30)
        model = rbm.init_rbm(data, 2, K=3, init_std=0.0)
        exact = rbm.exact_gradient(model, data)
        counts = np.zeros((3, 3))
        np.add.at(counts, (data.movies, data.ratings - 1), 1.0)
        prop = counts / counts.sum(1, keepdims=True)
        model_marg = np.maximum(prop, 1e-4)
        model_marg /= model_marg.sum(1, keepdims=True)
        np.testing.assert_allclose(exact[1], prop - model_marg, atol=1e-12)

    def test_rejects_real_ratings(self):
        data = RatingsDataset([0, 1], [0, 0], np.array([1.5, 2.0]))
        with pytest.raises(ValueError):
            rbm.init_rbm(data, 2, K=5)

    def test_rejects_level_above_k(self):
        data = RatingsDataset([0, 1], [0, 0], np.array([1, 5]))
        with pytest.raises(ValueError):
            rbm.init_rbm(data, 2, K=3)

    def test_cd_steps_validated(self):
        data = tiny_data(12)
        model = rbm.init_rbm(data, 2, K=3)
        with pytest.raises(ValueError):
            rbm.cd_gradient(model, data, cd_steps=-1)


class TestPredict:
    @settings(max_examples=30, deadline=None)
    @given(perm=st.permutations(range(4)))
    def test_rated_order_irrelevant(self, perm):
        model = random_model(13, J=6, F=3, K=5)
        movies, levels = np.array([0, 1, 3, 5]), np.array([4, 0, 2, 1])
        p = np.array(perm)
        a = rbm.expected_rating(model, movies, levels, np.array([2, 4]))
        b = rbm.expected_rating(model, movies[p], levels[p], np.array([2, 4]))
        np.testing.assert_allclose(a, b, rtol=1e-13)
        assert np.all((a >= 1) & (a <= 5))

    def test_fallbacks(self):
        data = tiny_data(14)
        model = rbm.init_rbm(data, 2, K=3)
        pred = rbm.predict_rbm(model, [0, 99, 1], [1, 0, 7], data)
        assert pred.info["fallbacks"] == 2
        assert pred.values[1] == pytest.approx(data.values.mean())
        assert pred.values[2] == pytest.approx(data.values.mean())

    def test_serialization(self, tmp_path):
        model = random_model(15)
        path = tmp_path / "m.json"
        path.write_text(model.to_json())
        back = rbm.load_rbm(path)
        for a, b in zip(model.params(), back.params()):
            np.testing.assert_array_equal(a, b)
