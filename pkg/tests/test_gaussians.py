import numpy as np
import pytest

from driftcomp.errors import ConfigError, EmptyClassError, ShapeError
from driftcomp.features import FeatureMatrix
from driftcomp.gaussians import (
    ClassGaussian,
    GaussianBank,
    estimate_gaussian,
    linear_pushforward,
    reestimate,
    sample,
)


def single_class(values, class_id=0):
    values = np.asarray(values, dtype=np.float64)
    return FeatureMatrix(values, np.full(len(values), class_id, dtype=np.int32))


def random_gaussian(d, seed, class_id=0):
    rng = np.random.default_rng(seed)
    mu = rng.standard_normal(d)
    root = rng.standard_normal((d, d))
    sigma = root @ root.T / d
    return ClassGaussian(class_id, mu, (sigma + sigma.T) / 2, 100)


class TestEstimate:
    def test_single_sample(self):
        g = estimate_gaussian(single_class([[1.0, 2.0, 3.0]]))
        np.testing.assert_array_equal(g.mu, [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(g.sigma, np.zeros((3, 3)))

    def test_population_normalization(self):
        # d=1 samples {0, 2}: mean 1, population variance 1 (not 2)
        g = estimate_gaussian(single_class([[0.0], [2.0]]))
        assert g.mu[0] == 1.0
        assert g.sigma[0, 0] == 1.0

    def test_matches_independent_two_pass_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((200, 5))
        g = estimate_gaussian(single_class(x))
        # independent two-pass computation
        mu = np.array([x[:, j].sum() / 200 for j in range(5)])
        sigma = np.zeros((5, 5))
        for row in x:
            delta = row - mu
            sigma += np.outer(delta, delta)
        sigma /= 200
        np.testing.assert_allclose(g.mu, mu, atol=1e-12)
        np.testing.assert_allclose(g.sigma, sigma, atol=1e-12)
        # law of large numbers vs the true standard normal
        np.testing.assert_allclose(g.mu, 0.0, atol=0.2)
        np.testing.assert_allclose(g.sigma, np.eye(5), atol=0.3)

    def test_empty_class_error(self):
        with pytest.raises(EmptyClassError):
            estimate_gaussian(single_class(np.zeros((0, 3))))


class TestPushforward:
    def test_identity(self):
        g = random_gaussian(4, 1)
        out = linear_pushforward(g, np.eye(4))
        np.testing.assert_allclose(out.mu, g.mu)
        np.testing.assert_allclose(out.sigma, g.sigma)
        assert out.n_source == g.n_source

    def test_scalar_scaling(self):
        g = ClassGaussian(0, np.array([1.0, 0.0]), np.eye(2), 10)
        out = linear_pushforward(g, 2 * np.eye(2))
        np.testing.assert_allclose(out.mu, [2.0, 0.0])
        np.testing.assert_allclose(out.sigma, 4 * np.eye(2))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            linear_pushforward(random_gaussian(4, 1), np.eye(3))

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(7)
        g = random_gaussian(5, 3)
        a = rng.standard_normal((5, 5))
        out = linear_pushforward(g, a)
        draws = sample(g, 100_000, seed=9)
        mapped = draws.values @ a.T
        emp_mu = mapped.mean(axis=0)
        emp_sigma = np.cov(mapped.T, bias=True)
        assert np.linalg.norm(emp_mu - out.mu) <= 0.02 * np.linalg.norm(out.mu)
        assert (np.linalg.norm(emp_sigma - out.sigma)
                <= 0.02 * np.linalg.norm(out.sigma))

    def test_preserves_psd(self):
        for seed in range(5):
            g = random_gaussian(6, seed)
            a = np.random.default_rng(100 + seed).standard_normal((6, 6))
            out = linear_pushforward(g, a)
            w = np.linalg.eigvalsh(out.sigma)
            assert w.min() >= -1e-10 * max(np.trace(out.sigma), 1.0)


class TestSample:
    def test_degenerate_gaussian(self):
        mu = np.array([3.0, 4.0, 0.0])
        g = ClassGaussian(0, mu, np.zeros((3, 3)), 1)
        draws = sample(g, 50, seed=1)
        deviation = np.linalg.norm(draws.values - mu, axis=1)
        assert deviation.max() <= 1e-2 * np.linalg.norm(mu)

    def test_determinism(self):
        g = random_gaussian(4, 5)
        a = sample(g, 32, seed=77)
        b = sample(g, 32, seed=77)
        np.testing.assert_array_equal(a.values, b.values)

    def test_moment_recovery(self):
        g = random_gaussian(4, 6)
        draws = sample(g, 10 * 4 * 100, seed=2)
        emp_mu = draws.values.mean(axis=0)
        emp_sigma = np.cov(draws.values.T, bias=True)
        assert np.linalg.norm(emp_mu - g.mu) <= 0.03 * np.linalg.norm(g.mu)
        assert np.linalg.norm(emp_sigma - g.sigma) <= 0.03 * np.linalg.norm(g.sigma)


class TestReestimate:
    def test_round_trip_self_consistency(self):
        g = random_gaussian(6, 9)
        back = reestimate(sample(g, 10 * 6 * 10, seed=3), g.class_id)
        err = (np.linalg.norm(back.sigma - g.sigma)
               / np.linalg.norm(g.sigma))
        assert err <= 0.05
        assert np.linalg.norm(back.mu - g.mu) <= 0.05 * np.linalg.norm(g.mu)

    def test_cross_operation_matches_pushforward(self):
        g = random_gaussian(5, 10)
        a = np.random.default_rng(12).standard_normal((5, 5))
        exact = linear_pushforward(g, a)
        draws = sample(g, 5000, seed=4)
        mapped = FeatureMatrix(draws.values @ a.T, draws.labels)
        approx = reestimate(mapped, g.class_id)
        assert (np.linalg.norm(approx.sigma - exact.sigma)
                <= 0.1 * np.linalg.norm(exact.sigma))

    def test_error_shrinks_with_sample_count(self):
        # averaged over trials, error decreases over {d, 5d, 25d} samples
        d = 6
        g = random_gaussian(d, 20)
        errors = []
        for count in (d + 1, 5 * d, 25 * d):
            trial_errs = []
            for trial in range(8):
                back = reestimate(sample(g, count, seed=1000 + trial),
                                  g.class_id)
                trial_errs.append(np.linalg.norm(back.sigma - g.sigma))
            errors.append(np.mean(trial_errs))
        assert errors[0] > errors[1] > errors[2]


class TestBank:
    def test_round_trip(self, tmp_path):
        bank = GaussianBank()
        for cid in range(3):
            bank.add(random_gaussian(4, cid, class_id=cid))
        path = tmp_path / "bank.gbnk"
        bank.save(path)
        back = GaussianBank.load(path)
        assert back.class_ids() == [0, 1, 2]
        for cid in range(3):
            np.testing.assert_array_equal(back[cid].mu, bank[cid].mu)
            np.testing.assert_array_equal(back[cid].sigma, bank[cid].sigma)
            assert back[cid].n_source == bank[cid].n_source

    def test_duplicate_class_rejected(self):
        bank = GaussianBank()
        bank.add(random_gaussian(3, 0, class_id=1))
        with pytest.raises(Exception):
            bank.add(random_gaussian(3, 1, class_id=1))
