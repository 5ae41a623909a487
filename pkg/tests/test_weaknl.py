import numpy as np
import pytest

from driftcomp.errors import ConfigError, ShapeError
from driftcomp.features import FeatureMatrix, l2_normalize
from driftcomp.gaussians import ClassGaussian, linear_pushforward
from driftcomp.linear_op import fit_ridge
from driftcomp.simulate import gen_stream, preset
from driftcomp.weaknl import (
    Mlp,
    OperatorTrainConfig,
    WeakNonlinearOperator,
    forward,
    init_weaknl,
    mc_compensate,
    mlp_loss_and_grads,
    train_mlpdc,
    train_weaknl,
    weaknl_loss_and_grads,
)
from oracles import numeric_gradient


def make_pair(d, n, seed, drift=None):
    rng = np.random.default_rng(seed)
    prev = rng.standard_normal((n, d))
    prev /= np.linalg.norm(prev, axis=1, keepdims=True)
    curr = prev if drift is None else drift(prev)
    labels = np.zeros(n, dtype=np.int32)
    return FeatureMatrix(prev, labels), FeatureMatrix(curr, labels)


class TestInit:
    def test_initial_forward_blend(self):
        op = init_weaknl(6, 6, seed=3)
        f = np.random.default_rng(0).standard_normal(6)
        np.testing.assert_allclose(op.forward(f),
                                   0.9 * f + 0.1 * op.psi.forward(f[None])[0],
                                   atol=1e-12)
        assert op.c1 == pytest.approx(0.9)
        assert op.c2 == pytest.approx(0.1)
        np.testing.assert_array_equal(op.a, np.eye(6))

    def test_deterministic(self):
        a = init_weaknl(5, 7, seed=11)
        b = init_weaknl(5, 7, seed=11)
        np.testing.assert_array_equal(a.psi.w1, b.psi.w1)
        np.testing.assert_array_equal(a.psi.w2, b.psi.w2)

    def test_psi_output_bounded_by_weight_arithmetic(self):
        op = init_weaknl(4, 4, seed=7)
        f = np.array([1.0, 0.0, 0.0, 0.0])
        # |psi(f)|_inf <= |W2|_inf-row-sum * max hidden, hidden <= |W1 f|
        hidden_bound = np.abs(op.psi.w1 @ f).max()
        out_bound = np.abs(op.psi.w2).sum(axis=1).max() * hidden_bound
        assert np.abs(op.psi.forward(f[None])).max() <= out_bound + 1e-12


class TestForward:
    def test_pure_linear_identity(self):
        op = init_weaknl(4, 4, seed=1)
        op.logits[:] = [50.0, -50.0]  # c = (1, 0)
        f = np.random.default_rng(1).standard_normal(4)
        np.testing.assert_allclose(op.forward(f), f, atol=1e-12)

    def test_pure_nonlinear_corner(self):
        op = init_weaknl(4, 4, seed=2)
        op.logits[:] = [-50.0, 50.0]  # c = (0, 1)
        f = np.random.default_rng(2).standard_normal(4)
        np.testing.assert_allclose(op.forward(f), op.psi.forward(f[None])[0],
                                   atol=1e-12)

    def test_batch_matches_single_rows(self):
        op = init_weaknl(5, 5, seed=3)
        batch = np.random.default_rng(3).standard_normal((2, 5))
        stacked = np.stack([op.forward(batch[0]), op.forward(batch[1])])
        np.testing.assert_allclose(op.forward(batch), stacked, atol=1e-12)

    def test_shape_mismatch(self):
        op = init_weaknl(5, 5, seed=4)
        with pytest.raises(ShapeError):
            op.forward(np.zeros(4))


class TestGradients:
    def test_weaknl_matches_finite_differences(self):
        d, h, n = 5, 7, 12
        rng = np.random.default_rng(21)
        op = init_weaknl(d, h, seed=9, gamma2=0.5)
        op.logits[:] = rng.standard_normal(2) * 0.3 + op.logits
        x = rng.standard_normal((n, d))
        y = rng.standard_normal((n, d))
        _, grads, _ = weaknl_loss_and_grads(op, x, y)
        params = {"a": op.a, "w1": op.psi.w1, "b1": op.psi.b1,
                  "w2": op.psi.w2, "b2": op.psi.b2, "logits": op.logits}
        for name, param in params.items():
            numeric = numeric_gradient(
                lambda: weaknl_loss_and_grads(op, x, y)[0], param)
            scale = max(np.abs(numeric).max(), 1e-8)
            assert np.abs(grads[name] - numeric).max() <= 1e-4 * scale, name

    def test_mlp_matches_finite_differences(self):
        d, n = 5, 10
        rng = np.random.default_rng(22)
        mlp = Mlp.init(d, 7, rng)
        x = rng.standard_normal((n, d))
        y = rng.standard_normal((n, d))
        _, grads = mlp_loss_and_grads(mlp, x, y)
        for name, param in (("w1", mlp.w1), ("b1", mlp.b1),
                            ("w2", mlp.w2), ("b2", mlp.b2)):
            numeric = numeric_gradient(
                lambda: mlp_loss_and_grads(mlp, x, y)[0], param)
            scale = max(np.abs(numeric).max(), 1e-8)
            assert np.abs(grads[name] - numeric).max() <= 1e-4 * scale, name


class TestTraining:
    def test_zero_drift_loss_decreases_and_c1_grows(self):
        prev, curr = make_pair(8, 64, seed=5)
        op = init_weaknl(8, 8, seed=6)
        c1_before = op.c1
        trained = train_weaknl(op, prev, curr,
                               OperatorTrainConfig(steps=800, seed=7))
        early = np.mean(trained.train_log[:20])
        late = np.mean(trained.train_log[-20:])
        assert late < early
        assert trained.c1 > c1_before
        assert trained.final_mse < 1e-3

    def test_simplex_invariant_along_training(self):
        prev, curr = make_pair(6, 40, seed=8)
        op = train_weaknl(init_weaknl(6, 6, seed=9), prev, curr,
                          OperatorTrainConfig(steps=300, seed=10))
        c = op.c
        assert c.min() >= 0.0
        assert c.sum() == pytest.approx(1.0, abs=1e-12)

    def test_huge_gamma2_collapses_to_linear(self):
        cfg = preset("rotation", seed=3)
        stream = gen_stream(cfg)
        rec = stream.records[1]
        op = init_weaknl(cfg.d, cfg.d, seed=11, gamma2=1e6)
        # The c-gradient decays together with c2, so the adaptive second
        # moment caps how fast the logits can travel; saturating the simplex
        # takes a longer, hotter schedule than the default.
        op = train_weaknl(op, l2_normalize(rec.train_prev),
                          l2_normalize(rec.train_curr),
                          OperatorTrainConfig(steps=10_000, lr_start=1e-2,
                                              lr_end=5e-3, seed=12))
        assert op.c1 >= 0.999

    def test_smoothed_loss_improves_over_training(self):
        for name in ("rotation", "weak_nonlinear_small"):
            cfg = preset(name, seed=4)
            rec = gen_stream(cfg).records[1]
            op = train_weaknl(init_weaknl(cfg.d, cfg.d, seed=13),
                              l2_normalize(rec.train_prev),
                              l2_normalize(rec.train_curr),
                              OperatorTrainConfig(steps=5000, seed=14))
            log = np.asarray(op.train_log)
            smooth = []
            acc = log[0]
            for value in log:
                acc = 0.98 * acc + 0.02 * value
                smooth.append(acc)
            assert smooth[4999] < smooth[99]

    def test_weaknl_beats_ridge_on_weakly_nonlinear_drift(self):
        wins = []
        for seed in range(5):
            cfg = preset("weak_nonlinear", seed=seed, tasks=2,
                         classes_per_task=8, d=24, train_per_class=30)
            rec = gen_stream(cfg).records[1]
            prev = l2_normalize(rec.train_prev)
            curr = l2_normalize(rec.train_curr)
            ridge = fit_ridge(prev, curr)
            op = train_weaknl(init_weaknl(cfg.d, cfg.d, seed=seed), prev, curr,
                              OperatorTrainConfig(steps=3000, seed=seed))
            wins.append(op.final_mse - ridge.residual_mse)
        assert np.median(wins) <= 0.0

    def test_mlpdc_deterministic(self):
        prev, curr = make_pair(6, 30, seed=15)
        cfg = OperatorTrainConfig(steps=200, weight_decay=1e-6, seed=16)
        a = train_mlpdc(prev, curr, cfg)
        b = train_mlpdc(prev, curr, cfg)
        np.testing.assert_array_equal(a.w1, b.w1)
        np.testing.assert_array_equal(a.b2, b.b2)

    def test_mlpdc_zero_drift_loss_decreases(self):
        prev, curr = make_pair(6, 48, seed=17)
        mlp = train_mlpdc(prev, curr,
                          OperatorTrainConfig(steps=1000, weight_decay=1e-6,
                                              seed=18))
        initial = float(np.mean((Mlp.init(6, 6, np.random.default_rng(18))
                                 .forward(prev.values) - curr.values) ** 2))
        final = float(np.mean((mlp.forward(prev.values) - curr.values) ** 2))
        assert final < initial

    def test_mlpdc_overfits_small_rotation_tasks(self):
        # held-out pair MSE: pure MLP >= ridge, the overfitting phenomenon
        gaps = []
        for seed in range(5):
            # double the task size so half the pairs can be held out
            cfg = preset("rotation_small", seed=seed, train_per_class=8)
            rec = gen_stream(cfg).records[1]
            prev = l2_normalize(rec.train_prev)
            curr = l2_normalize(rec.train_curr)
            n_fit = 2 * cfg.d
            fit_p = FeatureMatrix(prev.values[:n_fit], prev.labels[:n_fit])
            fit_c = FeatureMatrix(curr.values[:n_fit], curr.labels[:n_fit])
            held_p, held_c = prev.values[n_fit:], curr.values[n_fit:]
            ridge = fit_ridge(fit_p, fit_c)
            mlp = train_mlpdc(fit_p, fit_c,
                              OperatorTrainConfig(steps=5000,
                                                  weight_decay=1e-6,
                                                  seed=seed))
            ridge_mse = np.mean((held_p @ ridge.a.T - held_c) ** 2)
            mlp_mse = np.mean((mlp.forward(held_p) - held_c) ** 2)
            gaps.append(mlp_mse - ridge_mse)
        assert np.median(gaps) >= 0.0


def feature_like_gaussian(d, seed, class_id=0):
    """A Gaussian with the geometry the pipeline actually handles:
    unit-norm mean and a tight within-class covariance."""
    rng = np.random.default_rng(seed)
    mu = rng.standard_normal(d)
    mu /= np.linalg.norm(mu)
    root = rng.standard_normal((d, d)) * 0.1 / np.sqrt(d)
    sigma = root @ root.T
    return ClassGaussian(class_id, mu, (sigma + sigma.T) / 2, 50)


def moment_gap(recovered, reference):
    """Relative Frobenius distance over the stacked (mu, sigma) moments."""
    num = np.hypot(np.linalg.norm(recovered.mu - reference.mu),
                   np.linalg.norm(recovered.sigma - reference.sigma))
    den = np.hypot(np.linalg.norm(reference.mu),
                   np.linalg.norm(reference.sigma))
    return num / den


class TestMcCompensate:
    def test_identity_operator_recovers_gaussian(self):
        d = 32
        g = feature_like_gaussian(d, seed=19, class_id=2)
        op = init_weaknl(d, d, seed=20)
        op.logits[:] = [50.0, -50.0]  # exact identity pipe
        out = mc_compensate(op, g, n_samples=10 * d, seed=21)
        assert moment_gap(out, g) <= 0.05

    def test_pure_linear_matches_pushforward(self):
        d = 32
        rng = np.random.default_rng(22)
        g = feature_like_gaussian(d, seed=22, class_id=1)
        op = init_weaknl(d, d, seed=23)
        op.logits[:] = [50.0, -50.0]
        op.a[:] = rng.standard_normal((d, d)) / np.sqrt(d)
        exact = linear_pushforward(g, op.a)
        coarse = mc_compensate(op, g, n_samples=10 * d, seed=24)
        fine = mc_compensate(op, g, n_samples=1000 * d, seed=25)
        assert moment_gap(coarse, exact) <= 0.05
        assert moment_gap(fine, exact) <= 0.01

    def test_below_identifiability_rejected(self):
        g = ClassGaussian(0, np.zeros(4), np.eye(4), 10)
        op = init_weaknl(4, 4, seed=26)
        with pytest.raises(ConfigError):
            mc_compensate(op, g, n_samples=4, seed=27)

    def test_works_with_bare_mlp(self):
        prev, curr = make_pair(5, 40, seed=28)
        mlp = train_mlpdc(prev, curr, OperatorTrainConfig(steps=100, seed=29))
        g = ClassGaussian(0, np.zeros(5), np.eye(5), 10)
        out = mc_compensate(mlp, g, seed=30)
        assert out.d == 5


class TestSerialization:
    def test_round_trip(self, tmp_path):
        prev, curr = make_pair(5, 30, seed=31)
        op = train_weaknl(init_weaknl(5, 5, seed=32), prev, curr,
                          OperatorTrainConfig(steps=100, seed=33))
        path = tmp_path / "op.wnl"
        op.save(path)
        back = WeakNonlinearOperator.load(path)
        f = np.random.default_rng(34).standard_normal(5)
        np.testing.assert_allclose(back.forward(f), op.forward(f), atol=1e-9)
        assert back.gamma2 == op.gamma2
