"""Inner-filter tests: EKF, EnKF, bootstrap PF, block-diagonal inversion."""

import numpy as np
import pytest
from numpy.random import default_rng

from nhf.inner import (
    DiscreteLinearInnerModel,
    EKFInner,
    EnKFInner,
    EnsembleBelief,
    GaussianBelief,
    ParticleBelief,
    SdeInnerModel,
    block_diag_inverse,
    bpf_step,
    ekf_predict,
    ekf_update,
    enkf_predict,
    enkf_update,
    gaussian_logpdf,
)
from nhf.models import (
    LinearDriftField,
    PolynomialAnsatzField,
    RK4_NOISE_FACTOR,
    StateSpaceModel,
)
from nhf.oracle import LinearGaussianModel, kalman_filter


def random_linear_model(rng, d_x=4, d_y=2):
    a = 0.9 * np.linalg.qr(rng.standard_normal((d_x, d_x)))[0]
    q = 0.2 * np.eye(d_x)
    h = rng.standard_normal((d_y, d_x))
    r = 0.5 * np.eye(d_y)
    m0 = rng.standard_normal(d_x)
    p0 = np.eye(d_x)
    return a, q, h, r, m0, p0


class TestEKF:
    def test_linear_predict_is_phi_p_phi(self):
        rng = default_rng(0)
        a, q, h, r, m0, p0 = random_linear_model(rng)
        model = DiscreteLinearInnerModel(lambda th: a, q, h, r)
        out = ekf_predict(GaussianBelief(m0, p0), None, model)
        np.testing.assert_allclose(out.mean, a @ m0, atol=1e-13)
        np.testing.assert_allclose(out.cov, a @ p0 @ a.T + q, atol=1e-13)

    def test_zero_prior_cov_zero_noise(self):
        a = np.array([[0.7, 0.1], [0.0, 0.5]])
        model = DiscreteLinearInnerModel(lambda th: a, np.zeros((2, 2)), np.eye(2), np.eye(2))
        out = ekf_predict(GaussianBelief(np.ones(2), np.zeros((2, 2))), None, model)
        np.testing.assert_allclose(out.cov, 0.0, atol=1e-15)

    def test_scalar_rk4_covariance_factor(self):
        lin = LinearDriftField([[-1.0]])
        ssm = StateSpaceModel.for_drift(lin, sigma=0.0, sigma_o=1.0, h=0.1, m=1, K=1)
        out = ekf_predict(GaussianBelief([1.0], [[1.0]]), None, ssm)
        phi = 0.9048375
        assert out.mean[0] == pytest.approx(phi, abs=1e-12)
        assert out.cov[0, 0] == pytest.approx(phi ** 2, abs=1e-10)

    def test_process_noise_accumulation(self):
        lin = LinearDriftField([[0.0]])
        ssm = StateSpaceModel.for_drift(lin, sigma=0.5, sigma_o=1.0, h=0.01, m=7, K=1)
        out = ekf_predict(GaussianBelief([0.0], [[0.0]]), None, ssm)
        assert out.cov[0, 0] == pytest.approx(7 * 0.01 * 0.25 * RK4_NOISE_FACTOR, rel=1e-12)

    def test_scalar_update_example(self):
        model = DiscreteLinearInnerModel(lambda th: np.eye(1), np.zeros((1, 1)),
                                         np.eye(1), np.eye(1))
        post, est = ekf_update(GaussianBelief([0.0], [[1.0]]), [0.0], model)
        assert post.mean[0] == pytest.approx(0.0, abs=1e-14)
        assert post.cov[0, 0] == pytest.approx(0.5, abs=1e-14)
        assert np.exp(est.log_value) == pytest.approx(1.0 / np.sqrt(4 * np.pi), abs=1e-14)
        np.testing.assert_allclose(est.predicted_obs_cov, [[2.0]])

    def test_zero_gain_and_zero_innovation(self):
        rng = default_rng(1)
        a, q, h, r, m0, p0 = random_linear_model(rng)
        model = DiscreteLinearInnerModel(lambda th: a, q, h, r)
        prior = GaussianBelief(m0, np.zeros((4, 4)))
        post, est = ekf_update(prior, h @ m0 + rng.standard_normal(2), model)
        np.testing.assert_allclose(post.mean, m0, atol=1e-12)  # P = 0 -> no update
        prior2 = GaussianBelief(m0, p0)
        post2, _ = ekf_update(prior2, h @ m0, model)
        np.testing.assert_allclose(post2.mean, m0, atol=1e-12)  # zero innovation

    def test_singular_innovation_flags_divergence(self):
        model = DiscreteLinearInnerModel(lambda th: np.eye(1), np.zeros((1, 1)),
                                         np.eye(1), np.zeros((1, 1)))
        prior = GaussianBelief([0.0], [[0.0]])
        post, est = ekf_update(prior, [1.0], model)
        assert est.diverged and est.log_value == -np.inf
        np.testing.assert_array_equal(post.mean, prior.mean)

    def test_nonfinite_propagation_flags_divergence(self):
        blow = LinearDriftField([[1e8]])
        ssm = StateSpaceModel.for_drift(blow, sigma=0.0, sigma_o=1.0, h=1.0, m=3, K=1)
        out = ekf_predict(GaussianBelief([1.0], [[1.0]]), None, ssm)
        assert out.diverged
        _, est = ekf_update(out, [0.0], ssm)
        assert est.log_value == -np.inf and est.diverged

    def test_matches_exact_kalman_filter(self):
        # acceptance property: relative error <= 1e-10 on linear-Gaussian models
        for seed in range(3):
            rng = default_rng(100 + seed)
            a, q, h, r, m0, p0 = random_linear_model(rng)
            oracle_model = LinearGaussianModel(a, q, h, r, m0, p0)
            _, ys = oracle_model.simulate(25, rng)
            means, covs, logliks = kalman_filter(oracle_model, ys)

            inner = DiscreteLinearInnerModel(lambda th: a, q, h, r)
            belief = GaussianBelief(m0, p0)
            got_ll = []
            for y in ys:
                belief = ekf_predict(belief, None, inner)
                belief, est = ekf_update(belief, y, inner)
                got_ll.append(est.log_value)
            scale = np.abs(means[-1]).max()
            assert np.abs(belief.mean - means[-1]).max() <= 1e-10 * max(scale, 1.0)
            assert np.abs(belief.cov - covs[-1]).max() <= 1e-10
            np.testing.assert_allclose(got_ll, logliks, rtol=1e-10)


def enkf_moments_loops(members):
    """Two-loop oracle for the ensemble mean and 1/M covariance."""
    d, m = members.shape
    mean = np.zeros(d)
    for j in range(m):
        mean += members[:, j]
    mean /= m
    cov = np.zeros((d, d))
    for j in range(m):
        dev = members[:, j] - mean
        cov += np.outer(dev, dev)
    return mean, cov / m


class TestEnKF:
    def make_sde_model(self, d_x=4, sigma=0.0, sigma_o=1.0, m=1, K=1):
        lin = LinearDriftField(np.zeros((d_x, d_x)))
        return StateSpaceModel.for_drift(lin, sigma=sigma, sigma_o=sigma_o,
                                         h=0.05, m=m, K=K)

    def test_moments_match_two_loop_oracle(self):
        rng = default_rng(2)
        members = rng.standard_normal((5, 9))
        belief = EnsembleBelief(members)
        mean_o, cov_o = enkf_moments_loops(members)
        np.testing.assert_allclose(belief.mean(), mean_o, atol=1e-12)
        np.testing.assert_allclose(belief.cov("M"), cov_o, atol=1e-12)

    def test_predict_no_noise_zero_drift_is_identity(self):
        model = self.make_sde_model(sigma=0.0)
        members = default_rng(3).standard_normal((4, 6))
        out = enkf_predict(EnsembleBelief(members), None, model, default_rng(0))
        np.testing.assert_array_equal(out.members, members)

    def test_predict_noise_accumulation(self):
        model = self.make_sde_model(d_x=4, sigma=1.0, m=3)
        rng = default_rng(4)
        start = np.zeros((4, 2))
        diffs = []
        for _ in range(4000):
            out = enkf_predict(EnsembleBelief(start), None, model, rng)
            diffs.append(out.members.ravel())
        var = np.var(np.concatenate(diffs))
        expected = 3 * 0.05 * RK4_NOISE_FACTOR
        assert var == pytest.approx(expected, rel=0.05)

    def test_predict_determinism(self):
        model = self.make_sde_model(sigma=0.3)
        members = default_rng(5).standard_normal((4, 3))
        out1 = enkf_predict(EnsembleBelief(members), None, model, default_rng(42))
        out2 = enkf_predict(EnsembleBelief(members), None, model, default_rng(42))
        np.testing.assert_array_equal(out1.members, out2.members)

    def test_update_hand_example(self):
        model = self.make_sde_model(d_x=1)
        out, est = enkf_update(EnsembleBelief([[1.0, 3.0]]), [2.0], model, None,
                               perturbations=np.zeros((1, 2)))
        np.testing.assert_allclose(out.members, [[1.5, 2.5]])
        assert np.exp(est.log_value) == pytest.approx(1.0 / np.sqrt(4 * np.pi), abs=1e-12)
        np.testing.assert_allclose(est.predicted_obs_cov, [[2.0]])

    def test_update_zero_innovation_keeps_mean(self):
        model = self.make_sde_model(d_x=2, K=1)
        members = np.array([[1.0, 3.0, 1.0, 3.0], [0.0, 2.0, 2.0, 0.0]])
        y = members.mean(axis=1)
        out, _ = enkf_update(EnsembleBelief(members), y, model, None,
                             perturbations=np.zeros((2, 4)))
        np.testing.assert_allclose(out.mean(), members.mean(axis=1), atol=1e-12)

    def test_update_matches_dense_oracle(self):
        # naive dense-formula oracle with injected perturbations
        rng = default_rng(6)
        d_x, d_y, m_size = 5, 2, 7
        lin = LinearDriftField(np.zeros((d_x, d_x)))
        model = StateSpaceModel.for_drift(lin, sigma=0.0, sigma_o=0.8, h=0.1, m=1, K=2)
        members = rng.standard_normal((d_x, m_size))
        pert = 0.8 * rng.standard_normal((d_y, m_size))
        y = rng.standard_normal(d_y)
        out, est = enkf_update(EnsembleBelief(members), y, model, None, perturbations=pert)

        h_mat = np.zeros((d_y, d_x))
        h_mat[0, 1] = h_mat[1, 3] = 1.0
        x_bar = members.mean(axis=1, keepdims=True)
        x_dev = members - x_bar
        g = h_mat @ members
        z_dev = g - g.mean(axis=1, keepdims=True)
        s = z_dev @ z_dev.T / m_size + 0.64 * np.eye(d_y)
        gain = (x_dev @ z_dev.T / m_size) @ np.linalg.inv(s)
        expected = members + gain @ (y[:, None] - (g + pert))
        np.testing.assert_allclose(out.members, expected, atol=1e-11)
        assert est.log_value == pytest.approx(
            gaussian_logpdf(y, h_mat @ x_bar.ravel(), s), abs=1e-10)

    def test_converges_to_kalman_posterior(self):
        # scalar linear-Gaussian: ensemble mean -> Kalman posterior mean as M grows
        a, q_var, r_var = 0.9, 0.3, 0.5
        lg = LinearGaussianModel([[a]], [[q_var]], [[1.0]], [[r_var]], [0.0], [[1.0]])
        rng = default_rng(7)
        _, ys = lg.simulate(10, rng)
        means, _, _ = kalman_filter(lg, ys)
        lin = LinearDriftField([[np.log(a) if False else 0.0]])

        inner = DiscreteLinearInnerModel(lambda th: np.array([[a]]), [[q_var]],
                                         [[1.0]], [[r_var]])
        errors = {}
        for m_size in (8, 512):
            errs = []
            for seed in range(200):
                rng_run = default_rng(1000 + seed)
                ens = EnsembleBelief(rng_run.standard_normal((1, m_size)))
                for y in ys:
                    ens = enkf_predict(ens, None, inner, rng_run)
                    ens, _ = enkf_update(ens, y, inner, rng_run)
                errs.append(abs(ens.mean()[0] - means[-1, 0]))
            errors[m_size] = np.mean(errs)
        assert errors[512] < errors[8]

    def test_cov_normalization_switch(self):
        members = default_rng(8).standard_normal((3, 5))
        belief = EnsembleBelief(members)
        np.testing.assert_allclose(belief.cov("M") * 5 / 4, belief.cov("M-1"), atol=1e-12)


class TestBlockDiagInverse:
    def test_identity(self):
        np.testing.assert_array_equal(block_diag_inverse(np.eye(6), 2), np.eye(6))
        np.testing.assert_array_equal(block_diag_inverse(np.eye(6), 3), np.eye(6))

    def test_matches_dense_inverse_on_block_diagonal_input(self):
        rng = default_rng(9)
        blocks = []
        for _ in range(3):
            m = rng.standard_normal((4, 4))
            blocks.append(m @ m.T + 4 * np.eye(4))
        s = np.zeros((12, 12))
        for q, b in enumerate(blocks):
            s[4 * q:4 * q + 4, 4 * q:4 * q + 4] = b
        got = block_diag_inverse(s, 4)
        dense = np.linalg.inv(s)
        assert np.abs(got - dense).max() <= 1e-10 * np.abs(dense).max()

    def test_scalar_blocks(self):
        s = np.diag([2.0, 2.0, 2.0, 2.0])
        np.testing.assert_allclose(block_diag_inverse(s, 2), np.diag([0.5] * 4))

    def test_masks_off_block_entries(self):
        s = np.eye(4) + 0.3
        out = block_diag_inverse(s, 2)
        assert out[0, 2] == 0.0 and out[3, 1] == 0.0
        np.testing.assert_allclose(out[:2, :2], np.linalg.inv(s[:2, :2]), atol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            block_diag_inverse(np.eye(5), 2)
        singular = np.zeros((4, 4))
        singular[:2, :2] = np.eye(2)
        with pytest.raises(ValueError, match="block 1"):
            block_diag_inverse(singular, 2)


class TestBootstrapFilter:
    def make_model(self, sigma=0.0, sigma_o=1.0):
        lin = LinearDriftField([[0.0]])
        return StateSpaceModel.for_drift(lin, sigma=sigma, sigma_o=sigma_o,
                                         h=0.05, m=1, K=1)

    def test_rejects_single_particle(self):
        with pytest.raises(ValueError):
            bpf_step(np.zeros((1, 1)), [1.0], None, [0.0], self.make_model(),
                     default_rng(0))

    def test_identical_particles_exact_likelihood(self):
        model = self.make_model(sigma=0.0, sigma_o=2.0)
        particles = np.full((1, 50), 1.5)
        _, _, est = bpf_step(particles, np.full(50, 0.02), None, [2.5], model,
                             default_rng(1))
        expected = gaussian_logpdf([2.5], [1.5], [[4.0]])
        assert est.log_value == pytest.approx(expected, abs=1e-12)

    def test_likelihood_matches_kalman_predictive(self):
        # average of u-hat over trials within 5% of the exact predictive
        a, q_var, r_var, m0_var = 0.9, 0.4, 0.3, 1.0
        inner = DiscreteLinearInnerModel(lambda th: np.array([[a]]), [[q_var]],
                                         [[1.0]], [[r_var]])
        y = np.array([0.7])
        exact = np.exp(gaussian_logpdf(y, [0.0], [[a ** 2 * m0_var + q_var + r_var]]))
        rng = default_rng(2)
        values = []
        for _ in range(100):
            particles = np.sqrt(m0_var) * rng.standard_normal((1, 10 ** 4))
            _, _, est = bpf_step(particles, np.full(10 ** 4, 1e-4), None, y,
                                 inner, rng)
            values.append(np.exp(est.log_value))
        assert np.mean(values) == pytest.approx(exact, rel=0.05)

    def test_all_zero_weights_fallback(self):
        model = self.make_model(sigma=0.0, sigma_o=1e-300)
        particles = np.zeros((1, 4))
        out, weights, est = bpf_step(particles, np.full(4, 0.25), None, [1e280],
                                     model, default_rng(3))
        assert est.diverged and est.log_value == -np.inf
        np.testing.assert_allclose(weights, 0.25)

    def test_resampling_concentrates_on_likely_particle(self):
        model = self.make_model(sigma=0.0, sigma_o=0.1)
        particles = np.array([[0.0, 5.0]])
        out, _, _ = bpf_step(particles, [0.5, 0.5], None, [5.0], model,
                             default_rng(4))
        assert (out == 5.0).mean() > 0.95


class TestBeliefs:
    def test_gaussian_belief_symmetrizes(self):
        b = GaussianBelief([0.0, 0.0], [[1.0, 0.3], [0.1, 1.0]])
        np.testing.assert_allclose(b.cov, b.cov.T)

    def test_copy_independent(self):
        b = GaussianBelief([1.0], [[2.0]])
        c = b.copy()
        c.mean[0] = 9.0
        assert b.mean[0] == 1.0
        e = EnsembleBelief(np.ones((2, 3)))
        f = e.copy()
        f.members[0, 0] = 5.0
        assert e.members[0, 0] == 1.0

    def test_particle_belief_defaults_uniform(self):
        p = ParticleBelief(np.zeros((2, 4)))
        np.testing.assert_allclose(p.weights, 0.25)

    def test_ensemble_needs_two_members(self):
        with pytest.raises(ValueError):
            EnsembleBelief(np.zeros((3, 1)))
