import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hausmoment import (
    ModelError,
    OffSupport,
    RankDeficientConstraint,
    SingularGaussian,
    SingularJacobian,
    build_projection,
    build_split,
    jacobian_dbeta_dtheta,
    make_builtin_model,
    make_state,
    marginal_log_correction,
    missing_support_correction,
    reparam_log_correction,
    solve_beta,
    split_marginal_correction,
)
from hausmoment.datasets import simulate_regression_data
from hausmoment.exceptions import SingularExpectedJacobian
from hausmoment.geometry import singular_gaussian_logpdf, singular_gaussian_sample

S3 = np.array([[-1.0], [0.0], [1.0]])


def bundle_at(model, S, theta):
    beta = solve_beta(model, S, theta)
    return jacobian_dbeta_dtheta(model, S, make_state(model, S, beta, theta))


class TestJacobianBundle:
    def test_mean_example(self):
        b = bundle_at(make_builtin_model("mean"), S3, [0.2, 0.3])
        np.testing.assert_allclose(b.J_theta, [[-2.0, -1.0]], atol=1e-15)
        assert np.exp(b.log_corr_marginal) == pytest.approx(np.sqrt(6.0), rel=1e-14)
        assert np.exp(b.log_corr_joint) == pytest.approx(np.sqrt(5.0 / 6.0), rel=1e-14)

    def test_logistic_example(self):
        b = bundle_at(make_builtin_model("logistic"), [[0.0], [1.0]], [0.5])
        # d logit(theta_1 * 0 + theta_2 * 1)/d theta_1 = -1/(theta(1-theta)) = -4
        np.testing.assert_allclose(b.J_theta, [[-4.0]])
        assert np.exp(b.log_corr_marginal) == pytest.approx(np.sqrt(17.0), rel=1e-14)

    def test_joint_correction_negative_and_jacobian_identity(self, rng):
        model = make_builtin_model("linear_reg", p=2)
        S = simulate_regression_data(20, seed=1).support.points
        for _ in range(10):
            b = bundle_at(model, S, rng.dirichlet(np.ones(20)))
            assert b.log_corr_joint < 0
            np.testing.assert_allclose(b.J_theta, -np.linalg.solve(b.E, b.H), atol=1e-10)

    def test_mean_correction_is_flat(self, rng):
        S = np.array([[-1.0], [0.5], [2.0], [3.0]])
        model = make_builtin_model("mean")
        expected = 0.5 * np.log(1 + np.sum((S[:-1, 0] - S[-1, 0]) ** 2))
        for _ in range(20):
            th = rng.dirichlet(np.ones(4))
            assert marginal_log_correction(model, S, th, th @ S[:, 0]) == pytest.approx(
                expected, abs=1e-12)

    def test_singular_E(self):
        model = make_builtin_model("logistic")
        state = make_state(model, [[0.0], [1.0]], [800.0], [0.5], check=False)
        with pytest.raises(SingularExpectedJacobian):
            jacobian_dbeta_dtheta(model, [[0.0], [1.0]], state)

    def test_needs_just_identified(self):
        model = make_builtin_model("iv_reg", p=1, r=2)
        S = np.eye(4)
        state = make_state(model, S, [0.0], [0.25] * 3, check=False)
        with pytest.raises(ModelError):
            jacobian_dbeta_dtheta(model, S, state)

    @pytest.mark.parametrize("kind,dims", [("linear_reg", {"p": 2}), ("iv_reg", {"p": 2})])
    def test_sandwich_display(self, kind, dims, rng):
        J = 9
        x = rng.normal(size=J)
        z = x + rng.normal(size=J)
        y = 1 + x + rng.normal(size=J)
        one = np.ones(J)
        if kind == "linear_reg":
            S = np.column_stack([y, one, x])
            X = Z = S[:, 1:]
        else:
            S = np.column_stack([y, one, x, one, z])
            X, Z = S[:, 1:3], S[:, 3:]
        model = make_builtin_model(kind, **dims)
        th = rng.dirichlet(np.ones(J))
        beta = solve_beta(model, S, th)
        b = jacobian_dbeta_dtheta(model, S, make_state(model, S, beta, th))
        g = Z * (y - X @ beta)[:, None]
        D = g[:-1] - g[-1]
        A = np.linalg.inv((Z * th[:, None]).T @ X)
        np.testing.assert_allclose(b.J_theta @ b.J_theta.T, A @ D.T @ D @ A.T, rtol=1e-10)

    @pytest.mark.parametrize("kind,dims", [
        ("mean", {}), ("logistic", {}), ("linear_reg", {"p": 2}),
        ("iv_reg", {"p": 2}), ("poisson_reg", {"p": 2})])
    def test_finite_difference_oracle(self, kind, dims, rng):
        J = 6
        x = rng.normal(size=J)
        one = np.ones(J)
        S = {
            "mean": x[:, None],
            "logistic": np.linspace(0, 1, J)[:, None],
            "linear_reg": np.column_stack([x + rng.normal(size=J), one, x]),
            "iv_reg": np.column_stack([x + rng.normal(size=J), one, x, one,
                                       x + rng.normal(size=J)]),
            "poisson_reg": np.column_stack([rng.poisson(2.0, J), one, x]),
        }[kind]
        model = make_builtin_model(kind, **dims)
        h = 1e-5
        for _ in range(20):
            th = rng.dirichlet(np.full(J, 4.0))
            b = bundle_at(model, S, th)
            fd = np.empty_like(b.J_theta)
            for j in range(J - 1):
                e = np.zeros(J)
                e[j], e[-1] = h, -h
                fd[:, j] = (solve_beta(model, S, th + e) - solve_beta(model, S, th - e)) / (2 * h)
            assert np.linalg.norm(b.J_theta - fd) <= 1e-5 * np.linalg.norm(fd)

    def test_jacobian_limit_trend(self):
        model = make_builtin_model("linear_reg", p=2)
        ratios = []
        for J in (10, 100, 1000):
            S = simulate_regression_data(J, seed=5).support.points
            ratios.append(np.exp(2 * bundle_at(model, S, np.full(J, 1 / J)).log_corr_joint))
        assert ratios[0] < ratios[1] < ratios[2]
        assert ratios[2] > 0.99


class TestReparametrization:
    def test_identity_and_sign_flip(self):
        b = bundle_at(make_builtin_model("mean"), S3, [0.2, 0.3])
        assert reparam_log_correction(b, [[1.0]]) == 0.0
        assert reparam_log_correction(b, [[-1.0]]) == pytest.approx(0.0, abs=1e-15)

    def test_logistic_doubling(self):
        b = bundle_at(make_builtin_model("logistic"), [[0.0], [1.0]], [0.5])
        assert reparam_log_correction(b, [[2.0]]) == pytest.approx(
            0.5 * np.log(17) - 0.5 * np.log(65), abs=1e-14)

    def test_singular_transform(self):
        b = bundle_at(make_builtin_model("mean", d=2), np.eye(3)[:, :2], [0.3, 0.3])
        with pytest.raises(SingularJacobian):
            reparam_log_correction(b, [[1.0, 1.0], [1.0, 1.0]])


class TestMissingSupport:
    def _mean_case(self, s4, theta4):
        S = np.array([[-1.0], [0.0], [1.0], [s4]])
        th = np.array([0.3, 0.3, 0.4 - theta4, theta4])
        beta = th @ S[:, 0]
        return S, th, beta

    def test_mean_jacobians_and_value(self):
        S, th, beta = self._mean_case(2.0, 0.1)
        Jt, Js, corr = missing_support_correction(make_builtin_model("mean"), S, th, beta, [3])
        np.testing.assert_allclose(Jt, [[-3.0, -2.0, -1.0]], atol=1e-15)
        np.testing.assert_allclose(Js, [[0.1]], atol=1e-15)
        # the Gram is 14 whatever the ordering of the atoms
        assert corr == pytest.approx(0.5 * np.log(15.01), abs=1e-12)

    def test_mean_missing_atom_form(self):
        # with the unknown atom last, J_theta* = (-1 - s4, -s4, 1 - s4)
        for s4 in (-2.0, 0.0, 0.7, 3.0):
            S, th, beta = self._mean_case(s4, 0.1)
            Jt, _, _ = missing_support_correction(make_builtin_model("mean"), S, th, beta, [3])
            np.testing.assert_allclose(Jt, [[-1 - s4, -s4, 1 - s4]], atol=1e-14)
            assert (Jt @ Jt.T).item() == pytest.approx(2 + 3 * s4 ** 2, rel=1e-12)

    def test_zero_atom(self):
        S, th, beta = self._mean_case(0.0, 0.05)
        S[3, 0] = 0.0
        S[1, 0] = 0.5  # keep atoms distinct
        model = make_builtin_model("mean")
        Jt, Js, corr = missing_support_correction(model, S, th, beta, [3])
        expected = 0.5 * np.log((Jt @ Jt.T).item() + 0.05 ** 2 + 1)
        assert corr == pytest.approx(expected, abs=1e-13)

    def test_fixed_coordinates_drop_out(self, rng):
        model = make_builtin_model("linear_reg", p=2)
        S = simulate_regression_data(6, seed=3).support.points
        th = rng.dirichlet(np.ones(6))
        beta = solve_beta(model, S, th)
        _, Js_all, _ = missing_support_correction(model, S, th, beta, [5])
        _, Js_free, _ = missing_support_correction(model, S, th, beta, [5],
                                                   free_coords=np.array([True, False, True]))
        assert Js_all.shape == (2, 3) and Js_free.shape == (2, 2)
        np.testing.assert_allclose(Js_free, Js_all[:, [0, 2]])

    def test_matches_finite_differences(self, rng):
        model = make_builtin_model("linear_reg", p=2)
        S = simulate_regression_data(6, seed=4).support.points
        th = rng.dirichlet(np.full(6, 3.0))
        beta = solve_beta(model, S, th)
        _, Js, _ = missing_support_correction(model, S, th, beta, [5])
        h = 1e-6
        fd = np.empty_like(Js)
        for k in range(3):
            P, M = S.copy(), S.copy()
            P[5, k] += h
            M[5, k] -= h
            fd[:, k] = (solve_beta(model, P, th) - solve_beta(model, M, th)) / (2 * h)
        np.testing.assert_allclose(Js, fd, rtol=1e-6, atol=1e-8)

    def test_needs_dg_ds(self):
        model = make_builtin_model("mean")
        from dataclasses import replace
        with pytest.raises(ModelError):
            missing_support_correction(replace(model, dg_ds=None), S3, [0.3, 0.3], [0.1], [2])


def kkt_projection(H, gJ, pi):
    n = H.shape[1]
    M = np.eye(n) + np.ones((n, n))
    K = np.block([[M, H.T], [H, np.zeros((H.shape[0], H.shape[0]))]])
    return np.linalg.solve(K, np.concatenate([M @ pi, -gJ]))[:n]


class TestProjection:
    def test_worked_example(self):
        proj = build_projection([[-2.0, -1.0]], [0.7])
        th = proj.apply([0.2, 0.4])
        np.testing.assert_allclose(th, [0.15, 0.40], atol=1e-12)
        assert -2 * th[0] - th[1] + 0.7 == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(proj(th), th, atol=1e-15)

    def test_point_on_hyperplane_is_fixed(self):
        proj = build_projection([[-2.0, -1.0]], [0.7])
        np.testing.assert_allclose(proj.apply([0.2, 0.3]), [0.2, 0.3], atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(3, 8), st.integers(1, 3), st.integers(0, 2 ** 31))
    def test_invariants_and_kkt(self, J, p, seed):
        p = min(p, J - 2)
        r = np.random.default_rng(seed)
        H = r.normal(size=(p, J - 1))
        gJ = r.normal(size=p)
        pi = r.normal(size=J - 1)
        proj = build_projection(H, gJ)
        th = proj.apply(pi)
        np.testing.assert_allclose(H @ proj.B_star, 0.0, atol=1e-10)
        np.testing.assert_allclose(H @ proj.a_star + gJ, 0.0, atol=1e-10)
        np.testing.assert_allclose(proj.apply(th), th, atol=1e-12)
        np.testing.assert_allclose(th, kkt_projection(H, gJ, pi), atol=1e-10)

    def test_rank_deficient(self):
        with pytest.raises(RankDeficientConstraint):
            build_projection([[1.0, 2.0], [2.0, 4.0]], [0.0, 1.0])


class TestSingularGaussian:
    def test_rank_one_example(self):
        dist = SingularGaussian([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]])
        assert dist.rank == 1
        assert singular_gaussian_logpdf(dist, [1.0, 1.0]) == pytest.approx(
            -0.5 * np.log(2 * np.pi) - 0.5 * np.log(2) - 0.5, abs=1e-14)
        with pytest.raises(OffSupport):
            dist.logpdf([1.0, -1.0])

    def test_standard_normal_mode(self):
        for n in (1, 3, 6):
            assert SingularGaussian(np.zeros(n), np.eye(n)).logpdf(np.zeros(n)) == pytest.approx(
                -0.5 * n * np.log(2 * np.pi), abs=1e-14)

    def test_full_rank_matches_scipy(self, rng):
        A = rng.normal(size=(4, 4))
        cov = A @ A.T + np.eye(4)
        mu = rng.normal(size=4)
        dist = SingularGaussian(mu, cov)
        for x in rng.normal(size=(20, 4)):
            assert dist.logpdf(x) == pytest.approx(
                stats.multivariate_normal(mu, cov).logpdf(x), abs=1e-10)

    def test_zero_covariance(self, rng):
        dist = SingularGaussian([1.0, 2.0], np.zeros((2, 2)))
        np.testing.assert_array_equal(singular_gaussian_sample(dist, rng), [1.0, 2.0])
        assert dist.rank == 0

    def test_rank_one_samples_perfectly_correlated(self, rng):
        dist = SingularGaussian([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]])
        x = dist.sample(rng, 100_000)
        assert np.corrcoef(x.T)[0, 1] == pytest.approx(1.0, abs=1e-6)

    def test_sample_mean_and_range(self, rng):
        V, _ = np.linalg.qr(rng.normal(size=(4, 2)))
        cov = V @ np.diag([2.0, 0.5]) @ V.T
        mu = rng.normal(size=4)
        dist = SingularGaussian(mu, cov)
        x = dist.sample(rng, 100_000)
        assert np.all(np.abs(x.mean(axis=0) - mu) <= 4 * np.sqrt(2.0 / 100_000))
        for xi in x[:100]:
            dist.logpdf(xi)

    def test_pinv(self, rng):
        V, _ = np.linalg.qr(rng.normal(size=(3, 2)))
        cov = V @ np.diag([2.0, 0.5]) @ V.T
        np.testing.assert_allclose(SingularGaussian(np.zeros(3), cov).pinv,
                                   np.linalg.pinv(cov), atol=1e-12)


class TestSplit:
    def test_just_identified_matches_marginal(self):
        for model, S, th in [
            (make_builtin_model("mean"), np.array([[-1.0], [0.0], [1.0], [2.5]]),
             np.array([0.1, 0.2, 0.3, 0.4])),
            (make_builtin_model("logistic"), np.array([[0.0], [0.4], [1.0]]),
             np.array([0.3, 0.3, 0.4])),
        ]:
            J = S.shape[0]
            spec = build_split(model, S, np.arange(J - 1))
            beta = solve_beta(model, S, th)
            assert split_marginal_correction(spec, th[:-1]) == pytest.approx(
                marginal_log_correction(model, S, th, beta), abs=1e-4)

    def test_mean_split_is_half_log_six(self):
        spec = build_split(make_builtin_model("mean"), S3, [0, 1])
        assert split_marginal_correction(spec, [0.2, 0.3]) == pytest.approx(
            0.5 * np.log(6), abs=1e-8)

    def _implicit_oracle(self, spec, lam):
        """``-G_phi^{-1} G_lambda`` at the solved point."""
        psi = np.empty(spec.J - 1 + spec.p)
        psi[spec.lambda_idx] = lam
        psi[spec.phi_idx] = spec.phi_solver(lam)
        G = spec.jacobian(psi)
        D = -np.linalg.solve(G[:, spec.phi_idx], G[:, spec.lambda_idx])
        return 0.5 * np.linalg.slogdet(np.eye(spec.r) + D @ D.T)[1]

    def test_overidentified_toy(self, rng):
        th0 = np.array([0.2, 0.3, 0.25, 0.25])
        x, Z = rng.normal(size=4), rng.normal(size=(4, 2))
        e = np.linalg.svd((Z * th0[:, None]).T)[2][-1]
        S = np.column_stack([x + e, x, Z])
        model = make_builtin_model("iv_reg", p=1, r=2)
        spec = build_split(model, S, [0, 1], psi0=np.r_[th0[:3], 1.0])
        for lam in ([0.2, 0.3], [0.22, 0.27]):
            assert split_marginal_correction(spec, lam) == pytest.approx(
                self._implicit_oracle(spec, np.array(lam)), abs=1e-4)

    def test_underidentified_toy(self, rng):
        S = rng.normal(size=(3, 4))
        model = make_builtin_model("iv_reg", p=2, r=1)
        spec = build_split(model, S, [0, 1, 2])
        vals = []
        for b1 in (-1.0, 0.0, 2.0):
            lam = np.array([0.3, 0.3, b1])
            val = split_marginal_correction(spec, lam)
            assert np.isfinite(val) and val > 0
            assert val == pytest.approx(self._implicit_oracle(spec, lam), abs=1e-4)
            vals.append(val)
        # the phi-Jacobian is affine in beta_1, so the correction is not flat in it
        assert np.ptp(vals) > 1e-3

    def test_bad_partition(self):
        with pytest.raises(ModelError):
            build_split(make_builtin_model("mean"), S3, [0])
