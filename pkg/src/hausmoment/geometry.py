"""Area-formula corrections, the hyperplane projection and singular Gaussians.

The manifold of admissible pairs ``(beta, theta)`` is parametrized by
``theta``. Moving between densities on the manifold (Hausdorff measure) and
Lebesgue densities of ``theta`` costs the Gram factor
``sqrt(|J_theta J_theta' + I_p|)`` with ``J_theta = d beta / d theta'``.
All determinants here are evaluated on the small ``p x p`` side and
returned as logs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .exceptions import (
    MaxIterationsExceeded,
    ModelError,
    OffSupport,
    RankDeficientConstraint,
    SingularExpectedJacobian,
    SingularJacobian,
)
from .model import (
    TOL_SOLVE,
    ManifoldState,
    MomentModel,
    _as_full,
    _g_matrix,
    _points,
    expected_dg_dbeta,
    make_state,
)

__all__ = [
    "JacobianBundle",
    "jacobian_dbeta_dtheta",
    "marginal_log_correction",
    "reparam_log_correction",
    "missing_support_correction",
    "ProjectionMap",
    "build_projection",
    "SingularGaussian",
    "singular_gaussian_logpdf",
    "singular_gaussian_sample",
    "SplitSpec",
    "build_split",
    "split_marginal_correction",
]


def _half_logdet_spd(A) -> float:
    sign, logdet = np.linalg.slogdet(A)
    if sign <= 0:
        return -np.inf
    return 0.5 * logdet


@dataclass(frozen=True)
class JacobianBundle:
    """``J_theta = -E^{-1} H`` with its Gram matrix and log-corrections."""

    J_theta: np.ndarray
    E: np.ndarray
    H: np.ndarray
    gram: np.ndarray
    log_corr_marginal: float
    log_corr_joint: float


def _bundle(E, H) -> JacobianBundle:
    p = E.shape[0]
    scale = max(np.max(np.abs(E)), 1e-300)
    if not np.all(np.isfinite(E)) or abs(np.linalg.det(E / scale)) < 1e-14:
        raise SingularExpectedJacobian("E_theta(dg/dbeta') is singular")
    Jt = -np.linalg.solve(E, H)
    gram = Jt @ Jt.T
    lm = _half_logdet_spd(gram + np.eye(p))
    lj = _half_logdet_spd(gram) - lm
    return JacobianBundle(Jt, E, H, gram, lm, lj)


def jacobian_dbeta_dtheta(model: MomentModel, S, state: ManifoldState) -> JacobianBundle:
    """Jacobian of the implicit map ``theta -> beta`` at an on-manifold state.

    Examples
    --------
    Mean model on ``S = (-1, 0, 1)`` at ``theta = (0.2, 0.3)``:
    ``J_theta = (-2, -1)`` and the marginal correction is ``log sqrt(6)``.
    """
    if not model.just_identified:
        raise ModelError("jacobian_dbeta_dtheta needs r == p")
    E = expected_dg_dbeta(model, S, state.theta_full, state.beta)
    return _bundle(E, state.H)


def marginal_log_correction(model: MomentModel, S, theta, beta) -> float:
    """``1/2 log|J_theta J_theta' + I_p|`` at ``(beta, theta)``."""
    state = make_state(model, S, beta, theta, check=False)
    return jacobian_dbeta_dtheta(model, S, state).log_corr_marginal


def reparam_log_correction(bundle_beta: JacobianBundle, dpsi_dbeta) -> float:
    """Log change of the Gram correction under ``psi = psi(beta)``.

    Returns ``1/2 log|J J' + I| - 1/2 log|D J J' D' + I|`` where ``D`` is the
    ``p x p`` Jacobian ``d psi / d beta'``.
    """
    D = np.atleast_2d(np.asarray(dpsi_dbeta, dtype=float))
    p = bundle_beta.gram.shape[0]
    if D.shape != (p, p):
        raise ModelError(f"dpsi_dbeta must be {p}x{p}")
    if np.linalg.matrix_rank(D) < p:
        raise SingularJacobian("reparametrization Jacobian is singular")
    gram_psi = D @ bundle_beta.gram @ D.T
    return bundle_beta.log_corr_marginal - _half_logdet_spd(gram_psi + np.eye(p))


def missing_support_correction(model: MomentModel, S_star, theta_star, beta,
                               missing, free_coords=None):
    """Jacobians for inference with unobserved support atoms.

    Parameters
    ----------
    S_star : (J*, d) array
        Observed and missing atoms together.
    theta_star : array
        Free (``J* - 1``) or full (``J*``) probabilities.
    missing : sequence of int
        Row indices of the missing atoms in ``S_star``.
    free_coords : (d,) bool array, optional
        Coordinates of each missing atom that are unknown; fixed coordinates
        (e.g. an intercept) carry no Jacobian column.

    Returns
    -------
    J_theta : (p, J*-1) array
    J_S : (p, J~ * k) array
        ``-E^{-1}`` times the columns ``theta_j dg_j/ds_j'`` of each missing atom.
    log_corr : float
        ``1/2 log|J_theta J_theta' + J_S J_S' + I_p|``.
    """
    if model.dg_ds is None:
        raise ModelError(f"model {model.name!r} lacks dg_ds")
    if not model.just_identified:
        raise ModelError("missing_support_correction needs r == p")
    pts = _points(S_star)
    th = _as_full(theta_star, pts.shape[0])
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    missing = np.atleast_1d(np.asarray(missing, dtype=int))
    G = _g_matrix(model, pts, beta)
    H = (G[:-1] - G[-1]).T
    E = expected_dg_dbeta(model, pts, th, beta)
    bundle = _bundle(E, H)
    J_S, log_corr = _missing_parts(model, pts, th, beta, missing, free_coords, E,
                                   bundle.gram)
    return bundle.J_theta, J_S, log_corr


def _missing_parts(model, pts, th, beta, missing, free_coords, E, gram):
    """``J_S`` and the combined log-correction given ``E`` and ``J_theta J_theta'``."""
    Ds = np.asarray(model.dg_ds(pts[missing], beta), dtype=float)
    if free_coords is not None:
        Ds = Ds[:, :, np.asarray(free_coords, dtype=bool)]
    # columns grouped per missing atom
    Mt = (Ds * th[missing][:, None, None]).transpose(1, 0, 2).reshape(E.shape[0], -1)
    J_S = -np.linalg.solve(E, Mt)
    log_corr = _half_logdet_spd(gram + J_S @ J_S.T + np.eye(E.shape[0]))
    return J_S, log_corr


# ---------------------------------------------------------------------------
# projection onto the beta-fiber hyperplane
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProjectionMap:
    """Affine map ``pi -> a_star + B_star pi`` onto ``{theta: H theta + gJ = 0}``.

    The image is the minimizer of ``1/2 |pi - theta|^2 + 1/2 (1'pi - 1'theta)^2``
    on the hyperplane, i.e. the projection in the metric ``M = I + 11'``.
    """

    a_star: np.ndarray
    B_star: np.ndarray
    H: np.ndarray
    gJ: np.ndarray

    def apply(self, pi) -> np.ndarray:
        return self.a_star + self.B_star @ np.asarray(pi, dtype=float)

    __call__ = apply


def _minv(X):
    """``(I + 11')^{-1} X`` by Sherman-Morrison, without forming the matrix."""
    n = X.shape[0]
    return X - np.sum(X, axis=0, keepdims=True) / (n + 1.0)


def build_projection(H_star, gJ_star) -> ProjectionMap:
    """Build ``a* = -A G^{-1} gJ`` and ``B* = I - A G^{-1} H`` with
    ``A = M^{-1} H'`` and ``G = H M^{-1} H'``.
    """
    H = np.atleast_2d(np.asarray(H_star, dtype=float))
    gJ = np.atleast_1d(np.asarray(gJ_star, dtype=float))
    A = _minv(H.T)
    G = H @ A
    # G is PSD, so det(G) / prod(diag(G)) lies in [0, 1] (Hadamard)
    diag = np.diag(G)
    if np.any(diag <= 0) or np.linalg.det(G) / np.prod(diag) < 1e-12:
        raise RankDeficientConstraint("H M^{-1} H' is singular")
    Ginv_H = np.linalg.solve(G, H)
    a = -A @ np.linalg.solve(G, gJ)
    B = np.eye(H.shape[1]) - A @ Ginv_H
    return ProjectionMap(a, B, H, gJ)


# ---------------------------------------------------------------------------
# singular Gaussian
# ---------------------------------------------------------------------------


class SingularGaussian:
    """Gaussian with a possibly rank-deficient covariance.

    The density is taken with respect to ``k``-dimensional Hausdorff measure
    on the affine support ``mean + range(cov)``, ``k = rank(cov)``.

    Parameters
    ----------
    mean : (n,) array
    cov : (n, n) symmetric PSD array
    range_tol : float
        Max-norm tolerance of the component of ``x - mean`` orthogonal to
        the range of ``cov``.
    """

    def __init__(self, mean, cov, range_tol=1e-8):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        n = self.mean.size
        if cov.shape != (n, n):
            raise ValueError(f"cov must be {n}x{n}")
        cov = 0.5 * (cov + cov.T)
        lam, V = np.linalg.eigh(cov)
        lmax = max(lam.max(initial=0.0), 0.0)
        keep = lam > n * 2.2e-16 * 64 * lmax if lmax > 0 else np.zeros(n, bool)
        self.cov = cov
        self.eigvals = lam[keep]
        self.eigvecs = V[:, keep]
        self.rank = int(keep.sum())
        self.log_pdet = float(np.sum(np.log(self.eigvals)))
        self.range_tol = range_tol

    @property
    def pinv(self) -> np.ndarray:
        return (self.eigvecs / self.eigvals) @ self.eigvecs.T

    def logpdf(self, x) -> float:
        dx = np.asarray(x, dtype=float) - self.mean
        z = self.eigvecs.T @ dx
        off = dx - self.eigvecs @ z
        if np.max(np.abs(off), initial=0.0) > self.range_tol:
            raise OffSupport(f"point is {np.max(np.abs(off)):.3g} off the support")
        return float(-0.5 * self.rank * np.log(2 * np.pi) - 0.5 * self.log_pdet
                     - 0.5 * np.sum(z * z / self.eigvals))

    def sample(self, rng, size=None) -> np.ndarray:
        if size is None:
            z = rng.standard_normal(self.rank)
            return self.mean + self.eigvecs @ (np.sqrt(self.eigvals) * z)
        z = rng.standard_normal((size, self.rank))
        return self.mean + (z * np.sqrt(self.eigvals)) @ self.eigvecs.T


def singular_gaussian_logpdf(dist: SingularGaussian, x) -> float:
    return dist.logpdf(x)


def singular_gaussian_sample(dist: SingularGaussian, rng) -> np.ndarray:
    return dist.sample(rng)


# ---------------------------------------------------------------------------
# generalized (under/over-identified) correction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """Partition of ``psi = (theta_1..theta_{J-1}, beta_1..beta_p)`` into
    free coordinates ``lambda`` and implied coordinates ``phi`` (``|phi| = r``).
    """

    lambda_idx: np.ndarray
    phi_idx: np.ndarray
    phi_solver: Callable
    J: int
    p: int
    r: int
    jacobian: Optional[Callable] = None
    residual: Optional[Callable] = None

    def __post_init__(self):
        n = self.J - 1 + self.p
        both = np.concatenate([self.lambda_idx, self.phi_idx])
        if self.phi_idx.size != self.r:
            raise ModelError(f"phi must have r = {self.r} components")
        if sorted(both.tolist()) != list(range(n)):
            raise ModelError("lambda and phi indices must partition psi")


def build_split(model: MomentModel, S, lambda_idx, psi0=None, *, tol=TOL_SOLVE,
                max_iter=100) -> SplitSpec:
    """Split for the constraint ``sum_j theta_j g(s_j, beta) = 0``.

    The returned ``phi_solver(lam, init=None)`` solves the ``r`` equations
    for the ``phi`` coordinates by damped Newton, starting from ``init`` or
    the corresponding entries of ``psi0``.
    """
    pts = _points(S)
    J, p, r = pts.shape[0], model.p, model.r
    n = J - 1 + p
    lam_idx = np.asarray(sorted(np.atleast_1d(lambda_idx)), dtype=int)
    phi_idx = np.setdiff1d(np.arange(n), lam_idx)
    if psi0 is None:
        psi0 = np.concatenate([np.full(J - 1, 1.0 / J), np.zeros(p)])
    psi0 = np.asarray(psi0, dtype=float)

    def residual(psi):
        th = np.append(psi[:J - 1], 1.0 - psi[:J - 1].sum())
        return th @ _g_matrix(model, pts, psi[J - 1:])

    def jac(psi):
        beta = psi[J - 1:]
        th = np.append(psi[:J - 1], 1.0 - psi[:J - 1].sum())
        G = _g_matrix(model, pts, beta)
        H = (G[:-1] - G[-1]).T
        E = expected_dg_dbeta(model, pts, th, beta)
        return np.hstack([H, E])

    def phi_solver(lam, init=None):
        psi = psi0.copy()
        psi[lam_idx] = lam
        if init is not None:
            psi[phi_idx] = init
        m = residual(psi)
        for _ in range(max_iter + 1):
            if np.max(np.abs(m)) <= tol:
                return psi[phi_idx].copy()
            Gphi = jac(psi)[:, phi_idx]
            try:
                step = -np.linalg.solve(Gphi, m)
            except np.linalg.LinAlgError as exc:
                raise SingularJacobian("phi block of the constraint is singular") from exc
            t, norm = 1.0, np.linalg.norm(m)
            for _ in range(60):
                cand = psi.copy()
                cand[phi_idx] += t * step
                m_c = residual(cand)
                if np.linalg.norm(m_c) < norm:
                    break
                t *= 0.5
            else:
                break
            psi, m = cand, m_c
        raise MaxIterationsExceeded("phi_solver did not converge")

    return SplitSpec(lam_idx, phi_idx, phi_solver, J, p, r, jac, residual)


def split_marginal_correction(spec: SplitSpec, lam, step=1e-6) -> float:
    """``1/2 log|I_r + J J'|`` with ``J = d phi / d lambda'`` by central differences."""
    lam = np.asarray(lam, dtype=float)
    phi0 = spec.phi_solver(lam)
    Jpl = np.empty((spec.r, lam.size))
    for k in range(lam.size):
        e = np.zeros(lam.size)
        e[k] = step
        Jpl[:, k] = (spec.phi_solver(lam + e, phi0) - spec.phi_solver(lam - e, phi0)) / (2 * step)
    return _half_logdet_spd(np.eye(spec.r) + Jpl @ Jpl.T)
