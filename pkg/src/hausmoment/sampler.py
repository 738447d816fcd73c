"""Posterior samplers on the manifold of admissible ``(beta, theta)`` pairs.

* :func:`run_marginal_mcmc` walks in log-ratio coordinates of ``theta`` and
  solves for ``beta`` at every proposal.
* :func:`run_joint_mcmc` and :func:`run_block_joint_mcmc` propose ``beta``
  freely and project a Gaussian ``theta`` proposal onto the fiber
  hyperplane, so the moment equations are never solved inside the chain.
* :func:`bayesian_bootstrap_is` reweights Dirichlet draws.
* :func:`run_missing_support_sampler` also samples unobserved support atoms.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import polygamma

from .exceptions import (
    EvaluationError,
    ModelError,
    OffSupport,
    RankDeficientConstraint,
    SamplerAbort,
    SingularJacobian,
)
from .geometry import (
    SingularGaussian,
    _bundle,
    _half_logdet_spd,
    _missing_parts,
    build_projection,
)
from .model import (
    TOL_MANIFOLD,
    Dataset,
    ManifoldState,
    MomentModel,
    _g_matrix,
    expected_dg_dbeta,
    make_state,
    solve_beta,
)
from .prior import (
    DiscreteUniform,
    Dirichlet,
    Gaussian,
    GeometricAdhoc,
    Laplace,
    PointMass,
    Product,
    Uniform,
    log_likelihood,
    prior_log_density,
)

__all__ = [
    "ChainConfig",
    "ChainOutput",
    "WeightedSample",
    "OffSimplex",
    "theta_from_eta",
    "eta_from_theta",
    "run_marginal_mcmc",
    "propose_joint",
    "run_joint_mcmc",
    "run_block_joint_mcmc",
    "bayesian_bootstrap_is",
    "bb_log_weights",
    "normalize_log_weights",
    "sir_resample",
    "bayesian_bootstrap_missing_is",
    "run_missing_support_sampler",
    "make_rng",
]

_SOLVE_FAILURES = (EvaluationError, SingularJacobian, ModelError, np.linalg.LinAlgError)


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class ChainConfig:
    """Settings shared by the MCMC samplers.

    ``n_iter`` counts all iterations including the ``burn_in`` ones; draws
    are stored every ``thin`` iterations after burn-in. The global log
    step size adapts by Robbins-Monro every ``adapt_window`` iterations
    during burn-in only.
    """

    n_iter: int
    burn_in: int = 0
    thin: int = 1
    seed: int = 0
    target_accept: float = 0.30
    adapt_window: int = 50
    sigma_beta: Optional[np.ndarray] = None
    sigma_Q: Optional[np.ndarray] = None
    block_K: Optional[int] = None
    init_scale: Optional[float] = None
    max_fail_frac: float = 0.10
    tol_manifold: float = TOL_MANIFOLD
    s_scale: float = 0.1
    bb_pilot: int = 1000

    def __post_init__(self):
        if self.n_iter < 1 or self.thin < 1 or self.burn_in < 0:
            raise ValueError("n_iter, thin must be positive and burn_in nonnegative")
        if self.burn_in >= self.n_iter:
            raise ValueError("burn_in must be smaller than n_iter")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        for name in ("sigma_beta", "sigma_Q"):
            cov = getattr(self, name)
            if cov is not None:
                cov = np.atleast_2d(np.asarray(cov, dtype=float))
                if not np.allclose(cov, cov.T) or np.min(np.linalg.eigvalsh(cov)) < -1e-12:
                    raise ValueError(f"{name} must be symmetric PSD")
                setattr(self, name, cov)

    @property
    def n_stored(self) -> int:
        return len(range(self.burn_in + self.thin - 1, self.n_iter, self.thin))


@dataclass
class ChainOutput:
    """Stored (post burn-in, thinned) draws of a chain."""

    beta: np.ndarray
    theta: np.ndarray
    log_post: np.ndarray
    residual: np.ndarray
    accept_rate: float
    seed: int
    iteration: np.ndarray
    s_missing: Optional[np.ndarray] = None
    n_failures: int = 0
    scale: float = np.nan
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return self.beta.shape[0]

    def state(self, i, model: MomentModel, S) -> ManifoldState:
        """Rebuild the :class:`ManifoldState` of stored draw ``i``."""
        return make_state(model, S, self.beta[i], self.theta[i], check=False)

    def table(self):
        """Column names and the ``(N, k)`` matrix written by :meth:`to_csv`."""
        p, J = self.beta.shape[1], self.theta.shape[1]
        names = ["iteration"] + [f"beta_{k + 1}" for k in range(p)]
        names += [f"theta_{j + 1}" for j in range(J)]
        cols = [self.iteration[:, None], self.beta, self.theta]
        if self.s_missing is not None:
            names += [f"s_missing_{k + 1}" for k in range(self.s_missing.shape[1])]
            cols.append(self.s_missing)
        names.append("log_post")
        cols.append(self.log_post[:, None])
        return names, np.hstack(cols)

    def to_csv(self, path) -> None:
        names, data = self.table()
        np.savetxt(path, data, delimiter=",", header=",".join(names), comments="",
                   fmt="%.17g")


@dataclass
class WeightedSample:
    """Importance-weighted draws with raw and self-normalized weights."""

    beta: np.ndarray
    theta: np.ndarray
    log_weights: np.ndarray
    weights: np.ndarray
    ess: float
    n_failures: int = 0
    s_missing: Optional[np.ndarray] = None

    def __len__(self):
        return self.beta.shape[0]

    def table(self):
        p, J = self.beta.shape[1], self.theta.shape[1]
        names = [f"beta_{k + 1}" for k in range(p)] + [f"theta_{j + 1}" for j in range(J)]
        cols = [self.beta, self.theta]
        if self.s_missing is not None:
            names += [f"s_missing_{k + 1}" for k in range(self.s_missing.shape[1])]
            cols.append(self.s_missing)
        names += ["log_weight", "weight"]
        cols += [self.log_weights[:, None], self.weights[:, None]]
        return names, np.hstack(cols)

    def to_csv(self, path) -> None:
        names, data = self.table()
        np.savetxt(path, data, delimiter=",", header=",".join(names), comments="",
                   fmt="%.17g")


class OffSimplex:
    """Marker returned by :func:`propose_joint` for proposals outside the simplex."""

    def __repr__(self):
        return "OffSimplex"


OFF_SIMPLEX = OffSimplex()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def theta_from_eta(eta) -> np.ndarray:
    """Full probability vector from ``eta_j = log(theta_{j+1} / theta_j)``."""
    logt = np.concatenate([[0.0], np.cumsum(eta)])
    t = np.exp(logt - logt.max())
    return t / t.sum()


def eta_from_theta(theta_full) -> np.ndarray:
    return np.diff(np.log(theta_full))


def _dirichlet_alpha(spec, J, default=1.0) -> np.ndarray:
    comp = getattr(spec, "theta", None) or getattr(spec, "theta_given_beta", None)
    if isinstance(comp, Dirichlet):
        return comp.alpha_vector(J)
    return np.full(J, default)


def _beta_prior_cov(spec) -> Optional[np.ndarray]:
    comp = getattr(spec, "beta", None)
    if isinstance(comp, Gaussian):
        return comp.cov
    if isinstance(comp, Laplace):
        return np.atleast_2d(comp.sd ** 2)
    return None


class _Tracker:
    """Acceptance counting and windowed Robbins-Monro adaptation."""

    def __init__(self, cfg: ChainConfig, log_scale: float):
        self.cfg = cfg
        self.log_scale = log_scale
        self.accepted = 0
        self.window_acc = 0
        self.window_n = 0
        self.n_windows = 0
        self.post_acc = 0
        self.post_n = 0

    @property
    def scale(self):
        return np.exp(self.log_scale)

    def update(self, it: int, accepted: bool):
        self.accepted += accepted
        if it < self.cfg.burn_in:
            self.window_acc += accepted
            self.window_n += 1
            if self.window_n == self.cfg.adapt_window:
                self.n_windows += 1
                rate = self.window_acc / self.window_n
                self.log_scale += (rate - self.cfg.target_accept) / np.sqrt(self.n_windows)
                self.window_acc = self.window_n = 0
        else:
            self.post_acc += accepted
            self.post_n += 1

    @property
    def accept_rate(self):
        return self.post_acc / self.post_n if self.post_n else 0.0


class _Failures:
    def __init__(self, cfg: ChainConfig):
        self.cfg = cfg
        self.count = 0

    def record(self, partial_fn):
        self.count += 1
        if self.count > self.cfg.max_fail_frac * self.cfg.n_iter:
            raise SamplerAbort(
                f"{self.count} solver failures exceed "
                f"{self.cfg.max_fail_frac:.0%} of {self.cfg.n_iter} iterations",
                partial=partial_fn(),
            )

    def finish(self):
        if self.count:
            warnings.warn(f"{self.count} proposals rejected after solver failures",
                          RuntimeWarning, stacklevel=3)


class _Store:
    def __init__(self, cfg: ChainConfig, p, J, n_s=0):
        n = cfg.n_stored
        self.cfg = cfg
        self.beta = np.empty((n, p))
        self.theta = np.empty((n, J))
        self.log_post = np.empty(n)
        self.residual = np.empty(n)
        self.iteration = np.empty(n, dtype=np.int64)
        self.s = np.empty((n, n_s)) if n_s else None
        self.k = 0

    def due(self, it):
        return it >= self.cfg.burn_in and (it - self.cfg.burn_in + 1) % self.cfg.thin == 0

    def put(self, it, beta, theta_full, lp, resid, s=None):
        k = self.k
        self.beta[k], self.theta[k], self.log_post[k] = beta, theta_full, lp
        self.residual[k], self.iteration[k] = resid, it
        if self.s is not None:
            self.s[k] = np.ravel(s)
        self.k += 1

    def output(self, tracker, failures, **extra) -> ChainOutput:
        k = self.k
        return ChainOutput(self.beta[:k].copy(), self.theta[:k].copy(),
                           self.log_post[:k].copy(), self.residual[:k].copy(),
                           tracker.accept_rate, self.cfg.seed, self.iteration[:k].copy(),
                           None if self.s is None else self.s[:k].copy(),
                           failures.count, tracker.scale, extra)


def _check_model(model: MomentModel):
    if not model.just_identified:
        raise ModelError("samplers need a just-identified model (r == p)")


def _evaluate(model, pts, counts, spec, beta, theta_full, tol):
    """Return ``(log_post, state, bundle)`` at an on-manifold pair."""
    state = make_state(model, pts, beta, theta_full, check=False)
    E = expected_dg_dbeta(model, pts, theta_full, beta)
    bundle = _bundle(E, state.H)
    lp = prior_log_density(spec, state, bundle, tol=tol)
    if lp > -np.inf:
        lp += log_likelihood(counts, theta_full)
    return lp, state, bundle


# ---------------------------------------------------------------------------
# marginal method
# ---------------------------------------------------------------------------


def _eta_preconditioner(counts, alpha):
    """Standard deviations of ``log Gamma(n_j + alpha_j)``; differences of
    these log-gammas have the ``eta`` law of a Dirichlet(n + alpha)."""
    return np.sqrt(polygamma(1, np.asarray(counts, dtype=float) + alpha))


def _initial_theta(counts, alpha):
    a = np.asarray(counts, dtype=float) + alpha
    return a / a.sum()


def run_marginal_mcmc(model: MomentModel, dataset: Dataset, spec, cfg: ChainConfig,
                      *, theta0=None) -> ChainOutput:
    """Random-walk Metropolis on ``eta``, solving for ``beta`` per proposal.

    The target is the Lebesgue density of ``theta`` times the
    ``eta -> theta`` Jacobian ``prod_j theta_j``. Proposals are
    ``eta + s * D diag(c) xi`` with ``D`` the differencing matrix and
    ``c`` the log-gamma scales of the Dirichlet(n + alpha) posterior.
    """
    _check_model(model)
    rng = make_rng(cfg.seed)
    pts = dataset.support.points
    counts = dataset.counts
    J, p = pts.shape[0], model.p
    alpha = _dirichlet_alpha(spec, J)
    pre = _eta_preconditioner(counts, alpha)

    def target(theta_full, beta_init):
        beta = solve_beta(model, pts, theta_full, beta_init)
        lp, state, bundle = _evaluate(model, pts, counts, spec, beta, theta_full,
                                      cfg.tol_manifold)
        tgt = lp + bundle.log_corr_marginal + np.sum(np.log(theta_full))
        return tgt, lp, beta, state.residual

    theta = _initial_theta(counts, alpha) if theta0 is None else np.asarray(theta0, float)
    eta = eta_from_theta(theta)
    tgt, lp, beta, resid = target(theta, None)
    if not np.isfinite(tgt):
        raise SamplerAbort("initial state has zero posterior density")

    d = J - 1
    tracker = _Tracker(cfg, np.log(cfg.init_scale or 2.38 / np.sqrt(d)))
    fails = _Failures(cfg)
    store = _Store(cfg, p, J)

    for it in range(cfg.n_iter):
        v = pre * rng.standard_normal(J)
        eta_c = eta + tracker.scale * np.diff(v)
        log_u = np.log(rng.uniform())
        theta_c = theta_from_eta(eta_c)
        accepted = False
        if np.all(theta_c > 0):
            try:
                tgt_c, lp_c, beta_c, resid_c = target(theta_c, beta)
            except _SOLVE_FAILURES:
                fails.record(lambda: store.output(tracker, fails))
            else:
                if log_u < tgt_c - tgt:
                    eta, theta, tgt, lp, beta, resid = eta_c, theta_c, tgt_c, lp_c, beta_c, resid_c
                    accepted = True
        tracker.update(it, accepted)
        if store.due(it):
            store.put(it, beta, theta, lp, resid)
    fails.finish()
    return store.output(tracker, fails)


# ---------------------------------------------------------------------------
# joint method
# ---------------------------------------------------------------------------


def _el_theta(G, counts, max_iter=100):
    """Empirical-likelihood weights ``argmax sum n_j log theta_j`` subject to
    ``sum theta_j g_j = 0``, via Newton on the convex dual in ``lambda``.

    Returns ``None`` when the constraint is infeasible for the observed atoms.
    """
    n = counts.sum()
    obs = counts > 0
    Go, no = G[obs], counts[obs].astype(float)
    lam = np.zeros(G.shape[1])
    for _ in range(max_iter):
        den = 1.0 + Go @ lam
        grad = -(no / den) @ Go
        if np.max(np.abs(grad)) < 1e-12 * n:
            break
        hess = (Go * (no / den ** 2)[:, None]).T @ Go
        try:
            step = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        obj = -np.sum(no * np.log(den))
        t = 1.0
        for _ in range(60):
            cand = lam + t * step
            den_c = 1.0 + Go @ cand
            if np.all(den_c > 0) and -np.sum(no * np.log(den_c)) <= obj:
                break
            t *= 0.5
        else:
            return None
        lam = cand
    else:
        return None
    theta = np.zeros(G.shape[0])
    theta[obs] = no / (n * (1.0 + Go @ lam))
    return theta


@dataclass
class _JointTuning:
    sigma_beta: np.ndarray
    sigma_Q: np.ndarray
    beta_hat: np.ndarray
    theta_init: np.ndarray
    beta_init: np.ndarray


def _joint_tuning(model, dataset, spec, cfg, rng) -> _JointTuning:
    """Proposal covariances from a Bayesian-bootstrap pilot run.

    ``Sigma_beta = (Sigma_0^{-1} + Sigma_BB^{-1})^{-1}``, ``beta_hat`` is the
    matching precision-weighted mean and ``Sigma_Q = diag(theta_hat^2)`` with
    ``theta_hat`` the empirical-likelihood weights at ``beta_hat``.
    """
    pts, counts = dataset.support.points, dataset.counts
    J, p = pts.shape[0], model.p
    alpha = _dirichlet_alpha(spec, J)
    draws_t = rng.dirichlet(counts + alpha, size=cfg.bb_pilot)
    draws_b = []
    for th in draws_t:
        try:
            draws_b.append(solve_beta(model, pts, th))
        except _SOLVE_FAILURES:
            continue
    if len(draws_b) < max(10, p + 2):
        raise SamplerAbort("Bayesian-bootstrap pilot failed to solve for beta")
    draws_b = np.array(draws_b)
    mu_bb = draws_b.mean(axis=0)
    cov_bb = np.atleast_2d(np.cov(draws_b, rowvar=False)) + 1e-12 * np.eye(p)
    cov0 = _beta_prior_cov(spec)
    if cov0 is None:
        sigma_beta, beta_hat = cov_bb, mu_bb
    else:
        prec0, prec_bb = np.linalg.inv(cov0), np.linalg.inv(cov_bb)
        sigma_beta = np.linalg.inv(prec0 + prec_bb)
        mu0 = np.broadcast_to(getattr(spec.beta, "mean", getattr(spec.beta, "m", 0.0)), (p,))
        beta_hat = sigma_beta @ (prec0 @ mu0 + prec_bb @ mu_bb)
    theta_init = draws_t.mean(axis=0)
    beta_init = solve_beta(model, pts, theta_init)

    if cfg.sigma_Q is not None:
        sigma_Q = cfg.sigma_Q
    else:
        th_hat = None
        try:
            th_hat = _el_theta(_g_matrix(model, pts, beta_hat), counts)
        except EvaluationError:
            pass
        if th_hat is None:
            th_hat = theta_init.copy()
        th_hat = np.maximum(th_hat, 1.0 / (2.0 * max(dataset.n, 1) * J))
        sigma_Q = np.diag(th_hat[:-1] ** 2)
    if cfg.sigma_beta is not None:
        sigma_beta = cfg.sigma_beta
    return _JointTuning(sigma_beta, sigma_Q, beta_hat, theta_init, beta_init)


def propose_joint(state: ManifoldState, model: MomentModel, S, cfg: ChainConfig, rng,
                  *, scale=1.0, chol_beta=None, chol_Q=None, beta_density=None):
    """Two-stage proposal: Gaussian ``beta*`` then projected Gaussian ``theta*``.

    Returns ``(proposal, log_q_forward)``; ``proposal`` is :data:`OFF_SIMPLEX`
    (with ``log_q = nan``) when ``theta*`` leaves the open simplex or the
    projection is degenerate.
    """
    pts = S.points if hasattr(S, "points") else np.asarray(S, dtype=float)
    p, n = model.p, state.theta.size
    if chol_beta is None:
        chol_beta = _psd_factor(cfg.sigma_beta, p)
    if chol_Q is None:
        chol_Q = _psd_factor(cfg.sigma_Q, n)
    if beta_density is None:
        beta_density = _GaussFactor(chol_beta)
    beta_s = state.beta + scale * chol_beta @ rng.standard_normal(p)
    pi_s = state.theta + scale * chol_Q @ rng.standard_normal(n)
    try:
        G = _g_matrix(model, pts, beta_s)
        proj = build_projection((G[:-1] - G[-1]).T, G[-1])
    except (EvaluationError, RankDeficientConstraint, np.linalg.LinAlgError):
        return OFF_SIMPLEX, np.nan
    theta_s = proj.apply(pi_s)
    if np.any(theta_s <= 0) or theta_s.sum() >= 1.0:
        return OFF_SIMPLEX, np.nan
    prop = make_state(model, pts, beta_s, theta_s, check=False)
    try:
        bundle = _bundle(expected_dg_dbeta(model, pts, prop.theta_full, beta_s), prop.H)
    except SingularJacobian:
        return OFF_SIMPLEX, np.nan
    Sq = scale ** 2 * chol_Q @ chol_Q.T
    cov = proj.B_star @ Sq @ proj.B_star.T
    log_q = (beta_density.logpdf(beta_s - state.beta, scale)
             + SingularGaussian(proj.apply(state.theta), cov).logpdf(theta_s)
             + bundle.log_corr_joint)
    return prop, log_q


def _psd_factor(cov, n):
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (n, n):
        raise ValueError(f"proposal covariance must be {n}x{n}")
    lam, V = np.linalg.eigh(cov)
    return V * np.sqrt(np.maximum(lam, 0.0))


class _GaussFactor:
    """``N(0, s^2 F F')`` log density for a fixed full-rank factor ``F``."""

    def __init__(self, factor):
        self.factor = factor
        sign, self.log_det = np.linalg.slogdet(factor)
        # a degenerate (zero) proposal contributes a constant
        self.degenerate = sign == 0
        self.inv = None if self.degenerate else np.linalg.inv(factor)
        self.k = factor.shape[0]

    def logpdf(self, dx, scale=1.0) -> float:
        if self.degenerate:
            return 0.0
        z = self.inv @ dx / scale
        return float(-0.5 * z @ z - self.log_det - self.k * np.log(scale)
                     - 0.5 * self.k * np.log(2 * np.pi))


def run_joint_mcmc(model: MomentModel, dataset: Dataset, spec, cfg: ChainConfig,
                   ) -> ChainOutput:
    """Metropolis-Hastings with on-manifold proposals (no ``beta`` solves)."""
    if cfg.block_K is not None:
        return run_block_joint_mcmc(model, dataset, spec, cfg)
    _check_model(model)
    rng = make_rng(cfg.seed)
    pts, counts = dataset.support.points, dataset.counts
    J, p = pts.shape[0], model.p
    tune = _joint_tuning(model, dataset, spec, cfg, rng)
    chol_b = _psd_factor(tune.sigma_beta, p)
    chol_Q = _psd_factor(tune.sigma_Q, J - 1)
    Sq = chol_Q @ chol_Q.T
    beta_density = _GaussFactor(chol_b)

    lp, state, bundle = _evaluate(model, pts, counts, spec, tune.beta_init,
                                  tune.theta_init, cfg.tol_manifold)
    if not np.isfinite(lp):
        raise SamplerAbort("initial state has zero posterior density")
    proj = build_projection(state.H, state.gJ)

    tracker = _Tracker(cfg, np.log(cfg.init_scale or 2.38 / np.sqrt(J - 1)))
    fails = _Failures(cfg)
    store = _Store(cfg, p, J)
    for it in range(cfg.n_iter):
        s = tracker.scale
        prop, log_qf = propose_joint(state, model, pts, cfg, rng, scale=s,
                                     chol_beta=chol_b, chol_Q=chol_Q,
                                     beta_density=beta_density)
        log_u = np.log(rng.uniform())
        accepted = False
        if prop is not OFF_SIMPLEX:
            try:
                lp_c, _, bundle_c = _evaluate(model, pts, counts, spec, prop.beta,
                                              prop.theta_full, cfg.tol_manifold)
                proj_c = build_projection(prop.H, prop.gJ)
                cov_r = s * s * proj.B_star @ Sq @ proj.B_star.T
                log_qr = (beta_density.logpdf(state.beta - prop.beta, s)
                          + SingularGaussian(proj.apply(prop.theta), cov_r).logpdf(state.theta)
                          + bundle.log_corr_joint)
            except OffSupport:
                lp_c = -np.inf
            except _SOLVE_FAILURES + (RankDeficientConstraint,):
                fails.record(lambda: store.output(tracker, fails))
                lp_c = -np.inf
            if np.isfinite(lp_c) and log_u < lp_c - lp + log_qr - log_qf:
                state, lp, bundle, proj = prop, lp_c, bundle_c, proj_c
                accepted = True
        tracker.update(it, accepted)
        if store.due(it):
            store.put(it, state.beta, state.theta_full, lp, state.residual)
    fails.finish()
    return store.output(tracker, fails, sigma_beta=tune.sigma_beta,
                        beta_hat=tune.beta_hat)


def _block_projection(G, theta, u, v):
    """Projection for the ``u`` block with the ``v`` block held fixed."""
    gJ = G[-1]
    Hu = (G[u] - gJ).T
    c = (G[v] - gJ).T @ theta[v] + gJ
    return build_projection(Hu, c)


def _block_log_jacobian(E, G, u):
    """``1/2 log|J_u J_u'| - 1/2 log|J J' + I|`` for the columns ``u`` of ``J_theta``."""
    p = E.shape[0]
    H = (G[:-1] - G[-1]).T
    Jt = -np.linalg.solve(E, H)
    Ju = Jt[:, u]
    return _half_logdet_spd(Ju @ Ju.T) - _half_logdet_spd(Jt @ Jt.T + np.eye(p))


def run_block_joint_mcmc(model: MomentModel, dataset: Dataset, spec, cfg: ChainConfig,
                         ) -> ChainOutput:
    """Joint method updating ``K = cfg.block_K`` random coordinates of ``theta``.

    The ``K``-dimensional proposal is projected onto the block fiber
    ``H_u theta_u + H_v theta_v + g_J = 0`` with ``theta_v`` fixed; the
    acceptance ratio carries the Jacobian of the block parametrization.
    """
    _check_model(model)
    pts, counts = dataset.support.points, dataset.counts
    J, p = pts.shape[0], model.p
    K = cfg.block_K if cfg.block_K is not None else J - 1
    if not p <= K <= J - 1:
        raise ValueError(f"block_K must satisfy p <= K <= J - 1, got {K}")
    rng = make_rng(cfg.seed)
    tune = _joint_tuning(model, dataset, spec, cfg, rng)
    chol_b = _psd_factor(tune.sigma_beta, p)
    q_sd = np.sqrt(np.diag(tune.sigma_Q))

    beta = tune.beta_init
    theta = tune.theta_init[:-1].copy()
    lp, state, _ = _evaluate(model, pts, counts, spec, beta, tune.theta_init,
                             cfg.tol_manifold)
    if not np.isfinite(lp):
        raise SamplerAbort("initial state has zero posterior density")
    G = state.g
    E = expected_dg_dbeta(model, pts, state.theta_full, beta)

    tracker = _Tracker(cfg, np.log(cfg.init_scale or 2.38 / np.sqrt(K)))
    fails = _Failures(cfg)
    store = _Store(cfg, p, J)
    all_idx = np.arange(J - 1)
    for it in range(cfg.n_iter):
        s = tracker.scale
        u = np.sort(rng.choice(J - 1, size=K, replace=False))
        mask = np.ones(J - 1, bool)
        mask[u] = False
        v = all_idx[mask]
        beta_c = beta + s * chol_b @ rng.standard_normal(p)
        pi_u = theta[u] + s * q_sd[u] * rng.standard_normal(K)
        log_u = np.log(rng.uniform())
        accepted = False
        try:
            G_c = _g_matrix(model, pts, beta_c)
            proj_c = _block_projection(G_c, theta, u, v)
            th_u = proj_c.apply(pi_u)
            theta_c = theta.copy()
            theta_c[u] = th_u
            if np.all(th_u > 0) and theta_c.sum() < 1.0:
                lp_c, state_c, _ = _evaluate(model, pts, counts, spec, beta_c,
                                             np.append(theta_c, 1 - theta_c.sum()),
                                             cfg.tol_manifold)
                if np.isfinite(lp_c):
                    E_c = expected_dg_dbeta(model, pts, state_c.theta_full, beta_c)
                    proj = _block_projection(G, theta, u, v)
                    Bq = proj_c.B_star * (s * q_sd[u])
                    Br = proj.B_star * (s * q_sd[u])
                    log_qf = (SingularGaussian(proj_c.apply(theta[u]), Bq @ Bq.T).logpdf(th_u)
                              + _block_log_jacobian(E_c, G_c, u))
                    log_qr = (SingularGaussian(proj.apply(th_u), Br @ Br.T).logpdf(theta[u])
                              + _block_log_jacobian(E, G, u))
                    if log_u < lp_c - lp + log_qr - log_qf:
                        beta, theta, lp, G, E, state = beta_c, theta_c, lp_c, G_c, E_c, state_c
                        accepted = True
        except OffSupport:
            pass
        except _SOLVE_FAILURES + (RankDeficientConstraint,):
            fails.record(lambda: store.output(tracker, fails))
        tracker.update(it, accepted)
        if store.due(it):
            store.put(it, beta, state.theta_full, lp, state.residual)
    fails.finish()
    return store.output(tracker, fails, sigma_beta=tune.sigma_beta,
                        beta_hat=tune.beta_hat)


# ---------------------------------------------------------------------------
# Bayesian bootstrap importance sampling
# ---------------------------------------------------------------------------


def normalize_log_weights(log_w):
    """Return ``(w*, ess)`` for raw log-weights (``-inf`` means zero weight)."""
    log_w = np.asarray(log_w, dtype=float)
    if not np.any(np.isfinite(log_w)):
        raise SamplerAbort("all importance weights are zero")
    w = np.exp(log_w - np.max(log_w))
    w /= w.sum()
    return w, float(1.0 / np.sum(w * w))


def _separable_adhoc(spec, alpha) -> bool:
    return (isinstance(spec, GeometricAdhoc) and spec.joint is None
            and isinstance(spec.theta, Dirichlet)
            and np.allclose(spec.theta.alpha_vector(alpha.size), alpha))


def bb_log_weights(model: MomentModel, S, spec, beta_draws, theta_draws, alpha,
                   *, tol=TOL_MANIFOLD) -> np.ndarray:
    """Raw log importance weights of Dirichlet(n + alpha) draws.

    The weights do not depend on the counts. For the geometric ad hoc prior
    with a Dirichlet(alpha) kernel on ``theta`` they reduce to
    ``log pi(beta)``; otherwise they are
    ``log p(beta, theta) + 1/2 log|J J' + I| - sum (alpha_j - 1) log theta_j``.
    """
    pts = S.points if hasattr(S, "points") else np.asarray(S, dtype=float)
    J = pts.shape[0]
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (J,))
    beta_draws = np.atleast_2d(np.asarray(beta_draws, dtype=float))
    theta_draws = np.atleast_2d(np.asarray(theta_draws, dtype=float))
    out = np.empty(beta_draws.shape[0])
    if _separable_adhoc(spec, alpha):
        for k, b in enumerate(beta_draws):
            out[k] = 0.0 if spec.beta is None else spec.beta.logpdf(b)
        return out
    for k, (b, th) in enumerate(zip(beta_draws, theta_draws)):
        if np.any(th <= 0) or not np.all(np.isfinite(b)):
            out[k] = -np.inf
            continue
        state = make_state(model, pts, b, th, check=False)
        bundle = _bundle(expected_dg_dbeta(model, pts, th, b), state.H)
        lp = prior_log_density(spec, state, bundle, tol=tol)
        out[k] = lp + bundle.log_corr_marginal - np.sum((alpha - 1.0) * np.log(th))
    return out


def bayesian_bootstrap_is(model: MomentModel, dataset: Dataset, spec, M: int,
                          alpha=None, rng=None) -> WeightedSample:
    """Draw ``theta ~ Dirichlet(n + alpha)``, solve for ``beta`` and reweight."""
    _check_model(model)
    rng = make_rng(0) if rng is None else rng
    pts, counts = dataset.support.points, dataset.counts
    J = pts.shape[0]
    alpha = _dirichlet_alpha(spec, J) if alpha is None else \
        np.broadcast_to(np.asarray(alpha, dtype=float), (J,)).copy()
    thetas = rng.dirichlet(counts + alpha, size=M)
    betas = np.full((M, model.p), np.nan)
    failures = 0
    for k, th in enumerate(thetas):
        try:
            betas[k] = solve_beta(model, pts, th)
        except _SOLVE_FAILURES:
            failures += 1
    log_w = np.full(M, -np.inf)
    ok = np.all(np.isfinite(betas), axis=1)
    log_w[ok] = bb_log_weights(model, pts, spec, betas[ok], thetas[ok], alpha)
    if failures:
        warnings.warn(f"{failures} bootstrap draws got zero weight after solver failures",
                      RuntimeWarning, stacklevel=2)
    w, ess = normalize_log_weights(log_w)
    return WeightedSample(betas, thetas, log_w, w, ess, failures)


def sir_resample(ws: WeightedSample, M_out: int, rng):
    """Multinomial resampling; returns ``(beta, theta[, s_missing])`` arrays."""
    w = np.asarray(ws.weights, dtype=float)
    if w.size == 0 or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise ValueError("weights must be finite with positive total")
    idx = rng.choice(w.size, size=M_out, replace=True, p=w / w.sum())
    if ws.s_missing is not None:
        return ws.beta[idx], ws.theta[idx], ws.s_missing[idx]
    return ws.beta[idx], ws.theta[idx]


# ---------------------------------------------------------------------------
# missing support
# ---------------------------------------------------------------------------


_CONTINUOUS = (Gaussian, Laplace, Uniform)


def _coord_kinds(f_S, d):
    """Per-coordinate kind of an atom prior: 'cont', 'discrete' or 'fixed'."""
    kinds = np.empty(d, dtype=object)
    if isinstance(f_S, Product):
        for comp, idx in f_S.parts:
            kinds[np.atleast_1d(idx)] = _kind(comp)
    else:
        kinds[:] = _kind(f_S)
    return kinds


def _kind(comp):
    if isinstance(comp, PointMass):
        return "fixed"
    if isinstance(comp, DiscreteUniform):
        return "discrete"
    if isinstance(comp, _CONTINUOUS):
        return "cont"
    raise ModelError(f"unsupported atom prior {type(comp).__name__}")


def _coord_values(f_S, d):
    vals = [None] * d
    parts = f_S.parts if isinstance(f_S, Product) else [(f_S, np.arange(d))]
    for comp, idx in parts:
        for i in np.atleast_1d(idx):
            if isinstance(comp, DiscreteUniform):
                vals[i] = np.asarray(comp.values, dtype=float)
    return vals


def _missing_target(model, S_obs, counts_star, spec, f_S, J_tilde, free, tol):
    """Closure evaluating the log density of ``(theta*, S~)`` (Lebesgue in both)."""
    J_obs = S_obs.shape[0]
    missing = np.arange(J_obs, J_obs + J_tilde)

    def target(theta_full, S_t, beta_init):
        pts = np.vstack([S_obs, S_t])
        beta = solve_beta(model, pts, theta_full, beta_init)
        log_f = float(sum(f_S.logpdf(s) for s in S_t))
        if not np.isfinite(log_f):
            return -np.inf, -np.inf, beta, np.inf
        state = make_state(model, pts, beta, theta_full, check=False)
        E = expected_dg_dbeta(model, pts, theta_full, beta)
        bundle = _bundle(E, state.H)
        _, corr = _missing_parts(model, pts, theta_full, beta, missing, free, E,
                                 bundle.gram)
        lp = prior_log_density(spec, state, bundle, tol=tol, log_corr=corr)
        if lp == -np.inf:
            return -np.inf, -np.inf, beta, state.residual
        lp += log_likelihood(counts_star, theta_full) + log_f
        return lp + corr, lp, beta, state.residual

    return target


def run_missing_support_sampler(model: MomentModel, dataset: Dataset, spec, f_S,
                                J_tilde: int, cfg: ChainConfig, *, S_init=None
                                ) -> ChainOutput:
    """Metropolis-within-Gibbs over ``theta*`` (in ``eta`` coordinates) and the
    ``J_tilde`` unobserved atoms, which are appended after the observed ones.

    ``f_S`` is the prior of a single missing atom (a ``d``-vector);
    :class:`PointMass` coordinates stay fixed, :class:`DiscreteUniform`
    coordinates are resampled uniformly and continuous coordinates move by
    a Gaussian random walk with scale ``cfg.s_scale`` times the prior sd.
    """
    _check_model(model)
    if model.dg_ds is None:
        raise ModelError(f"model {model.name!r} lacks dg_ds")
    if J_tilde < 1:
        raise ValueError("J_tilde must be at least 1")
    rng = make_rng(cfg.seed)
    S_obs = dataset.support.points
    d = S_obs.shape[1]
    Js = S_obs.shape[0] + J_tilde
    counts = np.concatenate([dataset.counts, np.zeros(J_tilde, dtype=np.int64)])
    kinds = _coord_kinds(f_S, d)
    free = kinds == "cont"
    disc = kinds == "discrete"
    values = _coord_values(f_S, d)
    sd = np.broadcast_to(np.asarray(f_S.sd, dtype=float), (d,))
    step = cfg.s_scale * np.where(free, sd, 0.0)
    target = _missing_target(model, S_obs, counts, spec, f_S, J_tilde, free,
                             cfg.tol_manifold)

    alpha = _dirichlet_alpha(spec, Js)
    pre = _eta_preconditioner(counts, alpha)
    theta = _initial_theta(counts, alpha)
    S_t = (np.array(f_S.sample(rng, J_tilde), dtype=float).reshape(J_tilde, d)
           if S_init is None else np.array(S_init, dtype=float).reshape(J_tilde, d))
    tgt = -np.inf
    for _ in range(100):
        try:
            tgt, lp, beta, resid = target(theta, S_t, None)
        except _SOLVE_FAILURES:
            tgt = -np.inf
        if np.isfinite(tgt):
            break
        S_t = np.array(f_S.sample(rng, J_tilde), dtype=float).reshape(J_tilde, d)
    if not np.isfinite(tgt):
        raise SamplerAbort("could not find an initial state with positive density")
    eta = eta_from_theta(theta)

    tr_eta = _Tracker(cfg, np.log(cfg.init_scale or 2.38 / np.sqrt(Js - 1)))
    n_cont = max(int(free.sum()) * J_tilde, 1)
    tr_s = _Tracker(cfg, np.log(2.38 / np.sqrt(n_cont)) + np.log(10.0))
    fails = _Failures(cfg)
    store = _Store(cfg, model.p, Js, J_tilde * d)
    disc_idx = np.flatnonzero(disc)

    for it in range(cfg.n_iter):
        # theta block
        v = pre * rng.standard_normal(Js)
        eta_c = eta + tr_eta.scale * np.diff(v)
        log_u = np.log(rng.uniform())
        theta_c = theta_from_eta(eta_c)
        accepted = False
        if np.all(theta_c > 0):
            try:
                tgt_c, lp_c, beta_c, resid_c = target(theta_c, S_t, beta)
            except _SOLVE_FAILURES:
                fails.record(lambda: store.output(tr_eta, fails))
                tgt_c = -np.inf
            # eta -> theta Jacobian
            log_ratio = (tgt_c + np.sum(np.log(theta_c))) - (tgt + np.sum(np.log(theta)))
            if log_u < log_ratio:
                eta, theta, tgt, lp, beta, resid = eta_c, theta_c, tgt_c, lp_c, beta_c, resid_c
                accepted = True
        tr_eta.update(it, accepted)

        # support block
        S_c = S_t + tr_s.scale * step * rng.standard_normal((J_tilde, d))
        for i in disc_idx:
            S_c[:, i] = rng.choice(values[i], size=J_tilde)
        log_u = np.log(rng.uniform())
        accepted = False
        try:
            tgt_c, lp_c, beta_c, resid_c = target(theta, S_c, beta)
        except _SOLVE_FAILURES:
            fails.record(lambda: store.output(tr_eta, fails))
            tgt_c = -np.inf
        if log_u < tgt_c - tgt:
            S_t, tgt, lp, beta, resid = S_c, tgt_c, lp_c, beta_c, resid_c
            accepted = True
        tr_s.update(it, accepted)

        if store.due(it):
            store.put(it, beta, theta, lp, resid, S_t)
    fails.finish()
    return store.output(tr_eta, fails, s_accept_rate=tr_s.accept_rate)


def bayesian_bootstrap_missing_is(model: MomentModel, dataset: Dataset, spec, f_S,
                                  J_tilde: int, M: int, rng=None) -> WeightedSample:
    """Importance sampling with missing atoms: ``S~ ~ f_S`` and
    ``theta* ~ Dirichlet(n* + alpha)``, weighted by the target over the
    proposal density."""
    _check_model(model)
    rng = make_rng(0) if rng is None else rng
    S_obs = dataset.support.points
    J_obs, d = S_obs.shape
    Js = J_obs + J_tilde
    counts = np.concatenate([dataset.counts, np.zeros(J_tilde, dtype=np.int64)])
    alpha = _dirichlet_alpha(spec, Js)
    free = _coord_kinds(f_S, d) == "cont"
    missing = np.arange(J_obs, Js)
    separable = _separable_adhoc(spec, alpha)
    thetas = rng.dirichlet(counts + alpha, size=M)
    S_draws = np.array(f_S.sample(rng, M * J_tilde), dtype=float).reshape(M, J_tilde, d)
    betas = np.full((M, model.p), np.nan)
    log_w = np.full(M, -np.inf)
    failures = 0
    for k in range(M):
        pts = np.vstack([S_obs, S_draws[k]])
        th = thetas[k]
        try:
            b = solve_beta(model, pts, th)
            betas[k] = b
            if separable:
                log_w[k] = 0.0 if spec.beta is None else spec.beta.logpdf(b)
                continue
            if np.any(th <= 0):
                continue
            state = make_state(model, pts, b, th, check=False)
            E = expected_dg_dbeta(model, pts, th, b)
            bundle = _bundle(E, state.H)
            _, corr = _missing_parts(model, pts, th, b, missing, free, E, bundle.gram)
            lp = prior_log_density(spec, state, bundle, log_corr=corr)
            log_w[k] = lp + corr - np.sum((alpha - 1.0) * np.log(th))
        except _SOLVE_FAILURES:
            failures += 1
    if failures:
        warnings.warn(f"{failures} bootstrap draws got zero weight after solver failures",
                      RuntimeWarning, stacklevel=2)
    w, ess = normalize_log_weights(log_w)
    return WeightedSample(betas, thetas, log_w, w, ess, failures,
                          S_draws.reshape(M, J_tilde * d))
