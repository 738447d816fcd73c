"""Moment-condition models, support sets and the affine constraint on theta.

Every model is stored in *vectorized* form: ``g(S, beta)`` maps the ``(J, d)``
support matrix to a ``(J, r)`` matrix whose row ``j`` is ``g(s_j, beta)``.
Derivatives follow the same convention, ``dg_dbeta(S, beta)`` has shape
``(J, r, p)`` and ``dg_ds(S, beta)`` has shape ``(J, r, d)``.

Probability vectors are passed around as the ``J - 1`` free coordinates
``theta = (theta_1, ..., theta_{J-1})``; the last coordinate is implied by
``theta_J = 1 - sum(theta)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, logit

from .exceptions import (
    EvaluationError,
    MaxIterationsExceeded,
    ModelError,
    MultipleRootsError,
    RankDeficientConstraint,
    SingularJacobian,
)

__all__ = [
    "TOL_MANIFOLD",
    "TOL_SOLVE",
    "SupportSet",
    "Dataset",
    "MomentModel",
    "ManifoldState",
    "register_model",
    "available_models",
    "make_builtin_model",
    "eval_moment",
    "build_constraint",
    "constraint_residual",
    "expected_dg_dbeta",
    "solve_beta",
    "make_state",
    "full_theta",
    "check_derivatives",
    "self_test",
]

TOL_MANIFOLD = 1e-8
TOL_SOLVE = 1e-10
ATE_CLIP = 1e-12


@dataclass(frozen=True)
class SupportSet:
    """The ``J`` known support atoms ``s_1, ..., s_J`` as a ``(J, d)`` array."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise ModelError("support points must be a (J, d) array")
        if pts.shape[0] < 2:
            raise ModelError(f"support needs J >= 2 atoms, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise ModelError("support points must be finite")
        if np.unique(pts, axis=0).shape[0] != pts.shape[0]:
            raise ModelError("support points must be pairwise distinct")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def J(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.J


@dataclass(frozen=True)
class Dataset:
    """Support atoms together with the observation count of each atom."""

    support: SupportSet
    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts)
        if counts.shape != (self.support.J,):
            raise ModelError(
                f"counts has shape {counts.shape}, expected ({self.support.J},)"
            )
        if np.any(counts < 0) or np.any(counts != np.round(counts)):
            raise ModelError("counts must be nonnegative integers")
        counts = counts.astype(np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def J(self) -> int:
        return self.support.J

    @classmethod
    def from_points(cls, points, counts=None) -> "Dataset":
        S = SupportSet(points)
        if counts is None:
            counts = np.ones(S.J, dtype=np.int64)
        return cls(S, counts)


@dataclass(frozen=True)
class MomentModel:
    """A just- (or over/under-) identified moment condition ``E g(Z, beta) = 0``.

    Parameters
    ----------
    name : str
    d, p, r : int
        Data, parameter and moment dimensions.
    g : callable
        ``g(S, beta) -> (J, r)``.
    dg_dbeta : callable
        ``dg_dbeta(S, beta) -> (J, r, p)``.
    dg_ds : callable, optional
        ``dg_ds(S, beta) -> (J, r, d)``; needed for missing-support inference.
    beta_solver : callable, optional
        Closed-form ``beta_solver(S, theta_full) -> (p,)``.
    beta_init : callable, optional
        Starting point ``beta_init(S, theta_full)`` for Newton iterations.
    """

    name: str
    d: int
    p: int
    r: int
    g: Callable
    dg_dbeta: Callable
    dg_ds: Optional[Callable] = None
    beta_solver: Optional[Callable] = None
    beta_init: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    @property
    def just_identified(self) -> bool:
        return self.r == self.p

    def without_solver(self) -> "MomentModel":
        """Copy of the model that always goes through the Newton path."""
        return MomentModel(self.name, self.d, self.p, self.r, self.g,
                           self.dg_dbeta, self.dg_ds, None, self.beta_init,
                           dict(self.params))

    @classmethod
    def from_pointwise(cls, name, d, p, r, g, dg_dbeta, dg_ds=None,
                       beta_solver=None, beta_init=None) -> "MomentModel":
        """Build a model from per-atom functions ``g(s, beta) -> (r,)`` etc.

        The per-atom functions are looped over the support; prefer writing
        vectorized functions directly when speed matters.
        """

        def gv(S, beta):
            return np.array([np.atleast_1d(g(s, beta)) for s in S], dtype=float)

        def dbv(S, beta):
            return np.array([np.reshape(dg_dbeta(s, beta), (r, p)) for s in S],
                            dtype=float)

        dsv = None
        if dg_ds is not None:
            def dsv(S, beta):
                return np.array([np.reshape(dg_ds(s, beta), (r, d)) for s in S],
                                dtype=float)

        return cls(name, d, p, r, gv, dbv, dsv, beta_solver, beta_init)


@dataclass(frozen=True)
class ManifoldState:
    """An admissible pair ``(beta, theta)`` with its cached constraint data.

    ``g`` holds ``g(s_j, beta)`` row-wise, shape ``(J, r)``; ``H`` is the
    ``(r, J-1)`` constraint matrix and ``gJ`` the last row of ``g``.
    """

    beta: np.ndarray
    theta: np.ndarray
    g: np.ndarray
    H: np.ndarray
    gJ: np.ndarray
    residual: float

    @property
    def theta_full(self) -> np.ndarray:
        return full_theta(self.theta)

    @property
    def interior(self) -> bool:
        return bool(np.all(self.theta_full > 0))


# ---------------------------------------------------------------------------
# theta helpers
# ---------------------------------------------------------------------------


def full_theta(theta) -> np.ndarray:
    """Append the implied last probability ``1 - sum(theta)``."""
    theta = np.asarray(theta, dtype=float)
    return np.append(theta, 1.0 - theta.sum())


def _as_full(theta, J) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size == J - 1:
        return full_theta(theta)
    if theta.size == J:
        return theta
    raise ModelError(f"theta has {theta.size} entries, expected {J - 1} or {J}")


def _points(S) -> np.ndarray:
    if isinstance(S, SupportSet):
        return S.points
    if isinstance(S, Dataset):
        return S.support.points
    pts = np.asarray(S, dtype=float)
    return pts[:, None] if pts.ndim == 1 else pts


# ---------------------------------------------------------------------------
# registry and built-in models
# ---------------------------------------------------------------------------

_REGISTRY: dict[str, Callable[..., MomentModel]] = {}


def register_model(name: str):
    """Decorator registering a model factory under ``name``.

    The factory receives the ``dims`` keyword arguments and must return a
    :class:`MomentModel`.
    """

    def deco(factory):
        _REGISTRY[name] = factory
        return factory

    return deco


def available_models() -> list[str]:
    return sorted(_REGISTRY)


def make_builtin_model(kind: str, **dims) -> MomentModel:
    """Instantiate a registered model by name.

    >>> make_builtin_model("mean").p
    1
    """
    try:
        factory = _REGISTRY[kind]
    except KeyError:
        raise ModelError(
            f"unknown model kind {kind!r}; available: {available_models()}"
        ) from None
    try:
        return factory(**dims)
    except TypeError as exc:
        raise ModelError(f"bad dims for {kind!r}: {exc}") from exc


def _positive_int(value, name):
    if int(value) != value or value < 1:
        raise ModelError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


@register_model("mean")
def _mean_model(d=1):
    d = _positive_int(d, "d")
    eye = np.eye(d)

    def g(S, beta):
        return S - beta

    def dg_dbeta(S, beta):
        return np.broadcast_to(-eye, (S.shape[0], d, d))

    def dg_ds(S, beta):
        return np.broadcast_to(eye, (S.shape[0], d, d))

    def solver(S, th):
        return th @ S

    return MomentModel("mean", d, d, d, g, dg_dbeta, dg_ds, solver,
                       params={"d": d})


@register_model("logistic")
def _logistic_model():
    def g(S, beta):
        return S - expit(beta[0])

    def dg_dbeta(S, beta):
        e = expit(beta[0])
        return np.full((S.shape[0], 1, 1), -e * (1.0 - e))

    def dg_ds(S, beta):
        return np.ones((S.shape[0], 1, 1))

    def solver(S, th):
        m = float(th @ S[:, 0])
        if not 0.0 < m < 1.0:
            raise EvaluationError(f"logistic mean {m} outside (0, 1)")
        return np.array([logit(m)])

    return MomentModel("logistic", 1, 1, 1, g, dg_dbeta, dg_ds, solver)


@register_model("linear_reg")
def _linear_reg_model(p=1):
    """``s = (y, x_1..x_p)``, ``g = x (y - beta'x)``."""
    p = _positive_int(p, "p")
    eye = np.eye(p)

    def g(S, beta):
        y, X = S[:, 0], S[:, 1:]
        return X * (y - X @ beta)[:, None]

    def dg_dbeta(S, beta):
        X = S[:, 1:]
        return -X[:, :, None] * X[:, None, :]

    def dg_ds(S, beta):
        y, X = S[:, 0], S[:, 1:]
        resid = y - X @ beta
        out = np.empty((S.shape[0], p, p + 1))
        out[:, :, 0] = X
        out[:, :, 1:] = resid[:, None, None] * eye - X[:, :, None] * beta[None, None, :]
        return out

    def solver(S, th):
        y, X = S[:, 0], S[:, 1:]
        Xw = X * th[:, None]
        return np.linalg.solve(Xw.T @ X, Xw.T @ y)

    return MomentModel("linear_reg", p + 1, p, p, g, dg_dbeta, dg_ds, solver,
                       params={"p": p})


@register_model("iv_reg")
def _iv_reg_model(p=1, r=None):
    """``s = (y, x_1..x_p, z_1..z_r)``, ``g = z (y - beta'x)``."""
    p = _positive_int(p, "p")
    r = p if r is None else _positive_int(r, "r")
    d = 1 + p + r

    def g(S, beta):
        y, X, Z = S[:, 0], S[:, 1:1 + p], S[:, 1 + p:]
        return Z * (y - X @ beta)[:, None]

    def dg_dbeta(S, beta):
        X, Z = S[:, 1:1 + p], S[:, 1 + p:]
        return -Z[:, :, None] * X[:, None, :]

    def dg_ds(S, beta):
        y, X, Z = S[:, 0], S[:, 1:1 + p], S[:, 1 + p:]
        resid = y - X @ beta
        out = np.zeros((S.shape[0], r, d))
        out[:, :, 0] = Z
        out[:, :, 1:1 + p] = -Z[:, :, None] * beta[None, None, :]
        out[:, :, 1 + p:] = resid[:, None, None] * np.eye(r)
        return out

    solver = None
    if r == p:
        def solver(S, th):
            y, X, Z = S[:, 0], S[:, 1:1 + p], S[:, 1 + p:]
            Zw = Z * th[:, None]
            return np.linalg.solve(Zw.T @ X, Zw.T @ y)

    return MomentModel("iv_reg", d, p, r, g, dg_dbeta, dg_ds, solver,
                       params={"p": p, "r": r})


@register_model("poisson_reg")
def _poisson_reg_model(p=1):
    """``s = (y, x_1..x_p)``, ``g = x (y - exp(beta'x))``; solved by Newton."""
    p = _positive_int(p, "p")
    eye = np.eye(p)

    def g(S, beta):
        y, X = S[:, 0], S[:, 1:]
        return X * (y - np.exp(X @ beta))[:, None]

    def dg_dbeta(S, beta):
        X = S[:, 1:]
        mu = np.exp(X @ beta)
        return -(mu[:, None, None] * X[:, :, None]) * X[:, None, :]

    def dg_ds(S, beta):
        y, X = S[:, 0], S[:, 1:]
        mu = np.exp(X @ beta)
        out = np.empty((S.shape[0], p, p + 1))
        out[:, :, 0] = X
        out[:, :, 1:] = ((y - mu)[:, None, None] * eye
                         - mu[:, None, None] * X[:, :, None] * beta[None, None, :])
        return out

    def init(S, th):
        # weighted least squares of log(y + 1/2) on x
        y, X = S[:, 0], S[:, 1:]
        Xw = X * th[:, None]
        try:
            return np.linalg.solve(Xw.T @ X, Xw.T @ np.log(y + 0.5))
        except np.linalg.LinAlgError:
            return np.zeros(p)

    return MomentModel("poisson_reg", p + 1, p, p, g, dg_dbeta, dg_ds, None,
                       init, params={"p": p})


def _ate_parts(S, beta, K):
    X, Y, W = S[:, :K], S[:, K], S[:, K + 1]
    eta = np.clip(expit(X @ beta[:K]), ATE_CLIP, 1.0 - ATE_CLIP)
    # W/eta - (1-W)/(1-eta) == (W - eta) / (eta (1 - eta)) without the 0/0
    ipw = W / eta - (1.0 - W) / (1.0 - eta)
    return X, Y, W, eta, ipw


@register_model("ate")
def _ate_model(K=1):
    """``s = (x_1..x_K, y, w)``, ``beta = (gamma_1..gamma_K, tau)``.

    The first ``K`` moments are the logistic propensity score equations
    ``x (w - eta)``; the last one is the inverse-probability-weighted
    treatment effect ``y (w/eta - (1-w)/(1-eta)) - tau``.
    """
    K = _positive_int(K, "K")
    p = K + 1
    d = K + 2

    def g(S, beta):
        X, Y, W, eta, ipw = _ate_parts(S, beta, K)
        out = np.empty((S.shape[0], p))
        out[:, :K] = X * (W - eta)[:, None]
        out[:, K] = Y * ipw - beta[K]
        return out

    def dg_dbeta(S, beta):
        X, Y, W, eta, ipw = _ate_parts(S, beta, K)
        v = eta * (1.0 - eta)
        out = np.zeros((S.shape[0], p, p))
        out[:, :K, :K] = -(v[:, None, None] * X[:, :, None]) * X[:, None, :]
        # d ipw / d eta * d eta / d gamma
        dipw = -(W * (1.0 - eta) / eta + (1.0 - W) * eta / (1.0 - eta))
        out[:, K, :K] = (Y * dipw)[:, None] * X
        out[:, K, K] = -1.0
        return out

    def dg_ds(S, beta):
        X, Y, W, eta, ipw = _ate_parts(S, beta, K)
        gamma = beta[:K]
        v = eta * (1.0 - eta)
        out = np.zeros((S.shape[0], p, d))
        out[:, :K, :K] = ((W - eta)[:, None, None] * np.eye(K)
                          - (v[:, None, None] * X[:, :, None]) * gamma[None, None, :])
        out[:, :K, K + 1] = X
        dipw = -(W * (1.0 - eta) / eta + (1.0 - W) * eta / (1.0 - eta))
        out[:, K, :K] = (Y * dipw)[:, None] * gamma[None, :]
        out[:, K, K] = ipw
        out[:, K, K + 1] = Y / v
        return out

    def init(S, th):
        beta = np.zeros(p)
        beta[K] = th @ (S[:, K] * (S[:, K + 1] / 0.5 - (1.0 - S[:, K + 1]) / 0.5))
        return beta

    return MomentModel("ate", d, p, p, g, dg_dbeta, dg_ds, None, init,
                       params={"K": K})


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _g_matrix(model, pts, beta) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        G = np.asarray(model.g(pts, np.asarray(beta, dtype=float)), dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    if not np.all(np.isfinite(G)):
        raise EvaluationError(f"model {model.name!r} returned non-finite g")
    return G


def eval_moment(model: MomentModel, s, beta) -> np.ndarray:
    """Return ``g(s, beta)`` for a single data point ``s``."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(beta))):
        raise EvaluationError("non-finite input to eval_moment")
    return _g_matrix(model, s[None, :], beta)[0]


def build_constraint(model: MomentModel, S, beta, check_rank=True):
    """Return ``(H, gJ)`` with ``H = (g_1, ..., g_{J-1}) - g_J 1'``.

    ``H theta + gJ == sum_j theta_j g_j`` for every ``theta``.
    """
    pts = _points(S)
    if pts.shape[0] < 2:
        raise ModelError("need J >= 2 support atoms")
    G = _g_matrix(model, pts, beta)
    H = (G[:-1] - G[-1]).T
    if check_rank and np.linalg.matrix_rank(H) < model.r:
        raise RankDeficientConstraint(
            f"H has rank {np.linalg.matrix_rank(H)} < r = {model.r}"
        )
    return H, G[-1].copy()


def constraint_residual(model: MomentModel, S, beta, theta) -> float:
    """Max-norm of ``sum_j theta_j g(s_j, beta)``."""
    pts = _points(S)
    th = _as_full(theta, pts.shape[0])
    return float(np.max(np.abs(th @ _g_matrix(model, pts, beta))))


def expected_dg_dbeta(model: MomentModel, S, theta, beta) -> np.ndarray:
    """``sum_j theta_j dg(s_j, beta)/dbeta'`` as an ``(r, p)`` matrix."""
    pts = _points(S)
    th = _as_full(theta, pts.shape[0])
    D = np.asarray(model.dg_dbeta(pts, np.asarray(beta, dtype=float)), dtype=float)
    return np.einsum("j,jrp->rp", th, D)


def solve_beta(model: MomentModel, S, theta, init=None, *, tol=TOL_SOLVE,
               max_iter=100, use_solver=True) -> np.ndarray:
    """Solve ``sum_j theta_j g(s_j, beta) = 0`` for ``beta``.

    Uses the model's closed-form solver when available (polished by Newton
    if its residual exceeds ``tol``); otherwise damped Newton with step
    halving from ``init``.
    """
    if not model.just_identified:
        raise ModelError("solve_beta needs r == p")
    pts = _points(S)
    th = _as_full(theta, pts.shape[0])
    if not np.all(np.isfinite(th)):
        raise EvaluationError("non-finite theta")

    beta = None
    if use_solver and model.beta_solver is not None:
        try:
            beta = np.atleast_1d(np.asarray(model.beta_solver(pts, th), dtype=float))
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(str(exc)) from exc
        if not np.all(np.isfinite(beta)):
            raise EvaluationError("closed-form solver returned non-finite beta")
    if beta is None:
        if init is not None:
            beta = np.atleast_1d(np.asarray(init, dtype=float)).copy()
        elif model.beta_init is not None:
            beta = np.atleast_1d(np.asarray(model.beta_init(pts, th), dtype=float))
        else:
            beta = np.zeros(model.p)
    return _newton(model, pts, th, beta, tol, max_iter)


def _newton(model, pts, th, beta, tol, max_iter):
    m = th @ _g_matrix(model, pts, beta)
    norm = np.linalg.norm(m)
    for _ in range(max_iter + 1):
        if np.max(np.abs(m)) <= tol:
            return beta
        E = expected_dg_dbeta(model, pts, th, beta)
        if not np.all(np.isfinite(E)) or np.linalg.cond(E) > 1e15:
            raise SingularJacobian("E_theta(dg/dbeta') is singular during Newton")
        step = -np.linalg.solve(E, m)
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            try:
                m_c = th @ _g_matrix(model, pts, cand)
            except EvaluationError:
                m_c = None
            if m_c is not None and np.linalg.norm(m_c) < norm:
                break
            t *= 0.5
        else:
            break
        beta, m, norm = cand, m_c, np.linalg.norm(m_c)
    if np.max(np.abs(m)) <= tol:
        return beta
    raise MaxIterationsExceeded(
        f"Newton for {model.name!r} stopped with residual {np.max(np.abs(m)):.3g}"
    )


def make_state(model: MomentModel, S, beta, theta, *, tol=TOL_MANIFOLD,
               check=True) -> ManifoldState:
    """Build a :class:`ManifoldState`, checking the manifold residual."""
    pts = _points(S)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    th = _as_full(theta, pts.shape[0])
    G = _g_matrix(model, pts, beta)
    H = (G[:-1] - G[-1]).T
    resid = float(np.max(np.abs(th @ G)))
    if check and resid > tol:
        raise ModelError(f"state is off the manifold (residual {resid:.3g})")
    return ManifoldState(beta, th[:-1].copy(), G, H, G[-1].copy(), resid)


# ---------------------------------------------------------------------------
# model self-checks
# ---------------------------------------------------------------------------


def check_derivatives(model: MomentModel, S, beta, *, rel_tol=1e-5,
                      with_ds=True) -> float:
    """Compare analytic derivatives against central differences of ``g``.

    Returns the worst relative error; raises :class:`ModelError` if it
    exceeds ``rel_tol``.
    """
    pts = _points(S)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    D = np.asarray(model.dg_dbeta(pts, beta))
    num = np.empty_like(D)
    for k in range(model.p):
        h = 1e-6 * (1.0 + abs(beta[k]))
        e = np.zeros(model.p)
        e[k] = h
        num[:, :, k] = (model.g(pts, beta + e) - model.g(pts, beta - e)) / (2 * h)
    worst = _rel_err(D, num)
    if with_ds and model.dg_ds is not None:
        Ds = np.asarray(model.dg_ds(pts, beta))
        nums = np.empty_like(Ds)
        for k in range(model.d):
            h = 1e-6 * (1.0 + np.abs(pts[:, k]))
            P1, P0 = pts.copy(), pts.copy()
            P1[:, k] += h
            P0[:, k] -= h
            nums[:, :, k] = (model.g(P1, beta) - model.g(P0, beta)) / (2 * h[:, None])
        worst = max(worst, _rel_err(Ds, nums))
    if worst > rel_tol:
        raise ModelError(f"analytic derivative mismatch: rel. error {worst:.3g}")
    return worst


def _rel_err(a, b):
    scale = max(np.max(np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b)) / scale)


def self_test(model: MomentModel, S, rng, *, n_theta=5, n_starts=8,
              spread=3.0) -> None:
    """Probe a model for derivative bugs and multiple roots.

    For ``n_theta`` random interior ``theta`` the Newton solver is started
    from ``n_starts`` perturbed points; distinct converged roots raise
    :class:`MultipleRootsError`, since only unique-root models are supported.
    """
    pts = _points(S)
    J = pts.shape[0]
    for _ in range(n_theta):
        th = rng.dirichlet(np.ones(J))
        base = solve_beta(model, pts, th)
        check_derivatives(model, pts, base)
        for _ in range(n_starts):
            start = base + spread * (1.0 + np.abs(base)) * rng.standard_normal(model.p)
            try:
                root = _newton(model, pts, th, start, TOL_SOLVE, 100)
            except (MaxIterationsExceeded, SingularJacobian, EvaluationError):
                continue
            if np.max(np.abs(root - base)) > 1e-6 * (1.0 + np.max(np.abs(base))):
                raise MultipleRootsError(
                    f"model {model.name!r} has distinct roots {base} and {root}"
                )
