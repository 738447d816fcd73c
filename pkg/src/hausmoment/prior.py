"""Component densities and the four prior constructions on the manifold.

Every log-density here is unnormalized: samplers only consume ratios, and
normalizing constants of densities restricted to implicit manifolds are not
available anyway.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import ConfigError, EvaluationError
from .geometry import JacobianBundle
from .model import TOL_MANIFOLD, Dataset, ManifoldState

__all__ = [
    "Dirichlet",
    "Laplace",
    "Gaussian",
    "Uniform",
    "PointMass",
    "DiscreteUniform",
    "Product",
    "NonScience",
    "Science",
    "GeometricAdhoc",
    "Truncated",
    "PriorSpec",
    "prior_log_density",
    "log_posterior",
    "component_from_config",
    "prior_from_config",
]


# ---------------------------------------------------------------------------
# component densities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dirichlet:
    """Dirichlet kernel ``sum_j (alpha_j - 1) log x_j`` on the full simplex vector."""

    alpha: Union[float, np.ndarray] = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.alpha) <= 0):
            raise ConfigError("Dirichlet alpha must be positive")

    def logpdf(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            return -np.inf
        return float(np.sum((np.asarray(self.alpha) - 1.0) * np.log(x)))

    def alpha_vector(self, J: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.alpha, dtype=float), (J,)).copy()

    def sample(self, rng, J: int) -> np.ndarray:
        return rng.dirichlet(self.alpha_vector(J))


@dataclass(frozen=True)
class Laplace:
    """Laplace kernel ``-rate * sum |x - m|``."""

    m: Union[float, np.ndarray] = 0.0
    rate: float = 2.0

    def __post_init__(self):
        if self.rate <= 0:
            raise ConfigError("Laplace rate must be positive")

    def logpdf(self, x) -> float:
        return float(-self.rate * np.sum(np.abs(np.asarray(x, dtype=float) - self.m)))

    def sample(self, rng, size=None):
        return rng.laplace(self.m, 1.0 / self.rate, size)

    @property
    def sd(self):
        return np.sqrt(2.0) / self.rate


@dataclass(frozen=True)
class Gaussian:
    """Gaussian kernel ``-1/2 (x - mean)' cov^{-1} (x - mean)``."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ConfigError("Gaussian cov has the wrong shape")
        if not np.allclose(cov, cov.T):
            raise ConfigError("Gaussian cov must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ConfigError("Gaussian cov must be positive definite") from None
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    def logpdf(self, x) -> float:
        z = solve_triangular(self._chol, np.atleast_1d(x) - self.mean, lower=True)
        return float(-0.5 * z @ z)

    def sample(self, rng, size=None):
        return rng.multivariate_normal(self.mean, self.cov, size)

    @property
    def sd(self):
        return np.sqrt(np.diag(self.cov))


@dataclass(frozen=True)
class Uniform:
    """Flat kernel on the box ``[low, high]``."""

    low: Union[float, np.ndarray] = -np.inf
    high: Union[float, np.ndarray] = np.inf

    def logpdf(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return 0.0 if np.all((x >= self.low) & (x <= self.high)) else -np.inf

    def sample(self, rng, size=None):
        return rng.uniform(self.low, self.high, size)

    @property
    def sd(self):
        return (np.asarray(self.high, dtype=float) - self.low) / np.sqrt(12.0)


@dataclass(frozen=True)
class PointMass:
    """Degenerate density at ``value`` (used to pin support coordinates)."""

    value: Union[float, np.ndarray]

    def logpdf(self, x) -> float:
        return 0.0 if np.all(np.asarray(x) == self.value) else -np.inf

    def sample(self, rng, size=None):
        v = np.asarray(self.value, dtype=float)
        return v.copy() if size is None else np.broadcast_to(v, (size,) + v.shape).copy()

    @property
    def sd(self):
        return np.zeros_like(np.asarray(self.value, dtype=float))


@dataclass(frozen=True)
class DiscreteUniform:
    """Uniform mass on a finite set of scalar ``values``."""

    values: Sequence[float]

    def logpdf(self, x) -> float:
        return 0.0 if np.all(np.isin(np.asarray(x), self.values)) else -np.inf

    def sample(self, rng, size=None):
        return rng.choice(np.asarray(self.values, dtype=float), size)

    @property
    def sd(self):
        return float(np.std(np.asarray(self.values, dtype=float)))


@dataclass(frozen=True)
class Product:
    """Independent components acting on index subsets of one vector.

    ``parts`` is a list of ``(component, indices)`` pairs.
    """

    parts: list

    def logpdf(self, x) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return float(sum(c.logpdf(x[np.asarray(idx)]) for c, idx in self.parts))

    def sample(self, rng, size=None):
        dim = 1 + max(int(np.max(idx)) for _, idx in self.parts)
        out = np.empty(dim if size is None else (size, dim))
        for c, idx in self.parts:
            idx = np.atleast_1d(idx)
            draw = c.sample(rng, size)
            if size is None:
                out[idx] = draw
            else:
                out[:, idx] = np.reshape(draw, (size, idx.size))
        return out

    @property
    def sd(self):
        dim = 1 + max(int(np.max(idx)) for _, idx in self.parts)
        out = np.empty(dim)
        for c, idx in self.parts:
            out[np.atleast_1d(idx)] = c.sd
        return out


# ---------------------------------------------------------------------------
# prior constructions
# ---------------------------------------------------------------------------


def _eta(beta_comp, theta_comp, joint, beta, theta_full) -> float:
    val = 0.0
    if beta_comp is not None:
        val += beta_comp.logpdf(beta)
    if theta_comp is not None:
        val += theta_comp.logpdf(theta_full)
    if joint is not None:
        val += float(joint(beta, theta_full))
    return val


@dataclass(frozen=True)
class NonScience:
    """Prior elicited on ``theta`` only; the density on the manifold is
    ``p(theta) / sqrt(|J J' + I|)``."""

    theta: object

    def log_eta(self, beta, theta_full):
        return self.theta.logpdf(theta_full)


@dataclass(frozen=True)
class Science:
    """Prior ``p(beta) p(theta | beta)`` with ``p(theta | beta)`` a density on
    the fiber hyperplane, e.g. a Dirichlet kernel restricted to it."""

    beta: object
    theta_given_beta: object

    def log_eta(self, beta, theta_full):
        return self.beta.logpdf(beta) + self.theta_given_beta.logpdf(theta_full)


@dataclass(frozen=True)
class GeometricAdhoc:
    """``eta(beta, theta) / sqrt(|J J' + I|)`` on the manifold, so the implied
    Lebesgue marginal of ``theta`` is proportional to ``eta``."""

    beta: Optional[object] = None
    theta: Optional[object] = None
    joint: Optional[Callable] = None

    def log_eta(self, beta, theta_full):
        return _eta(self.beta, self.theta, self.joint, beta, theta_full)


@dataclass(frozen=True)
class Truncated:
    """``eta(beta, theta)`` restricted to the manifold, as a Hausdorff density."""

    beta: Optional[object] = None
    theta: Optional[object] = None
    joint: Optional[Callable] = None

    def log_eta(self, beta, theta_full):
        return _eta(self.beta, self.theta, self.joint, beta, theta_full)


PriorSpec = Union[NonScience, Science, GeometricAdhoc, Truncated]


def _finite_or_neg_inf(val):
    if np.isnan(val) or val == np.inf:
        raise EvaluationError(f"component density returned {val}")
    return float(val)


def prior_log_density(spec: PriorSpec, state: ManifoldState, bundle: JacobianBundle,
                      *, tol=TOL_MANIFOLD, log_corr=None) -> float:
    """Unnormalized log prior density with respect to Hausdorff measure.

    ``log_corr`` replaces the marginal correction cancelled by the
    non-science and geometric priors; with unknown support atoms this is
    the combined correction over ``(theta, S~)``.
    """
    th = state.theta_full
    if state.residual > tol or np.any(th <= 0):
        return -np.inf
    val = _finite_or_neg_inf(spec.log_eta(state.beta, th))
    if isinstance(spec, (NonScience, GeometricAdhoc)):
        return val - (bundle.log_corr_marginal if log_corr is None else log_corr)
    if isinstance(spec, Truncated):
        return val
    if isinstance(spec, Science):
        return val + bundle.log_corr_joint
    raise TypeError(f"unknown prior spec {type(spec).__name__}")


def log_likelihood(counts, theta_full) -> float:
    counts = np.asarray(counts)
    theta_full = np.asarray(theta_full)
    if np.any(theta_full <= 0):
        return -np.inf
    return float(counts @ np.log(theta_full))


def log_posterior(spec: PriorSpec, dataset: Dataset, state: ManifoldState,
                  bundle: JacobianBundle, *, tol=TOL_MANIFOLD, log_corr=None) -> float:
    """``prior_log_density + sum_j n_j log theta_j``."""
    lp = prior_log_density(spec, state, bundle, tol=tol, log_corr=log_corr)
    if lp == -np.inf:
        return lp
    return lp + log_likelihood(dataset.counts, state.theta_full)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def component_from_config(cfg: dict):
    """Build a component density from a JSON-style dict with a ``type`` key."""
    if not isinstance(cfg, dict) or "type" not in cfg:
        raise ConfigError(f"component needs a 'type': {cfg!r}")
    kind = cfg["type"].lower()
    try:
        if kind == "dirichlet":
            return Dirichlet(np.asarray(cfg.get("alpha", 1.0), dtype=float))
        if kind == "laplace":
            return Laplace(np.asarray(cfg.get("m", 0.0), dtype=float),
                           float(cfg.get("rate", 2.0)))
        if kind == "gaussian":
            mean = np.atleast_1d(np.asarray(cfg["mean"], dtype=float))
            if "cov" in cfg:
                cov = np.asarray(cfg["cov"], dtype=float)
            else:
                cov = np.diag(np.broadcast_to(np.asarray(cfg["sd"], dtype=float) ** 2,
                                              mean.shape))
            return Gaussian(mean, cov)
        if kind == "uniform":
            return Uniform(np.asarray(cfg.get("low", -np.inf), dtype=float),
                           np.asarray(cfg.get("high", np.inf), dtype=float))
        if kind == "point_mass":
            return PointMass(np.asarray(cfg["value"], dtype=float))
        if kind == "discrete_uniform":
            return DiscreteUniform(tuple(float(v) for v in cfg["values"]))
        if kind == "product":
            return Product([(component_from_config(part["component"]),
                             np.asarray(part["indices"], dtype=int))
                            for part in cfg["parts"]])
    except KeyError as exc:
        raise ConfigError(f"component {kind!r} is missing key {exc}") from None
    raise ConfigError(f"unknown component type {kind!r}")


def prior_from_config(cfg: dict) -> PriorSpec:
    """Build a prior spec from ``{"variant": ..., "beta": {...}, "theta": {...}}``."""
    variant = str(cfg.get("variant", "")).lower()

    def opt(key):
        return component_from_config(cfg[key]) if cfg.get(key) is not None else None

    if variant in ("nonscience", "non_science"):
        return NonScience(opt("theta") or Dirichlet(1.0))
    if variant == "science":
        if cfg.get("beta") is None:
            raise ConfigError("science prior needs a 'beta' component")
        return Science(opt("beta"), opt("theta_given_beta") or opt("theta") or Dirichlet(1.0))
    if variant in ("geometric_adhoc", "gary"):
        return GeometricAdhoc(opt("beta"), opt("theta"))
    if variant == "truncated":
        return Truncated(opt("beta"), opt("theta"))
    raise ConfigError(f"unknown prior variant {variant!r}")
