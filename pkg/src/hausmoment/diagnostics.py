"""Autocorrelation, effective sample size, summaries and kernel density grids."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

__all__ = [
    "QUANTILES",
    "autocorrelation",
    "effective_sample_size",
    "weights_ess",
    "SummaryTable",
    "summarize_draws",
    "kde_grid",
    "KDEGrid",
]

QUANTILES = (2.5, 25.0, 50.0, 75.0, 97.5)


def autocorrelation(series, max_lag, *, return_flag=False):
    """Biased sample autocorrelation ``rho(0..max_lag)``.

    The lag-``k`` autocovariance is normalized by ``N`` (not ``N - k``),
    which keeps the sequence positive semi-definite. A constant series has
    ``rho(0) = 1`` and zeros elsewhere; ``return_flag=True`` also returns
    whether that case occurred.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if n <= max_lag:
        raise ValueError(f"series length {n} must exceed max_lag {max_lag}")
    z = x - x.mean()
    c0 = z @ z / n
    if c0 <= 0:
        rho = np.zeros(max_lag + 1)
        rho[0] = 1.0
        return (rho, True) if return_flag else rho
    # FFT autocovariance, zero-padded to avoid circular wrap
    m = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(z, m)
    acov = np.fft.irfft(f * np.conj(f), m)[: max_lag + 1] / n
    rho = acov / c0
    rho[0] = 1.0
    return (rho, False) if return_flag else rho


def effective_sample_size(series, *, return_flag=False) -> float:
    """Chain ESS with Geyer's initial positive sequence truncation.

    Sums of adjacent autocorrelation pairs ``rho(2k) + rho(2k+1)`` are
    accumulated while positive; ``ESS = N / (-1 + 2 * sum of pairs)``.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if n == 0:
        raise ValueError("empty series")
    if n < 4:
        return (float(n), False) if return_flag else float(n)
    rho, const = autocorrelation(x, n - 1, return_flag=True)
    if const:
        return (float(n), True) if return_flag else float(n)
    n_pairs = n // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    neg = np.flatnonzero(pairs <= 0)
    k = neg[0] if neg.size else n_pairs
    tau = -1.0 + 2.0 * pairs[:k].sum()
    ess = float(min(n, n / max(tau, 1.0 / n)))
    return (ess, False) if return_flag else ess


def weights_ess(weights) -> float:
    """``1 / sum(w*^2)`` for (not necessarily normalized) nonnegative weights."""
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    return float(1.0 / np.sum(w * w))


@dataclass
class SummaryTable:
    """Per-quantity posterior summaries."""

    names: list
    mean: np.ndarray
    sd: np.ndarray
    mcse: np.ndarray
    quantiles: np.ndarray
    ess: np.ndarray
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {}
        for i, name in enumerate(self.names):
            out[name] = {
                "mean": float(self.mean[i]),
                "sd": float(self.sd[i]),
                "mcse": float(self.mcse[i]),
                "ess": float(self.ess[i]),
                "quantiles": {f"{q:g}%": float(v) for q, v in zip(QUANTILES, self.quantiles[i])},
            }
        return out

    def __getitem__(self, name) -> dict:
        return self.to_dict()[name]


def summarize_draws(draws, names=None, selectors=None) -> SummaryTable:
    """Summaries of the columns of an ``(N, k)`` draw matrix.

    ``selectors`` optionally picks a subset of columns (indices or names).
    """
    X = np.asarray(draws, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise ValueError("no draws to summarize")
    names = list(names) if names is not None else [f"x{k + 1}" for k in range(X.shape[1])]
    if selectors is not None:
        idx = [names.index(s) if isinstance(s, str) else int(s) for s in selectors]
        X = X[:, idx]
        names = [names[i] for i in idx]
    n = X.shape[0]
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1) if n > 1 else np.zeros(X.shape[1])
    ess = np.empty(X.shape[1])
    flags = []
    for k in range(X.shape[1]):
        ess[k], flag = effective_sample_size(X[:, k], return_flag=True)
        if flag:
            flags.append(names[k])
    mcse = sd / np.sqrt(ess)
    q = np.percentile(X, QUANTILES, axis=0).T
    return SummaryTable(names, mean, sd, mcse, q, ess, flags)


@dataclass
class KDEGrid:
    """Density values ``density[i, j]`` at ``(x[i], y[j])``."""

    x: np.ndarray
    y: np.ndarray
    density: np.ndarray
    bandwidth: np.ndarray

    def mass(self) -> float:
        return float(trapezoid(trapezoid(self.density, self.y, axis=1), self.x))

    def to_long(self) -> np.ndarray:
        """``(n_x * n_y, 3)`` rows of ``x, y, density``."""
        xx, yy = np.meshgrid(self.x, self.y, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel(), self.density.ravel()])


def _bandwidth(X, rule, h):
    n, d = X.shape
    if rule == "fixed":
        if h is None:
            raise ValueError("fixed bandwidth needs h")
        return np.broadcast_to(np.asarray(h, dtype=float), (d,)).copy()
    sd = X.std(axis=0, ddof=1)
    if np.any(sd <= 0):
        raise ValueError("zero-variance dimension; use bandwidth='fixed'")
    if rule == "scott":
        return sd * n ** (-1.0 / (d + 4))
    if rule == "silverman":
        return sd * (n * (d + 2) / 4.0) ** (-1.0 / (d + 4))
    raise ValueError(f"unknown bandwidth rule {rule!r}")


def kde_grid(draws_2d, grid_spec=None, bandwidth="scott", h=None, *,
             chunk=4096) -> KDEGrid:
    """Gaussian product-kernel density of 2-D draws on a rectangular grid.

    Parameters
    ----------
    draws_2d : (N, 2) array
    grid_spec : dict, optional
        ``{"n": int or (nx, ny), "x": (lo, hi), "y": (lo, hi)}``. Missing
        limits default to the data range padded by four bandwidths.
    bandwidth : {"scott", "silverman", "fixed"}
    h : float or (2,) array
        Bandwidth for the ``fixed`` rule.
    """
    X = np.asarray(draws_2d, dtype=float)
    if X.ndim != 2 or X.shape[1] != 2:
        raise ValueError("draws_2d must have shape (N, 2)")
    if X.shape[0] < 2:
        raise ValueError("need at least two draws")
    bw = _bandwidth(X, bandwidth, h)
    spec = dict(grid_spec or {})
    n = spec.get("n", 100)
    nx, ny = (n, n) if np.isscalar(n) else n
    lo, hi = X.min(axis=0) - 4 * bw, X.max(axis=0) + 4 * bw
    xs = np.linspace(*spec.get("x", (lo[0], hi[0])), nx)
    ys = np.linspace(*spec.get("y", (lo[1], hi[1])), ny)
    dens = np.zeros((nx, ny))
    # density = sum_i K_x(x - x_i) K_y(y - y_i): one matmul per chunk
    for start in range(0, X.shape[0], chunk):
        block = X[start:start + chunk]
        kx = np.exp(-0.5 * ((xs[:, None] - block[None, :, 0]) / bw[0]) ** 2)
        ky = np.exp(-0.5 * ((ys[:, None] - block[None, :, 1]) / bw[1]) ** 2)
        dens += kx @ ky.T
    dens /= X.shape[0] * 2 * np.pi * bw[0] * bw[1]
    return KDEGrid(xs, ys, dens, bw)

