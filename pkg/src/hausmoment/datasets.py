"""CSV ingestion with support deduplication and synthetic data generators."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, ModelError
from .model import Dataset, SupportSet

__all__ = [
    "dataset_from_rows",
    "load_dataset",
    "export_dataset",
    "simulate_regression_data",
    "simulate_iv_data",
    "simulate_ate_data",
]


def dataset_from_rows(rows) -> Dataset:
    """Deduplicate observation rows into atoms in first-appearance order."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    if rows.shape[0] == 0:
        raise ConfigError("no observations")
    index: dict[bytes, int] = {}
    atoms, counts = [], []
    for row in rows:
        # +0.0 folds -0.0 into 0.0 so equal values share a key
        key = (row + 0.0).tobytes()
        j = index.get(key)
        if j is None:
            index[key] = len(atoms)
            atoms.append(row)
            counts.append(1)
        else:
            counts[j] += 1
    if len(atoms) < 2:
        raise ConfigError(f"data has {len(atoms)} distinct atom(s); need J >= 2")
    try:
        return Dataset(SupportSet(np.array(atoms)), np.array(counts))
    except ModelError as exc:
        raise ConfigError(str(exc)) from exc


def load_dataset(path, schema=None) -> Dataset:
    """Read a headed CSV and build a :class:`Dataset`.

    Parameters
    ----------
    path : path-like
    schema : list of str, optional
        Column names forming the data vector ``s`` in order; the literal
        ``"1"`` inserts a constant (intercept) coordinate. Defaults to all
        columns.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"data file {path} does not exist")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigError(f"{path} is empty") from None
        schema = list(schema) if schema is not None else header
        cols = []
        for name in schema:
            if name == "1":
                cols.append(None)
            elif name in header:
                cols.append(header.index(name))
            else:
                raise ConfigError(f"column {name!r} not in header of {path}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ConfigError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                rows.append([1.0 if c is None else float(rec[c]) for c in cols])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-numeric cell") from None
    if not rows:
        raise ConfigError(f"{path} has no data rows")
    if not np.all(np.isfinite(rows)):
        raise ConfigError(f"{path} contains non-finite values")
    return dataset_from_rows(rows)


def export_dataset(dataset: Dataset, path, names=None) -> None:
    """Write one row per observation (atoms repeated by their counts)."""
    S = dataset.support.points
    names = names or [f"s{k + 1}" for k in range(S.shape[1])]
    rows = np.repeat(S, dataset.counts, axis=0)
    np.savetxt(path, rows, delimiter=",", header=",".join(names), comments="",
               fmt="%.17g")


def simulate_regression_data(J: int, seed) -> Dataset:
    """``X ~ N(1, 2^2)``, ``Y | X ~ N(2 + 5X, 10^2)``; atoms ``s = (y, 1, x)``."""
    if J < 2:
        raise ConfigError("J must be at least 2")
    rng = np.random.default_rng(seed)
    x = rng.normal(1.0, 2.0, J)
    y = rng.normal(2.0 + 5.0 * x, 10.0)
    return Dataset(SupportSet(np.column_stack([y, np.ones(J), x])), np.ones(J, dtype=np.int64))


def simulate_iv_data(J: int, seed, *, strength=1.0, beta=(1.0, 0.5), rho=0.5) -> Dataset:
    """Synthetic IV data with a binary instrument (labelled synthetic).

    ``z ~ Bernoulli(1/2)``, ``x = 1 + strength * z + v``,
    ``y = beta_0 + beta_1 x + u`` with ``corr(u, v) = rho``. Atoms are
    ``s = (y, 1, x, 1, z)`` for the ``iv_reg`` model with ``p = 2``.
    """
    if J < 2:
        raise ConfigError("J must be at least 2")
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 2, J).astype(float)
    uv = rng.multivariate_normal([0.0, 0.0], [[1.0, rho], [rho, 1.0]], J)
    x = 1.0 + strength * z + uv[:, 1]
    y = beta[0] + beta[1] * x + uv[:, 0]
    one = np.ones(J)
    return dataset_from_rows(np.column_stack([y, one, x, one, z]))


def simulate_ate_data(J: int, seed, *, gamma=(0.0, 0.8), tau=1.0) -> Dataset:
    """Synthetic treatment data with a logistic propensity (labelled synthetic).

    ``x ~ N(0, 1)``, ``w ~ Bernoulli(expit(gamma_0 + gamma_1 x))``,
    ``y = 1 + x + tau w + N(0, 1)``. Atoms are ``s = (1, x, y, w)`` for the
    ``ate`` model with ``K = 2``.
    """
    if J < 2:
        raise ConfigError("J must be at least 2")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(J)
    eta = 1.0 / (1.0 + np.exp(-(gamma[0] + gamma[1] * x)))
    w = (rng.uniform(size=J) < eta).astype(float)
    y = 1.0 + x + tau * w + rng.standard_normal(J)
    return dataset_from_rows(np.column_stack([np.ones(J), x, y, w]))
