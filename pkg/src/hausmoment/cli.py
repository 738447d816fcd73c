"""Config-driven experiment runner and command-line interface.

Subcommands::

    hausmoment run <config.json | manifest.json> [--seed S] [--out DIR] [--threads N]
    hausmoment simulate --kind regression --J 500 --seed 1 --out data.csv
    hausmoment summarize <draws.csv>
    hausmoment diagnose <draws.csv>

Exit codes are 0 on success, 2 on configuration errors and 3 when a
sampler aborts.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import norm

from . import __version__
from .datasets import (
    dataset_from_rows,
    export_dataset,
    load_dataset,
    simulate_ate_data,
    simulate_iv_data,
    simulate_regression_data,
)
from .diagnostics import autocorrelation, kde_grid, summarize_draws
from .exceptions import ConfigError, HausmomentError, ModelError, SamplerAbort
from .model import Dataset, MomentModel, expected_dg_dbeta, make_builtin_model, solve_beta
from .prior import component_from_config, prior_from_config
from .sampler import (
    ChainConfig,
    bayesian_bootstrap_is,
    bayesian_bootstrap_missing_is,
    make_rng,
    run_block_joint_mcmc,
    run_joint_mcmc,
    run_marginal_mcmc,
    run_missing_support_sampler,
    sir_resample,
)

__all__ = [
    "ExperimentConfig",
    "parse_config",
    "load_dataset",
    "export_dataset",
    "simulate_regression_data",
    "run_experiment",
    "main",
]

SAMPLERS = ("marginal", "joint", "block_joint", "bb_is", "missing_support")
SIMULATORS = {
    "regression": simulate_regression_data,
    "iv": simulate_iv_data,
    "ate": simulate_ate_data,
}


@dataclass
class ExperimentConfig:
    """Validated experiment configuration plus the raw (echoed) dict."""

    raw: dict
    model: MomentModel
    sampler: str
    sampler_opts: dict
    seed: int
    replications: int
    output: Optional[str]

    @property
    def sha256(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def parse_config(raw: dict, base_dir=".") -> ExperimentConfig:
    """Validate a JSON config; relative CSV paths resolve against ``base_dir``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = copy.deepcopy(raw)
    if "seed" not in raw:
        raise ConfigError("config needs an explicit 'seed'")
    try:
        seed = int(raw["seed"])
    except (TypeError, ValueError):
        raise ConfigError("seed must be an integer") from None
    if seed < 0:
        raise ConfigError("seed must be nonnegative")
    for key in ("model", "data", "prior", "sampler"):
        if key not in raw:
            raise ConfigError(f"config is missing section {key!r}")
    m = raw["model"]
    try:
        model = make_builtin_model(m["kind"], **m.get("dims", {}))
    except (KeyError, ModelError) as exc:
        raise ConfigError(f"bad model section: {exc}") from None

    data = raw["data"]
    sources = [k for k in ("csv", "simulate", "inline") if k in data]
    if len(sources) != 1:
        raise ConfigError("data needs exactly one of 'csv', 'simulate', 'inline'")
    if "csv" in data:
        path = Path(data["csv"])
        if not path.is_absolute():
            path = (Path(base_dir) / path).resolve()
        if not path.exists():
            raise ConfigError(f"data file {path} does not exist")
        data["csv"] = str(path)
    if "simulate" in data and data["simulate"].get("kind", "regression") not in SIMULATORS:
        raise ConfigError(f"unknown simulator {data['simulate'].get('kind')!r}")

    s = raw["sampler"]
    method = s.get("method")
    if method not in SAMPLERS:
        raise ConfigError(f"sampler.method must be one of {SAMPLERS}")
    if method == "missing_support":
        if "f_S" not in s or "J_tilde" not in s:
            raise ConfigError("missing_support needs 'f_S' and 'J_tilde'")
    reps = int(raw.get("replications", 1))
    if reps < 1:
        raise ConfigError("replications must be positive")
    return ExperimentConfig(raw, model, method, s, seed, reps, raw.get("output"))


# ---------------------------------------------------------------------------
# data and priors
# ---------------------------------------------------------------------------


def _build_dataset(cfg: ExperimentConfig, data_seed) -> Dataset:
    data = cfg.raw["data"]
    if "csv" in data:
        ds = load_dataset(data["csv"], data.get("columns"))
    elif "inline" in data:
        rows = np.asarray(data["inline"], dtype=float)
        if "counts" in data:
            ds = Dataset.from_points(rows, data["counts"])
        else:
            ds = dataset_from_rows(rows)
    else:
        sim = dict(data["simulate"])
        kind = sim.pop("kind", "regression")
        J = int(sim.pop("J"))
        seed = sim.pop("seed", data_seed)
        ds = SIMULATORS[kind](J, seed, **sim)
    if ds.support.d != cfg.model.d:
        raise ConfigError(f"data has dimension {ds.support.d}, model expects {cfg.model.d}")
    return ds


def asymptotic_estimate(model: MomentModel, dataset: Dataset):
    """Point estimate and asymptotic variance from the empirical distribution.

    Linear regression uses the homoskedastic MLE variance
    ``sigma^2 (X'X)^{-1}``; other models use the sandwich
    ``E^{-1} Omega E^{-T} / n``.
    """
    S, counts = dataset.support.points, dataset.counts
    n = dataset.n
    w = counts / n
    beta = solve_beta(model, S, w)
    if model.name == "linear_reg":
        y, X = S[:, 0], S[:, 1:]
        resid = y - X @ beta
        sigma2 = counts @ resid ** 2 / (n - model.p)
        V = sigma2 * np.linalg.inv((X * counts[:, None]).T @ X)
    else:
        G = model.g(S, beta)
        E = expected_dg_dbeta(model, S, w, beta)
        Omega = (G * w[:, None]).T @ G
        Einv = np.linalg.inv(E)
        V = Einv @ Omega @ Einv.T / n
    return beta, V


def _resolve_prior(prior_cfg: dict, model, dataset):
    prior_cfg = copy.deepcopy(prior_cfg)
    beta_cfg = prior_cfg.get("beta")
    if isinstance(beta_cfg, dict) and beta_cfg.get("type") == "gaussian_asymptotic":
        bhat, V = asymptotic_estimate(model, dataset)
        mean = bhat.copy()
        if "quantile" in beta_cfg:
            mean = mean + norm.ppf(float(beta_cfg["quantile"])) * np.sqrt(np.diag(V))
        if "shift" in beta_cfg:
            mean = mean + np.asarray(beta_cfg["shift"], dtype=float)
        cov = float(beta_cfg.get("scale", 1.0)) * V
        prior_cfg["beta"] = {"type": "gaussian", "mean": mean.tolist(), "cov": cov.tolist()}
    try:
        return prior_from_config(prior_cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad prior section: {exc}") from None


def _chain_config(opts: dict, seed: int) -> ChainConfig:
    keys = ("n_iter", "burn_in", "thin", "target_accept", "adapt_window", "block_K",
            "init_scale", "max_fail_frac", "tol_manifold", "s_scale", "bb_pilot",
            "sigma_beta", "sigma_Q")
    kwargs = {k: opts[k] for k in keys if k in opts}
    if "n_iter" not in kwargs:
        raise ConfigError("sampler.n_iter is required for MCMC samplers")
    try:
        return ChainConfig(seed=seed, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad sampler settings: {exc}") from None


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _tracked_columns(names):
    betas = [n for n in names if n.startswith("beta_")]
    thetas = [n for n in names if n.startswith("theta_")][:10]
    s_miss = [n for n in names if n.startswith("s_missing_")][:10]
    return betas + thetas + s_miss


def _write_diagnostics(path: Path, names, data, max_lag):
    tracked = _tracked_columns(names)
    n = data.shape[0]
    lag = min(max_lag, n - 1)
    cols = [autocorrelation(data[:, names.index(c)], lag) for c in tracked]
    table = np.column_stack([np.arange(lag + 1)] + cols)
    np.savetxt(path, table, delimiter=",", header=",".join(["lag"] + tracked),
               comments="", fmt="%.17g")


def _write_kde(path: Path, names, data, kde_cfg):
    cols = kde_cfg.get("columns", [n for n in names if n.startswith("beta_")][:2])
    if len(cols) != 2:
        raise ConfigError("kde needs exactly two columns")
    X = data[:, [names.index(c) for c in cols]]
    grid = kde_grid(X, {"n": kde_cfg.get("n", 100)}, kde_cfg.get("bandwidth", "scott"),
                    kde_cfg.get("h"))
    np.savetxt(path, grid.to_long(), delimiter=",", header=f"{cols[0]},{cols[1]},density",
               comments="", fmt="%.17g")


def _run_one(cfg: ExperimentConfig, seed: int, out_dir: Path, data_seed) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _build_dataset(cfg, data_seed)
    spec = _resolve_prior(cfg.raw["prior"], cfg.model, dataset)
    opts = cfg.sampler_opts
    np.savetxt(out_dir / "atoms.csv",
               np.column_stack([dataset.support.points, dataset.counts]),
               delimiter=",", comments="",
               header=",".join([f"s{k + 1}" for k in range(dataset.support.d)] + ["count"]),
               fmt="%.17g")
    info = {"seed": seed, "J": dataset.J, "n": dataset.n}
    weighted = None
    try:
        if cfg.sampler in ("bb_is",):
            weighted = bayesian_bootstrap_is(cfg.model, dataset, spec, int(opts.get("M", 10000)),
                                             opts.get("alpha"), make_rng(seed))
        elif cfg.sampler == "missing_support" and opts.get("importance", False):
            f_S = component_from_config(opts["f_S"])
            weighted = bayesian_bootstrap_missing_is(cfg.model, dataset, spec, f_S,
                                                     int(opts["J_tilde"]),
                                                     int(opts.get("M", 10000)), make_rng(seed))
        else:
            chain_cfg = _chain_config(opts, seed)
            if cfg.sampler == "marginal":
                out = run_marginal_mcmc(cfg.model, dataset, spec, chain_cfg)
            elif cfg.sampler == "joint":
                out = run_joint_mcmc(cfg.model, dataset, spec, chain_cfg)
            elif cfg.sampler == "block_joint":
                out = run_block_joint_mcmc(cfg.model, dataset, spec, chain_cfg)
            else:
                f_S = component_from_config(opts["f_S"])
                out = run_missing_support_sampler(cfg.model, dataset, spec, f_S,
                                                  int(opts["J_tilde"]), chain_cfg)
    except SamplerAbort as exc:
        if exc.partial is not None:
            exc.partial.to_csv(out_dir / "draws.csv")
        _write_json(out_dir / "failure.json", {"status": "aborted", "error": str(exc), **info})
        raise

    if weighted is not None:
        weighted.to_csv(out_dir / "weights.csv")
        M_out = int(opts.get("resample", len(weighted)))
        res = sir_resample(weighted, M_out, make_rng(seed + 1))
        parts = [res[0], res[1]] + ([res[2]] if len(res) > 2 else [])
        names = [f"beta_{k + 1}" for k in range(res[0].shape[1])]
        names += [f"theta_{j + 1}" for j in range(res[1].shape[1])]
        if len(res) > 2:
            names += [f"s_missing_{k + 1}" for k in range(res[2].shape[1])]
        data = np.hstack(parts)
        np.savetxt(out_dir / "draws.csv", data, delimiter=",", header=",".join(names),
                   comments="", fmt="%.17g")
        info.update(ess=weighted.ess, n_failures=weighted.n_failures)
    else:
        out.to_csv(out_dir / "draws.csv")
        names, data = out.table()
        info.update(accept_rate=out.accept_rate, n_failures=out.n_failures,
                    final_scale=out.scale)

    keep = [i for i, nm in enumerate(names) if nm not in ("iteration", "log_post")]
    summary = summarize_draws(data[:, keep], [names[i] for i in keep])
    _write_json(out_dir / "summary.json", {"quantities": summary.to_dict(), "info": info,
                                           "constant_series": summary.flags})
    if data.shape[0] > 1:
        _write_diagnostics(out_dir / "diagnostics.csv", names, data,
                           int(cfg.raw.get("acf_lags", 50)))
    if cfg.raw.get("kde"):
        _write_kde(out_dir / "kde.csv", names, data, cfg.raw["kde"])
    files = sorted(p.name for p in out_dir.iterdir()
                   if p.is_file() and p.name not in ("manifest.json", "failure.json"))
    return {"dir": out_dir.name, "seed": seed, "files": {f: _file_sha256(out_dir / f) for f in files},
            **{k: v for k, v in info.items() if k != "seed"}}


def _replication_seeds(seed: int, reps: int):
    if reps == 1:
        return [seed]
    children = np.random.SeedSequence(seed).spawn(reps)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def run_experiment(cfg, out_dir=None, *, seed=None, threads=None, base_dir=".") -> Path:
    """Run an experiment and write its artifacts; returns the output directory.

    ``cfg`` is a raw config dict, a manifest dict (with a ``config`` key) or an
    :class:`ExperimentConfig`. Replications run on a thread pool, each with a
    seed spawned from the master seed.
    """
    if isinstance(cfg, dict) and "config" in cfg and "config_sha256" in cfg:
        cfg = cfg["config"]
    if isinstance(cfg, dict):
        raw = copy.deepcopy(cfg)
        if seed is not None:
            raw["seed"] = int(seed)
        cfg = parse_config(raw, base_dir)
    out = Path(out_dir or cfg.output or "hausmoment_out")
    out.mkdir(parents=True, exist_ok=True)
    threads = int(os.environ.get("HM_THREADS", threads or 1))
    seeds = _replication_seeds(cfg.seed, cfg.replications)
    simulated = "simulate" in cfg.raw["data"]

    def job(i):
        rep_dir = out if cfg.replications == 1 else out / f"rep_{i:03d}"
        data_seed = seeds[i] if (simulated and cfg.replications > 1) else cfg.seed
        return _run_one(cfg, seeds[i], rep_dir, data_seed)

    manifest = {
        "config": cfg.raw,
        "config_sha256": cfg.sha256,
        "seed": cfg.seed,
        "package_version": __version__,
        "atom_ordering": "first appearance in the data source; see atoms.csv",
    }
    try:
        if threads > 1 and cfg.replications > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                reps = list(pool.map(job, range(cfg.replications)))
        else:
            reps = [job(i) for i in range(cfg.replications)]
    except SamplerAbort as exc:
        manifest.update(status="aborted", error=str(exc))
        _write_json(out / "manifest.json", manifest)
        raise
    manifest.update(status="ok", replications=reps)
    _write_json(out / "manifest.json", manifest)
    return out


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _read_table(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path} does not exist")
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return header, data


def _cmd_run(args) -> int:
    path = Path(args.config)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    out = run_experiment(raw, args.out, seed=args.seed, threads=args.threads,
                         base_dir=path.parent)
    print(out)
    return 0


def _cmd_simulate(args) -> int:
    seed = 0 if args.seed is None else args.seed
    ds = SIMULATORS[args.kind](args.J, seed)
    names = {"regression": ["y", "const", "x"], "iv": ["y", "const", "x", "const_z", "z"],
             "ate": ["const", "x", "y", "w"]}[args.kind]
    target = args.out or f"{args.kind}.csv"
    export_dataset(ds, target, names)
    print(target)
    return 0


def _cmd_summarize(args) -> int:
    header, data = _read_table(args.draws)
    keep = [i for i, n in enumerate(header) if n not in ("iteration", "log_post",
                                                         "log_weight", "weight")]
    table = summarize_draws(data[:, keep], [header[i] for i in keep]).to_dict()
    text = json.dumps(table, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_diagnose(args) -> int:
    header, data = _read_table(args.draws)
    target = args.out or sys.stdout
    if data.shape[0] < 2:
        raise ConfigError("need at least two draws")
    if args.out:
        _write_diagnostics(Path(args.out), header, data, args.lags)
    else:
        tracked = _tracked_columns(header) or header
        lag = min(args.lags, data.shape[0] - 1)
        cols = [autocorrelation(data[:, header.index(c)], lag) for c in tracked]
        np.savetxt(target, np.column_stack([np.arange(lag + 1)] + cols), delimiter=",",
                   header=",".join(["lag"] + tracked), comments="", fmt="%.6g")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hausmoment",
                                     description="Bayesian inference for moment-condition models")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("run", help="run an experiment config or re-run a manifest")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("simulate", help="write a synthetic data set as CSV")
    p.add_argument("--kind", choices=sorted(SIMULATORS), default="regression")
    p.add_argument("--J", type=int, default=500)
    common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("summarize", help="summary statistics of a draws CSV")
    p.add_argument("draws")
    common(p)
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("diagnose", help="autocorrelations of a draws CSV")
    p.add_argument("draws")
    p.add_argument("--lags", type=int, default=50)
    common(p)
    p.set_defaults(func=_cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SamplerAbort as exc:
        print(f"sampler aborted: {exc}", file=sys.stderr)
        return 3
    except HausmomentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
