"""Command-line front end: ``seqmc synth``, ``seqmc run-dataset`` and ``seqmc export``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data_io
from .harness import POLICIES, Environment, ExperimentConfig, _stream, aggregate_regret, run_experiment, run_synthetic
from .svi import SviConfig

log = logging.getLogger("seqmc")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(Exception):
    pass


def _bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> list:
    return [int(x) for x in s.split(",") if x.strip()]


def _strs(s: str) -> list:
    return [x.strip() for x in s.split(",") if x.strip()]


def _opt_int(s: str):
    return None if s.strip().lower() in ("", "none", "0") else int(s)


COMMON_KEYS = {
    "K_model": int,
    "policies": _strs,
    "runs": int,
    "seed": int,
    "sigma": float,
    "beta": float,
    "warm_start_fraction": float,
    "noise_sigma": float,
    "with_replacement": _bool,
    "n_theta": int,
    "n_bins": int,
    "ids_candidates": _opt_int,
    "greedy_rank": _opt_int,
    "horizon_override": _opt_int,
    "n_obs_per_refit": _opt_int,
    "jobs": int,
    "svi_n_mc_samples": int,
    "svi_max_iters": int,
    "svi_map_iters": int,
    "svi_convergence_window": int,
    "svi_convergence_rel_tol": float,
    "svi_rho": float,
    "svi_eps": float,
}
SYNTH_KEYS = {**COMMON_KEYS, "D": int, "N": int, "ranks": _ints, "w_dist": str}
DATASET_KEYS = {
    **COMMON_KEYS,
    "matrix": str,
    "triples": str,
    "delimiter": str,
    "shape": _ints,
    "orient": str,
    "horizon_rank": int,
}
SYNTH_REQUIRED = ("D", "N", "ranks", "policies", "runs")
DATASET_REQUIRED = ("policies", "runs")
DEFAULTS = {"K_model": 20, "seed": 0, "w_dist": "alternate", "jobs": 1, "orient": "users-as-columns", "horizon_rank": 20}


def _effective(args, schema, required) -> dict:
    cfg = {k: v for k, v in DEFAULTS.items() if k in schema}
    if args.config:
        try:
            cfg.update(data_io.read_config(args.config, schema))
        except (OSError, data_io.DataFormatError) as exc:
            raise ConfigError(str(exc)) from None
    overrides = {
        "seed": args.seed,
        "policies": args.policy,
        "runs": args.runs,
        "jobs": args.jobs,
    }
    if "ranks" in schema:
        overrides["ranks"] = args.rank
    elif args.rank:
        overrides["K_model"] = args.rank[0]
    if "orient" in schema:
        overrides["orient"] = args.orient
    if args.with_replacement:
        overrides["with_replacement"] = True
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    for key in required:
        if key not in cfg:
            raise ConfigError(f"missing required key {key!r}")
    bad = [p for p in cfg["policies"] if p not in POLICIES]
    if bad:
        raise ConfigError(f"unknown policies {bad}; expected some of {list(POLICIES)}")
    if cfg["runs"] < 1:
        raise ConfigError("runs must be >= 1")
    return cfg


def _svi_config(cfg: dict, seed: int) -> SviConfig:
    kw = {k[4:]: v for k, v in cfg.items() if k.startswith("svi_")}
    return SviConfig(seed=seed, **kw)


def _experiment(cfg: dict, D: int, N: int, policy: str, **extra) -> ExperimentConfig:
    keys = (
        "K_model sigma beta warm_start_fraction noise_sigma with_replacement n_theta n_bins "
        "ids_candidates greedy_rank horizon_override n_obs_per_refit"
    ).split()
    kw = {k: cfg[k] for k in keys if k in cfg}
    return ExperimentConfig(D=D, N=N, policy=policy, seed=cfg["seed"], svi=_svi_config(cfg, cfg["seed"]), **kw, **extra)


def _synth_task(args):
    exp, run = args
    return run_synthetic(exp, run)


def _dataset_task(args):
    exp, M, run = args
    exp = replace(exp, seed=int(_stream(exp.seed, "dataset-run", run).integers(2**62)))
    env = Environment(M, exp.noise_sigma, exp.beta, _stream(exp.seed, "noise"))
    trace = run_experiment(exp, env)
    trace.meta["run"] = run
    return trace


def _execute(tasks, fn, jobs: int):
    """Run tasks in order (or in a process pool); yields ``(task_index, trace_or_exception)``."""
    if jobs <= 1:
        for i, t in enumerate(tasks):
            try:
                yield i, fn(t)
            except Exception as exc:  # noqa: BLE001 - reported as exit 3
                yield i, exc
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, t) for t in tasks]
        for i, f in enumerate(futures):
            try:
                yield i, f.result()
            except Exception as exc:  # noqa: BLE001
                yield i, exc


def _write_group(out: Path, label: str, rank: int, traces: dict) -> None:
    good = [traces[k] for k in sorted(traces) if not isinstance(traces[k], Exception)]
    if good:
        mean, se = aggregate_regret(good)
        data_io.write_aggregate(out / "aggregate.csv", label, rank, mean, se)


def cmd_synth(args) -> int:
    cfg = _effective(args, SYNTH_KEYS, SYNTH_REQUIRED)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_io.write_config(out / "config.txt", cfg)
    groups, tasks = [], []
    for K in cfg["ranks"]:
        for policy in cfg["policies"]:
            try:
                exp = _experiment(cfg, cfg["D"], cfg["N"], policy, K_true=K, w_dist=cfg["w_dist"])
                exp.H
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            for run in range(cfg["runs"]):
                groups.append((K, policy, run))
                tasks.append((exp, run))
    return _run_groups(out, groups, tasks, _synth_task, cfg["jobs"])


def _run_groups(out: Path, groups, tasks, fn, jobs: int) -> int:
    results: dict = {}
    failed = False
    for i, res in _execute(tasks, fn, jobs):
        K, policy, run = groups[i]
        d = out / f"rank{K}" / policy
        d.mkdir(parents=True, exist_ok=True)
        if isinstance(res, Exception):
            log.error("rank %s policy %s run %d failed: %s", K, policy, run, res)
            failed = True
        else:
            data_io.save_trace(res, d / f"run{run:03d}.csv")
            if res.meta.get("aborted"):
                log.error("rank %s policy %s run %d aborted: %s", K, policy, run, res.meta.get("error"))
                failed = True
            log.info("rank %s policy %s run %d: final regret %.4f", K, policy, run, res.cum_regret[-1] if len(res) else 0.0)
        results.setdefault((K, policy), {})[run] = res
    for (K, policy), traces in results.items():
        _write_group(out / f"rank{K}" / policy, policy, K, traces)
    return EXIT_RUNTIME if failed else EXIT_OK


def _load_dataset(cfg: dict) -> np.ndarray:
    if "matrix" in cfg:
        mm = data_io.load_masked_matrix(cfg["matrix"])
        if cfg["orient"] == "users-as-rows":
            mm = data_io.MaskedMatrix(mm.values.T.copy(), mm.mask.T.copy())
    elif "triples" in cfg:
        if "shape" not in cfg:
            raise ConfigError("triples input needs shape = D,N")
        triples = data_io.load_ratings_triples(cfg["triples"], cfg.get("delimiter", ","))
        mm = data_io.densify(triples, tuple(cfg["shape"]), cfg["orient"])
    else:
        raise ConfigError("missing required key 'matrix' (or 'triples')")
    if not mm.complete:
        raise ConfigError(
            f"ground-truth matrix has {int((~mm.mask).sum())} unknown cells; "
            "regret needs a fully observed matrix (complete it first with any matrix-completion tool)"
        )
    return mm.values


def cmd_run_dataset(args) -> int:
    cfg = _effective(args, DATASET_KEYS, DATASET_REQUIRED)
    if cfg["orient"] not in ("users-as-columns", "users-as-rows"):
        raise ConfigError(f"unknown orientation {cfg['orient']!r}")
    try:
        M = _load_dataset(cfg)
    except (OSError, data_io.DataFormatError) as exc:
        raise ConfigError(str(exc)) from None
    D, N = M.shape
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_io.write_config(out / "config.txt", cfg)
    groups, tasks = [], []
    hr = min(cfg["horizon_rank"], D, N)
    for policy in cfg["policies"]:
        try:
            exp = _experiment(cfg, D, N, policy, horizon_rank=hr)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for run in range(cfg["runs"]):
            groups.append((hr, policy, run))
            tasks.append((exp, M, run))
    return _run_groups(out, groups, tasks, _dataset_task, cfg["jobs"])


def cmd_export(args) -> int:
    files = []
    for p in args.inputs:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(p.rglob("aggregate.csv")))
        elif p.is_file():
            files.append(p)
    if not files:
        raise ConfigError("no aggregate files found")
    rows = []
    for f in files:
        try:
            rows.extend(data_io.read_aggregate(f))
        except data_io.DataFormatError as exc:
            raise ConfigError(str(exc)) from None
    out = Path(args.out)
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write(",".join(data_io.AGGREGATE_HEADER) + "\n")
        for policy, rank, step, m, s in rows:
            fh.write(f"{policy},{rank},{step},{m!r},{s!r}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqmc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--policy", type=_strs, help="comma-separated policies: " + ",".join(POLICIES))
        sp.add_argument("--rank", type=_ints, help="comma-separated ranks")
        sp.add_argument("--runs", type=int)
        sp.add_argument("--orient", choices=["users-as-columns", "users-as-rows"])
        sp.add_argument("--with-replacement", action="store_true", help="warm start samples with replacement")
        sp.add_argument("--jobs", type=int, help="worker processes")

    run_flags(sub.add_parser("synth", help="synthetic rank sweep"))
    run_flags(sub.add_parser("run-dataset", help="run policies against a complete ground-truth matrix"))
    ex = sub.add_parser("export", help="merge aggregate regret files into one long-format CSV")
    ex.add_argument("inputs", nargs="*", help="aggregate files or directories searched recursively")
    ex.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    handler = {"synth": cmd_synth, "run-dataset": cmd_run_dataset, "export": cmd_export}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"seqmc: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"seqmc: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
