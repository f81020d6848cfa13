"""Command-line entry point: ``arxlab <subcommand> --config cfg.json --out dir``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .harness import ConfigError, ExperimentConfig, check_summary, dump_json, format_report, load_system, \
    run_experiment
from .ofu import DareConvergenceError
from .realization import OrderDeficiencyError, parameter_confidence, sysid_arx
from .system import (InstabilityError, StabilityError, gaussian_controller, markov_parameters, read_trajectory_csv,
                     simulate, write_trajectory_csv, zero_controller)
from .sysid import ConfidenceParams, LsEstimate, NumericalError, confidence_radius, ellipsoid_statistic, \
    estimate_from_data, estimation_error, g_error_bound, pe_diagnostic

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("arxlab")


def parse_seeds(text: str):
    """``"0-9"``, ``"1,4,7"`` or a mix such as ``"0-2,10"``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-", 1)
            seeds.extend(range(int(a), int(b) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ConfigError(f"empty seed list {text!r}")
    return seeds


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _resolve(base, path):
    return path if os.path.isabs(path) else os.path.join(base, path)


def _need(d, key):
    if key not in d:
        raise ConfigError(f"missing config key {key!r}")
    return d[key]


def cmd_sim(cfg, base, args):
    system = load_system(_need(cfg, "system"), base)
    T = int(_need(cfg, "T"))
    seeds = args.seeds or cfg.get("seeds", [0])
    ctrl = cfg.get("controller", {"kind": "gaussian"})
    kind = ctrl.get("kind", "gaussian")
    if kind not in ("gaussian", "zero"):
        raise ConfigError(f"unknown controller kind {kind!r}")
    Q = np.asarray(cfg.get("Q", np.eye(system.m)), float).reshape(system.m, system.m)
    R = np.asarray(cfg.get("R", np.eye(system.p)), float).reshape(system.p, system.p)
    loss = lambda y, u: float(y @ Q @ y + u @ R @ u)
    with open(os.path.join(args.out, "system.json"), "w") as fh:
        fh.write(system.dumps() + "\n")
    for s in seeds:
        c = gaussian_controller(system.p, ctrl.get("sigma_u", 1.0)) if kind == "gaussian" else zero_controller(system.p)
        traj = simulate(system, c, T, seed=s, loss=loss)
        write_trajectory_csv(os.path.join(args.out, f"trajectory_seed{s}.csv"), traj)
        np.savetxt(os.path.join(args.out, f"noise_seed{s}.csv"), traj.e, delimiter=",", fmt="%.17g")
    return EXIT_OK


def cmd_sysid(cfg, base, args):
    y, u, _ = read_trajectory_csv(_resolve(base, _need(cfg, "trajectory")))
    h = int(_need(cfg, "h"))
    est = estimate_from_data(y, u, h, float(cfg.get("lam", 1.0)))
    diag = {"h": h, "samples": est.t, "lam": est.lam, "logdet_ratio": est.logdet_ratio}
    smin, ratio = pe_diagnostic(est)
    diag.update(sigma_min=smin, sigma_min_per_sample=ratio)
    truth = load_system(cfg["system"], base) if "system" in cfg else None
    if "S" in cfg or truth is not None:
        S = float(cfg.get("S", 2.0 * markov_parameters(truth, h).norm() if truth is not None else 1.0))
        R = float(cfg.get("R", truth.noise.R if truth is not None else 1.0))
        beta = confidence_radius(est, ConfidenceParams(S, float(cfg.get("delta", 0.05)), R, int(cfg.get("T", len(y)))))
        diag.update(S=S, R=R, beta=beta, g_error_bound=g_error_bound(est, beta))
    if truth is not None:
        op = markov_parameters(truth, h)
        diag.update(error=estimation_error(est, op), ellipsoid_statistic=ellipsoid_statistic(est, op))
    with open(os.path.join(args.out, "estimate.json"), "w") as fh:
        fh.write(est.dumps() + "\n")
    dump_json(diag, os.path.join(args.out, "diagnostics.json"))
    return EXIT_OK


def cmd_realize(cfg, base, args):
    est = LsEstimate.from_dict(_read_json(_resolve(base, _need(cfg, "estimate"))))
    n = int(_need(cfg, "n"))
    realized = sysid_arx(est.markov(), n, cfg.get("d1"), cfg.get("d2"))
    eps = cfg.get("g_error_bound")
    if eps is None and "diagnostics" in cfg:
        eps = _read_json(_resolve(base, cfg["diagnostics"])).get("g_error_bound")
    with open(os.path.join(args.out, "realized.json"), "w") as fh:
        fh.write(realized.dumps() + "\n")
    report = {"n": n, "sigma_n": realized.sigma_n, "stable": realized.stable, "g_error_bound": eps,
              "radii": None if eps is None else parameter_confidence(realized, float(eps))}
    dump_json(report, os.path.join(args.out, "radii.json"))
    return EXIT_OK


def _experiment(cfg, base, args, algorithm=None, trajectories=False):
    if algorithm is not None:
        cfg = {**cfg, "algorithm": algorithm}
        cfg.setdefault("write_trajectories", trajectories)
    if args.seeds:
        cfg = {**cfg, "seeds": args.seeds}
    ecfg = ExperimentConfig.from_dict(cfg, base)
    summary = run_experiment(ecfg, args.out, args.threads)
    print(format_report(summary))
    return EXIT_OK if summary["ok"] else EXIT_RUNTIME


def cmd_report(cfg, base, args):
    if "per_T" in cfg:
        summary, checks = cfg, cfg.get("config", {}).get("checks", {})
    else:
        summary = _read_json(_resolve(base, _need(cfg, "summary")))
        checks = cfg.get("checks", summary.get("config", {}).get("checks", {}))
    text = format_report(summary)
    results = check_summary(summary, checks) if args.check else []
    for name, passed, detail in results:
        text += f"\ncheck {name}: {'PASS' if passed else 'FAIL'} ({detail})"
    print(text)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(text + "\n")
    if args.check and not all(p for _, p, _ in results):
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {
    "sim": cmd_sim,
    "sysid": cmd_sysid,
    "realize": cmd_realize,
    "dfc": lambda c, b, a: _experiment(c, b, a, "dfc", True),
    "ofu": lambda c, b, a: _experiment(c, b, a, "ofu", True),
    "experiment": _experiment,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arxlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seeds", type=parse_seeds, default=None, help="seed list, e.g. 0-9 or 1,3,5")
        p.add_argument("--threads", type=int, default=1, help="worker processes for experiment cells")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            p.add_argument("--check", action="store_true", help="exit with code 3 if any check fails")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = _read_json(args.config)
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](cfg, os.path.dirname(os.path.abspath(args.config)), args)
    except (ConfigError, StabilityError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, (NumericalError, OrderDeficiencyError)):
            print(f"runtime error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InstabilityError, NumericalError, DareConvergenceError, np.linalg.LinAlgError, RuntimeError,
            ArithmeticError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
