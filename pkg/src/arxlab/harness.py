"""Seeded experiment grids over (T, seed) cells with deterministic reports."""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .comparator import best_in_hindsight_dfc
from .dfc import MODES, DfcConfig, DfcSet, logcosh_loss, quadratic_loss, run_algorithm1
from .ofu import OfuConfig, QuadraticCost, run_algorithm2
from .system import (ArxSystem, InstabilityError, NoiseSpec, default_horizon, gaussian_controller,
                     markov_parameters, simulate, write_trajectory_csv)
from .sysid import ConfidenceParams, NumericalError, confidence_radius, ellipsoid_statistic, \
    estimate_from_data, estimation_error, pe_diagnostic
from .traces import fit_regret_exponent

log = logging.getLogger(__name__)

ALGORITHMS = ("dfc", "ofu", "sysid-only")
WARMUP_RULES = ("sqrt_T", "two_thirds_T", "fixed")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def load_system(spec, base_dir: str = ".") -> ArxSystem:
    """System from an inline dict, a ``{"preset": "scalar"}`` entry, or a path to a JSON file."""
    if isinstance(spec, str):
        path = spec if os.path.isabs(spec) else os.path.join(base_dir, spec)
        with open(path) as fh:
            spec = json.load(fh)
    if not isinstance(spec, dict):
        raise ConfigError("system must be an object or a file path")
    if "preset" in spec:
        if spec["preset"] != "scalar":
            raise ConfigError(f"unknown system preset {spec['preset']!r}")
        kw = {k: spec[k] for k in ("a", "b", "c", "f") if k in spec}
        noise = spec.get("noise")
        noise = None if noise is None else NoiseSpec.make(1, noise.get("kind", "gaussian"), noise.get("scale", 1.0))
        return ArxSystem.scalar(**kw, noise=noise)
    return ArxSystem.from_dict(spec)


def warmup_length(rule: str, T: int, scale: float = 1.0, tau: Optional[int] = None) -> int:
    """Warm-up (or base epoch) length: ceil(scale sqrt T), ceil(scale T^(2/3)), or a fixed tau."""
    if rule == "sqrt_T":
        return int(math.ceil(scale * math.sqrt(T)))
    if rule == "two_thirds_T":
        return int(math.ceil(scale * T ** (2.0 / 3.0)))
    if rule == "fixed":
        if tau is None:
            raise ConfigError("fixed warm-up rule needs tau")
        return int(tau)
    raise ConfigError(f"unknown warm-up rule {rule!r}")


@dataclass
class ExperimentConfig:
    system: dict
    algorithm: str
    T_grid: List[int]
    seeds: List[int]
    mode: str = "closed_loop"
    cost: dict = field(default_factory=lambda: {"kind": "quadratic"})
    warmup: dict = field(default_factory=lambda: {"rule": "sqrt_T", "scale": 4.0})
    h: Optional[int] = None
    dfc: dict = field(default_factory=dict)
    ofu: dict = field(default_factory=dict)
    sysid: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    write_trajectories: bool = False
    base_dir: str = "."

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.T_grid or any(int(b) <= int(a) for a, b in zip(self.T_grid, self.T_grid[1:])):
            raise ConfigError("T grid must be non-empty and strictly increasing")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        self.T_grid = [int(T) for T in self.T_grid]
        self.seeds = [int(s) for s in self.seeds]
        if self.warmup.get("rule", "sqrt_T") not in WARMUP_RULES:
            raise ConfigError(f"warm-up rule must be one of {WARMUP_RULES}")

    _KEYS = ("system", "algorithm", "T_grid", "seeds", "mode", "cost", "warmup", "h", "dfc", "ofu",
             "sysid", "checks", "write_trajectories")

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "ExperimentConfig":
        unknown = set(d) - set(cls._KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = [k for k in ("system", "algorithm", "T_grid", "seeds") if k not in d]
        if missing:
            raise ConfigError(f"missing config keys: {missing}")
        return cls(**d, base_dir=base_dir)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d, os.path.dirname(os.path.abspath(path)))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self._KEYS}

    def cells(self):
        return [(T, s) for T in self.T_grid for s in self.seeds]


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _loss(cfg: ExperimentConfig, system: ArxSystem):
    c = cfg.cost
    Q = np.asarray(c.get("Q", np.eye(system.m)), float).reshape(system.m, system.m)
    R = np.asarray(c.get("R", np.eye(system.p)), float).reshape(system.p, system.p)
    kind = c.get("kind", "quadratic")
    if kind == "quadratic":
        return quadratic_loss(Q, R), QuadraticCost(Q, R)
    if kind == "logcosh":
        if cfg.algorithm == "ofu":
            raise ConfigError("the ofu algorithm needs a quadratic cost")
        return logcosh_loss(Q, R, float(c.get("c", 1.0))), None
    raise ConfigError(f"unknown cost kind {kind!r}")


def _horizon(cfg: ExperimentConfig, system: ArxSystem, T: int) -> int:
    return int(cfg.h) if cfg.h is not None else default_horizon(system, T)


def _epochs(meta):
    keep = ("start", "samples", "sigma_min", "sigma_min_per_sample", "beta", "g_error_bound", "radii",
            "J_center", "J_selected", "contraction", "fallback", "evaluations", "error")
    return [{k: e[k] for k in keep if k in e} for e in meta.get("epochs", [])]


def _run_dfc(cfg, system, T, seed):
    loss, _ = _loss(cfg, system)
    h = _horizon(cfg, system, T)
    d = cfg.dfc
    T_warm = warmup_length(cfg.warmup.get("rule", "sqrt_T"), T, cfg.warmup.get("scale", 4.0), cfg.warmup.get("tau"))
    dcfg = DfcConfig(T=T, T_warm=T_warm, h=h, h_prime=d.get("h_prime"), sigma_u=d.get("sigma_u", 1.0),
                     eta_scale=d.get("eta_scale", 1.0), lam=d.get("lam", 1.0))
    dset = DfcSet(float(d.get("kappa_psi", 2.0)), float(d.get("r", 0.5)), dcfg.h_prime, h)
    traj, trace = run_algorithm1(system, dset, loss, cfg.mode, dcfg, seed=seed)
    policy, comp, info = best_in_hindsight_dfc(system, dset, loss, traj.e, iters=int(d.get("comparator_iters", 20000)),
                                               return_info=True)
    trace = trace.with_comparator(comp)
    extra = {"T_warm": T_warm, "h": h, "h_prime": dcfg.h_prime, "comparator": info,
             "comparator_policy": policy.M, "max_norm_sum": trace.meta["max_norm_sum"],
             "epochs": _epochs(trace.meta)}
    return traj, trace, extra


def _run_ofu(cfg, system, T, seed):
    _, cost = _loss(cfg, system)
    h = _horizon(cfg, system, T)
    o = dict(cfg.ofu)
    n = int(o.pop("n", system.n))
    T_warm = warmup_length(cfg.warmup.get("rule", "sqrt_T"), T, cfg.warmup.get("scale", 4.0), cfg.warmup.get("tau"))
    ocfg = OfuConfig(T=T, T_warm=T_warm, h=h, n=n, **o)
    traj, trace = run_algorithm2(system, cost, cfg.mode, ocfg, seed=seed)
    extra = {"T_warm": T_warm, "h": h, "n": n, "J_star": trace.meta["J_opt"], "epochs": _epochs(trace.meta)}
    return traj, trace, extra


def _run_sysid(cfg, system, T, seed):
    h = _horizon(cfg, system, T)
    s = cfg.sysid
    traj = simulate(system, gaussian_controller(system.p, s.get("sigma_u", 1.0)), T, seed=seed)
    est = estimate_from_data(traj.y, traj.u, h, float(s.get("lam", 1.0)))
    truth = markov_parameters(system, h)
    S = float(s.get("S", 2.0 * truth.norm()))
    delta = float(s.get("delta", 0.05))
    beta = confidence_radius(est, ConfidenceParams(S, delta, max(system.noise.R, 1e-12), T))
    stat = ellipsoid_statistic(est, truth)
    smin, ratio = pe_diagnostic(est)
    extra = {"h": h, "error": estimation_error(est, truth), "beta": beta, "ellipsoid_statistic": stat,
             "inside": bool(stat <= beta), "sigma_min": smin, "sigma_min_per_sample": ratio}
    return traj, None, extra


_RUNNERS = {"dfc": _run_dfc, "ofu": _run_ofu, "sysid-only": _run_sysid}


def cell_name(cfg: ExperimentConfig, T: int, seed: int) -> str:
    return f"{cfg.algorithm}_{cfg.mode}_T{T}_seed{seed}"


def run_cell(cfg: ExperimentConfig, T: int, seed: int, out_dir: Optional[str] = None) -> dict:
    """Run one (T, seed) cell; aborts are recorded, not raised."""
    system = load_system(cfg.system, cfg.base_dir)
    name = cell_name(cfg, T, seed)
    rec = {"name": name, "T": T, "seed": seed}
    try:
        traj, trace, extra = _RUNNERS[cfg.algorithm](cfg, system, T, seed)
    except (InstabilityError, NumericalError, np.linalg.LinAlgError, RuntimeError) as exc:
        rec.update(status="aborted", error=f"{type(exc).__name__}: {exc}")
        return rec
    rec.update(status="ok", **extra)
    if trace is not None:
        rec["final_regret"] = trace.final_regret
        rec["total_cost"] = float(np.sum(trace.cost))
        rec["comparator_total"] = float(np.sum(trace.comparator))
    if out_dir is not None:
        if trace is not None:
            trace.to_csv(os.path.join(out_dir, f"{name}_regret.csv"))
        if cfg.write_trajectories or trace is None:
            write_trajectory_csv(os.path.join(out_dir, f"{name}_trajectory.csv"), traj)
    return rec


def _cell_job(args):
    cfg_dict, base_dir, T, seed, out_dir = args
    return run_cell(ExperimentConfig.from_dict(cfg_dict, base_dir), T, seed, out_dir)


def _quantiles(v):
    q25, q50, q75 = np.percentile(v, [25, 50, 75])
    return {"median": float(q50), "q25": float(q25), "q75": float(q75), "iqr": float(q75 - q25)}


def summarize(cfg: ExperimentConfig, cells: List[dict]) -> dict:
    """Aggregate per-T medians, IQRs and rate fits; independent of seed order."""
    cells = sorted(cells, key=lambda c: (c["T"], c["seed"]))
    per_T, ok = [], True
    key = "error" if cfg.algorithm == "sysid-only" else "final_regret"
    for T in cfg.T_grid:
        good = [c for c in cells if c["T"] == T and c["status"] == "ok"]
        entry = {"T": T, "cells": sum(c["T"] == T for c in cells), "ok": len(good)}
        if not good:
            ok = False
        else:
            entry[key] = _quantiles([c[key] for c in good])
            pe = [c.get("sigma_min_per_sample") for c in good]
            pe = [x for x in pe if x is not None]
            if not pe:
                pe = [e["sigma_min_per_sample"] for c in good for e in c.get("epochs", [])[:1]
                      if "sigma_min_per_sample" in e]
            if pe:
                entry["pe_sigma_min_per_sample_median"] = float(np.median(pe))
            if cfg.algorithm == "sysid-only":
                entry["coverage"] = float(np.mean([c["inside"] for c in good]))
        per_T.append(entry)
    summary = {"algorithm": cfg.algorithm, "mode": cfg.mode, "ok": ok, "per_T": per_T, "config": cfg.to_dict()}
    usable = [e for e in per_T if key in e]
    if cfg.algorithm == "sysid-only":
        if len(usable) >= 2:
            Ts = np.log([e["T"] for e in usable])
            med = np.log([e[key]["median"] for e in usable])
            summary["sysid_error_slope"] = float(np.polyfit(Ts, med, 1)[0])
        cov = [c["inside"] for c in cells if c["status"] == "ok"]
        summary["coverage"] = float(np.mean(cov)) if cov else None
    elif len(usable) >= 3:
        try:
            summary["fit"] = fit_regret_exponent([e["T"] for e in usable], [e[key]["median"] for e in usable]).to_dict()
        except ValueError as exc:
            summary["fit"] = {"error": str(exc)}
    summary["cells"] = cells
    return summary


def run_experiment(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    """Run all cells (optionally in a process pool), write CSVs and ``summary.json``."""
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(cfg.to_dict(), cfg.base_dir, T, s, out_dir) for T, s in cfg.cells()]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(_cell_job, jobs))
    else:
        cells = [_cell_job(j) for j in jobs]
    summary = summarize(cfg, cells)
    dump_json(summary, os.path.join(out_dir, "summary.json"))
    return summary


# --- checks for ``report --check`` -----------------------------------------

def check_summary(summary: dict, checks: dict) -> List[tuple]:
    """Evaluate simple threshold checks; returns ``(name, passed, detail)`` tuples.

    Supported keys: ``slope_max``, ``slope_range``, ``sysid_slope_range``,
    ``coverage_min``, ``final_regret_positive_fraction``.
    """
    out = []
    fit = summary.get("fit") or {}
    slope = fit.get("slope")
    if "slope_max" in checks:
        out.append(("slope_max", slope is not None and slope < checks["slope_max"], f"slope={slope}"))
    if "slope_range" in checks:
        lo, hi = checks["slope_range"]
        out.append(("slope_range", slope is not None and lo <= slope <= hi, f"slope={slope}"))
    if "sysid_slope_range" in checks:
        lo, hi = checks["sysid_slope_range"]
        s = summary.get("sysid_error_slope")
        out.append(("sysid_slope_range", s is not None and lo <= s <= hi, f"slope={s}"))
    if "coverage_min" in checks:
        c = summary.get("coverage")
        out.append(("coverage_min", c is not None and c >= checks["coverage_min"], f"coverage={c}"))
    if "final_regret_positive_fraction" in checks:
        regs = [c["final_regret"] for c in summary.get("cells", []) if c.get("status") == "ok" and "final_regret" in c]
        frac = float(np.mean([r > 0 for r in regs])) if regs else 0.0
        out.append(("final_regret_positive_fraction", frac >= checks["final_regret_positive_fraction"],
                    f"fraction={frac}"))
    return out


def format_report(summary: dict) -> str:
    lines = [f"algorithm={summary['algorithm']} mode={summary['mode']} ok={summary['ok']}"]
    key = "error" if summary["algorithm"] == "sysid-only" else "final_regret"
    for e in summary["per_T"]:
        q = e.get(key)
        stat = f"median={q['median']:.6g} iqr={q['iqr']:.6g}" if q else "no successful cells"
        lines.append(f"T={e['T']:>8d} cells={e['ok']}/{e['cells']} {key} {stat}")
    fit = summary.get("fit")
    if fit and "slope" in fit:
        lines.append(f"log-log slope={fit['slope']:.4f} r2={fit['r_squared']:.4f} "
                     f"polylog k={fit['polylog_k']} r2={fit['polylog_r_squared']:.4f}")
    if "sysid_error_slope" in summary:
        lines.append(f"estimation error slope={summary['sysid_error_slope']:.4f} coverage={summary.get('coverage')}")
    return "\n".join(lines)
