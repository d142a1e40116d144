"""Command-line harness: ``qfs counting | homodyne-ideal | homodyne-sweep | cavity``.

Every output file embeds the resolved configuration and the package version.
Outputs depend only on the configuration and seed, never on the worker count;
wall-clock timings go to stderr unless ``--timing`` asks for them in the data.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
import tomli

from . import __version__, diffsim, jumpsim, measures
from .diffsim import format_number
from .qops import LOCAL_PAULI_LABELS

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3
log = logging.getLogger("qfs")


class ConfigError(ValueError):
    """Raised for unreadable or out-of-range configuration."""


# -- configuration -------------------------------------------------------------

COUNTING_KEYS = {f.name for f in fields(jumpsim.CountingConfig)}
CAVITY_KEYS = {f.name for f in fields(jumpsim.CavityConfig)}
HOMODYNE_KEYS = {f.name for f in fields(diffsim.HomodyneConfig)}

DEFAULT_ETAS = [round(x, 6) for x in np.linspace(0.55, 1.0, 11)]
DEFAULT_DELAYS = [round(x, 6) for x in np.linspace(0.0, 0.26, 14)]

DEFAULTS = {
    "counting": {"n_traj": 10000},
    "homodyne-ideal": {"dt": 1e-4, "T": 1.14, "sample_every": 10},
    "homodyne-sweep": {"dt": 2e-3, "T": 3.0, "etas": DEFAULT_ETAS, "delays": DEFAULT_DELAYS},
    "cavity": {"n_traj": 2000, "gamma_eff": 1.0, "kappa_ratios": [10.0, 30.0, 100.0, 300.0, 1000.0],
               "delay": 0.0, "bins": 12},
}
EXTRA_KEYS = {
    "counting": set(),
    "homodyne-ideal": {"sample_every"},
    "homodyne-sweep": {"etas", "delays"},
    "cavity": {"gamma_eff", "kappa_ratios", "bins"},
}
MODEL_KEYS = {
    "counting": COUNTING_KEYS,
    "homodyne-ideal": HOMODYNE_KEYS,
    "homodyne-sweep": HOMODYNE_KEYS - {"delay", "eta_l", "eta_r"},
    "cavity": COUNTING_KEYS - {"gamma", "pulse"},
}


def load_config(command: str, path: str | None, overrides: dict) -> dict:
    """Merge defaults, the TOML file (top level or a table named after the command), overrides."""
    cfg = dict(DEFAULTS[command])
    if path:
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        table = data.get(command, data.get(command.replace("-", "_"), None))
        if table is None:
            table = {k: v for k, v in data.items() if not isinstance(v, dict)}
        cfg.update(table)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    allowed = MODEL_KEYS[command] | EXTRA_KEYS[command]
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys for {command}: {', '.join(unknown)}")
    return cfg


def _build(cls, cfg: dict, keys):
    try:
        return cls(**{k: v for k, v in cfg.items() if k in keys})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def header_lines(command: str, cfg: dict) -> list[str]:
    return [f"qfs {__version__} {command}", "config " + json.dumps(cfg, sort_keys=True)]


def write_csv(path: Path, header, columns: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(format_number(x) if not isinstance(x, str) else x for x in row) + "\n")


def write_json(path: Path, header, payload: dict) -> None:
    doc = {"version": __version__, "header": header, **payload}
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if not math.isfinite(x) else float(format_number(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# -- counting ------------------------------------------------------------------


def expected_success_rate(c: jumpsim.CountingConfig) -> float | None:
    """Analytic success probability for balanced transmissions; None otherwise."""
    if not (c.eta_loss_1 == c.eta_loss_2 and c.eta_l == c.eta_r):
        return None
    if not c.pulse:
        return 0.0
    eta = c.eta_loss_1 * c.eta_l
    return eta * eta * math.exp(-c.gamma * c.delay)


def cmd_counting(cfg: dict, out: Path, workers: int, check: bool, timing: bool) -> tuple[dict, bool]:
    c = _build(jumpsim.CountingConfig, cfg, COUNTING_KEYS)
    t0 = time.perf_counter()
    summary, records = jumpsim.counting_ensemble(c, workers=workers, return_records=True)
    wall = time.perf_counter() - t0
    header = header_lines("counting", cfg)
    with open(out / "trajectories.jsonl", "w") as fh:
        # first line identifies the run; the rest are one record per trajectory
        fh.write(json.dumps({"qfs_header": header, "version": __version__}) + "\n")
        for r in records:
            fh.write(r.to_json() + "\n")
    expected = expected_success_rate(c)
    payload = {"summary": summary.to_dict(), "expected_success_rate": expected}
    if timing:
        payload["wall_time"] = wall
    checks = {}
    if expected is not None:
        tol = 3 * math.sqrt(max(expected * (1 - expected), 0.0) / summary.n_traj)
        checks["success_rate_within_3_sigma"] = abs(summary.success_rate - expected) <= max(tol, 1e-12)
    if summary.counts["success"]:
        checks["conditional_fidelity_1e-9"] = 1 - summary.min_fidelity_given_success <= 1e-9
    if not c.pulse and summary.n_two_clicks:
        checks["same_detector_always"] = summary.same_detector_fraction == 1.0
    payload["checks"] = checks
    write_json(out / "summary.json", header, payload)
    print(f"success rate {summary.success_rate:.6f} +/- {summary.stderr:.6f} "
          f"(n={summary.n_traj}); fidelity given success {summary.mean_fidelity_given_success:.12g}")
    log.info("counting wall time %.2f s", wall)
    return payload, all(checks.values())


# -- homodyne ------------------------------------------------------------------

ZERO_TOL = 1e-8
PATTERN_TOL = 1e-8


def gain_pattern_residual(A: np.ndarray, B: np.ndarray) -> float:
    """Deviation from the ideal-case gain structure over a stack of steps.

    Expected: ``A[L,sx1] = A[L,sx2] = A[R,sy2] = -A[R,sy1]`` with all other
    entries of ``A`` and all of ``B`` zero.
    """
    a = np.asarray(A)
    ref = a[:, 0, 0]
    res = [a[:, 0, 3] - ref, a[:, 1, 4] - ref, a[:, 1, 1] + ref]
    mask = np.zeros(a.shape[1:], dtype=bool)
    mask[0, 0] = mask[0, 3] = mask[1, 1] = mask[1, 4] = True
    res.append(a[:, ~mask].ravel())
    res.append(np.asarray(B).ravel())
    return float(max(np.abs(np.concatenate([np.ravel(r) for r in res])).max(), 0.0))


def cmd_homodyne_ideal(cfg: dict, out: Path, workers: int, check: bool, timing: bool):
    hc = _build(diffsim.HomodyneConfig, cfg, HOMODYNE_KEYS)
    every = int(cfg.get("sample_every", 1))
    t0 = time.perf_counter()
    res = diffsim.run_feedback_me(hc, sample_every=every, keep_gains=True)
    wall = time.perf_counter() - t0
    analytic = np.array([measures.concurrence_of_time(hc.gamma * t) for t in res.times])
    n = len(res.A)
    A = np.concatenate([res.A, res.A[-1:]]) if n < len(res.times) else res.A[: len(res.times)]
    B = np.concatenate([res.B, res.B[-1:]]) if n < len(res.times) else res.B[: len(res.times)]
    chan = ("L", "R")
    cols = ["t", "fidelity", "concurrence", "concurrence_analytic"]
    cols += [f"A_{c}_{h}" for c in chan for h in LOCAL_PAULI_LABELS]
    cols += [f"B_{h}" for h in LOCAL_PAULI_LABELS]
    rows = []
    for k, t in enumerate(res.times):
        rows.append([t, res.fidelity[k], res.concurrence[k], analytic[k], *A[k].ravel(), *B[k]])
    header = header_lines("homodyne-ideal", cfg)
    write_csv(out / "timeseries.csv", header, cols, rows)
    t_check = 1.14 / hc.gamma
    idx = np.flatnonzero(res.times <= t_check + 1e-12)
    fid_by = float(res.fidelity[idx].max())
    # the analytic solution ends once the concurrence reaches 1
    t_hit = measures.hitting_time(1.0) / hc.gamma
    before = res.times <= t_hit
    conc_err = float(np.nanmax(np.abs(res.concurrence - analytic)[before]))
    pattern = gain_pattern_residual(res.A, res.B)
    peak, t_peak = res.peak
    payload = {
        "fidelity_by_1.14": fid_by, "peak_fidelity": peak, "peak_time": t_peak,
        "hitting_time_analytic": t_hit,
        "max_concurrence_error": conc_err, "gain_pattern_residual": pattern,
        "indefinite_hessian_steps": res.indefinite_events,
    }
    if timing:
        payload["wall_time"] = wall
    checks = {"fidelity_by_1.14_ge_0.999": fid_by >= 0.999,
              "concurrence_error_le_1e-3": conc_err <= 1e-3,
              "gain_pattern_le_1e-8": pattern <= PATTERN_TOL}
    payload["checks"] = checks
    write_json(out / "summary.json", header, payload)
    print(f"peak fidelity {peak:.9f} at t = {t_peak:.4f}; max |C - C_analytic| = {conc_err:.2e}")
    log.info("homodyne-ideal wall time %.2f s", wall)
    return payload, all(checks.values())


def _sweep_point(args):
    base, eta, gd = args
    cfg = dict(base, eta_l=eta, eta_r=eta, delay=gd / base.get("gamma", 1.0))
    hc = diffsim.HomodyneConfig(**cfg)
    t0 = time.perf_counter()
    res = diffsim.run_feedback_me(hc, keep_gains=False)
    peak, t_peak = res.peak
    return min(peak, 1.0), t_peak, time.perf_counter() - t0


def crossing(delays, fids, level: float = 0.5) -> float:
    """First delay at which the fidelity falls to ``level`` (linear interpolation)."""
    d = np.asarray(delays, dtype=float)
    f = np.asarray(fids, dtype=float)
    if f[0] <= level:
        return float(d[0])
    for k in range(1, len(d)):
        if f[k] <= level:
            return float(d[k - 1] + (f[k - 1] - level) * (d[k] - d[k - 1]) / (f[k - 1] - f[k]))
    return float("nan")


def run_sweep(cfg: dict, workers: int = 1):
    etas = [float(x) for x in cfg["etas"]]
    delays = [float(x) for x in cfg["delays"]]
    if not etas or not delays:
        raise ConfigError("sweep axes must be nonempty")
    if any(not 0 < e <= 1 for e in etas) or any(d < 0 for d in delays):
        raise ConfigError("sweep values out of range")
    base = {k: v for k, v in cfg.items() if k in HOMODYNE_KEYS}
    for d in delays:
        if d > 0 and base.get("dt", 1e-4) > d / base.get("gamma", 1.0) * (1 + 1e-9):
            raise ConfigError("dt must resolve the smallest nonzero delay")
    jobs = [(base, e, d) for e in etas for d in delays]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    fid = np.array([r[0] for r in results]).reshape(len(etas), len(delays))
    tpk = np.array([r[1] for r in results]).reshape(len(etas), len(delays))
    wall = np.array([r[2] for r in results]).reshape(len(etas), len(delays))
    return etas, delays, fid, tpk, wall


def monotone_violation(etas, delays, fid) -> float:
    """Largest increase of fidelity along growing delay or shrinking efficiency."""
    order = np.argsort(etas)[::-1]
    f = fid[order][:, np.argsort(delays)]
    worst = 0.0
    if f.shape[1] > 1:
        worst = max(worst, float(np.max(np.diff(f, axis=1))))
    if f.shape[0] > 1:
        worst = max(worst, float(np.max(np.diff(f, axis=0))))
    return worst


def row_crossings(etas, delays, fid):
    return {float(e): crossing(delays, fid[i]) for i, e in enumerate(etas)}


def interpolated_crossing(crossings: dict, eta: float) -> float:
    keys = sorted(crossings)
    if eta in crossings:
        return crossings[eta]
    vals = [crossings[k] for k in keys]
    return float(np.interp(eta, keys, vals))


MONOTONE_TOL = 1e-6


def cmd_homodyne_sweep(cfg: dict, out: Path, workers: int, check: bool, timing: bool):
    t0 = time.perf_counter()
    etas, delays, fid, tpk, wall = run_sweep(cfg, workers)
    total = time.perf_counter() - t0
    header = header_lines("homodyne-sweep", cfg)
    cols = ["eta", "gamma_delay", "fidelity", "stderr", "peak_time"] + (["wall_time"] if timing else [])
    rows = []
    for i, e in enumerate(etas):
        for j, d in enumerate(delays):
            row = [e, d, fid[i, j], 0.0, tpk[i, j]]
            if timing:
                row.append(wall[i, j])
            rows.append(row)
    write_csv(out / "sweep.csv", header, cols, rows)
    cross = row_crossings(etas, delays, fid)
    write_csv(out / "crossings.csv", header, ["eta", "gamma_delay_at_fidelity_0.5"],
              [[e, cross[e]] for e in sorted(cross)])
    corner = None
    if 1.0 in etas and 0.0 in delays:
        corner = float(fid[etas.index(1.0), delays.index(0.0)])
    c066 = interpolated_crossing(cross, 0.66) if min(etas) <= 0.66 <= max(etas) else None
    viol = monotone_violation(etas, delays, fid)
    payload = {"crossings": {format_number(k): v for k, v in cross.items()},
               "crossing_eta_0.66": c066, "ideal_corner_fidelity": corner,
               "monotonicity_violation": viol}
    if timing:
        payload["wall_time"] = total
    checks = {"monotone": viol <= MONOTONE_TOL}
    if corner is not None:
        checks["ideal_corner_ge_0.999"] = corner >= 0.999
    if c066 is not None and math.isfinite(c066):
        checks["crossing_0.66_within_0.13_pm_0.02"] = abs(c066 - 0.13) <= 0.02
    payload["checks"] = checks
    write_json(out / "summary.json", header, payload)
    for e in sorted(cross):
        print(f"eta = {e:.4g}: fidelity 0.5 crossing at gamma*delay = {cross[e]:.4g}")
    log.info("homodyne-sweep wall time %.1f s", total)
    return payload, all(checks.values())


# -- cavity --------------------------------------------------------------------


def cavity_for_ratio(ratio: float, gamma_eff: float, base: dict) -> jumpsim.CavityConfig:
    """Cavity with ``kappa/Gamma_slow = ratio`` and ``Gamma_slow = gamma_eff``."""
    kappa = ratio * gamma_eff
    s = kappa / 2 - gamma_eff
    g = math.sqrt(kappa * kappa / 4 - s * s)
    return jumpsim.CavityConfig(g=g, kappa=kappa, **base)


def admixture_relative_error(delta, exact, kappa):
    """``|exact/approx - 1|`` evaluated in log space; NaN where ``exact`` underflowed."""
    exact = np.asarray(exact, dtype=float)
    out = np.full(exact.shape, np.nan)
    ok = exact > 0
    log_ratio = np.log(exact[ok]) + kappa * np.asarray(delta)[ok] / 2 - 0.5 * math.log(2.0)
    out[ok] = np.abs(np.expm1(log_ratio))
    return out


def analyse_cavity(records, cfg: jumpsim.CavityConfig, n_bins: int = 12):
    """Per-trajectory exact vs approximate admixtures and binned statistics."""
    eff = cfg.gamma_slow
    opposite_worst = 0.0
    formula_worst = 0.0
    same = []
    for r in records:
        if r.outcome != "success":
            continue
        det = r.detected
        t1, t2 = r.jump_times
        ref = jumpsim.cavity_final_state(t1, r.pulse_time, t2, det, cfg)
        ref = ref / np.linalg.norm(ref)
        formula_worst = max(formula_worst, 1 - abs(np.vdot(ref, r.final_state)))
        if det[0] != det[1]:
            opposite_worst = max(opposite_worst, 1 - r.fidelity())
            continue
        delta = t2 - r.pulse_time
        exact = abs(jumpsim.triplet_admixture(r.final_state))
        approx = jumpsim.approx_triplet_admixture(delta, cfg.kappa)
        same.append((delta, exact, approx, 1 - r.fidelity()))
    same = np.array(same).reshape(-1, 4)
    bins = []
    if len(same):
        edges = np.linspace(0, np.quantile(cfg.kappa * same[:, 0], 0.95), n_bins + 1)
        for a, b in zip(edges[:-1], edges[1:]):
            m = (cfg.kappa * same[:, 0] >= a) & (cfg.kappa * same[:, 0] < b)
            if m.any():
                c2 = same[m, 2] ** 2
                bins.append([a, b, int(m.sum()), float(same[m, 3].mean()),
                             float(np.mean(c2 / (1 + c2)))])
    infid = np.array([1 - r.fidelity() for r in records if r.outcome == "success"])
    approx_inf = same[:, 2] ** 2 / (1 + same[:, 2] ** 2) if len(same) else np.zeros(0)
    tail = float(np.mean(cfg.kappa * same[:, 0] < 5.0)) if len(same) else float("nan")
    rel = admixture_relative_error(same[:, 0], same[:, 1], cfg.kappa) if len(same) else np.zeros(0)
    return {
        "kappa": cfg.kappa, "g": cfg.g, "gamma_eff": eff, "kappa_over_gamma_eff": cfg.kappa / eff,
        "n_success": int(len(infid)), "mean_infidelity": float(infid.mean()) if len(infid) else float("nan"),
        "mean_infidelity_approx": float(approx_inf.sum() / max(len(infid), 1)),
        "max_opposite_infidelity": opposite_worst, "max_formula_deviation": formula_worst,
        "same_detector_fraction": len(same) / max(len(infid), 1), "early_tail_fraction": tail,
        "median_admixture_rel_error": float(np.nanmedian(rel)) if np.isfinite(rel).any() else float("nan"),
        "bins": bins, "same": same,
    }


def cmd_cavity(cfg: dict, out: Path, workers: int, check: bool, timing: bool):
    base = {k: v for k, v in cfg.items() if k in (COUNTING_KEYS - {"gamma", "pulse"})}
    header = header_lines("cavity", cfg)
    rows, bin_rows, checks = [], [], {}
    t0 = time.perf_counter()
    for ratio in cfg["kappa_ratios"]:
        try:
            cc = cavity_for_ratio(float(ratio), float(cfg["gamma_eff"]), base)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        recs = jumpsim.simulate_records(cc, "cavity", workers)
        a = analyse_cavity(recs, cc, int(cfg["bins"]))
        rows.append([a[k] for k in ("kappa", "g", "gamma_eff", "kappa_over_gamma_eff", "n_success",
                                    "mean_infidelity", "mean_infidelity_approx",
                                    "max_opposite_infidelity", "max_formula_deviation",
                                    "same_detector_fraction", "early_tail_fraction",
                                    "median_admixture_rel_error")])
        for b in a["bins"]:
            bin_rows.append([cc.kappa, *b])
        checks[f"opposite_singlet_exact_ratio_{format_number(ratio)}"] = a["max_opposite_infidelity"] < 1e-10
        checks[f"closed_form_1e-9_ratio_{format_number(ratio)}"] = a["max_formula_deviation"] < 1e-9
    wall = time.perf_counter() - t0
    write_csv(out / "cavity.csv", header,
              ["kappa", "g", "gamma_eff", "kappa_over_gamma_eff", "n_success", "mean_infidelity",
               "mean_infidelity_approx", "max_opposite_infidelity", "max_formula_deviation",
               "same_detector_fraction", "early_tail_fraction", "median_admixture_rel_error"], rows)
    write_csv(out / "cavity_bins.csv", header,
              ["kappa", "kappa_delta_lo", "kappa_delta_hi", "count", "mean_infidelity",
               "mean_infidelity_approx"], bin_rows)
    payload = {"checks": checks}
    if timing:
        payload["wall_time"] = wall
    write_json(out / "summary.json", header, payload)
    for r in rows:
        print(f"kappa/gamma_eff = {r[3]:.4g}: mean infidelity {r[5]:.4g} (approximation {r[6]:.4g})")
    return payload, all(checks.values())


# -- entry point ---------------------------------------------------------------

COMMANDS = {
    "counting": cmd_counting,
    "homodyne-ideal": cmd_homodyne_ideal,
    "homodyne-sweep": cmd_homodyne_sweep,
    "cavity": cmd_cavity,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qfs", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"qfs {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML configuration file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--workers", type=int, help="worker processes (default $QFS_WORKERS or 1)")
        s.add_argument("--dt", type=float)
        s.add_argument("--n-traj", type=int, dest="n_traj")
        s.add_argument("--check", action="store_true", help="exit 3 if acceptance checks fail")
        s.add_argument("--timing", action="store_true", help="include wall times in the outputs")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_workers(flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("QFS_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"QFS_WORKERS must be an integer, got {env!r}") from exc
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    overrides = {"seed": args.seed, "dt": args.dt, "n_traj": args.n_traj}
    if args.command in ("homodyne-ideal", "homodyne-sweep"):
        overrides.pop("n_traj")  # the master-equation runs are deterministic
        if args.n_traj is not None:
            print("qfs: --n-traj is ignored for master-equation runs", file=sys.stderr)
    try:
        cfg = load_config(args.command, args.config, overrides)
        workers = resolve_workers(args.workers)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _, ok = COMMANDS[args.command](cfg, out, workers, args.check, args.timing)
    except ConfigError as exc:
        print(f"qfs: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.check and not ok:
        print("qfs: acceptance checks failed", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
