"""Command-line front end.

Exit codes: 0 success, 1 a certification check or sweep entry failed,
2 configuration error, 3 domain or budget error, 4 infeasible problem.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from seir_mpc import certify
from seir_mpc.config import ScenarioConfig, apply_overrides, load_config
from seir_mpc.errors import (
    BudgetExceededError,
    ConfigError,
    DomainError,
    InfeasibleError,
    ThresholdNotReachedError,
)
from seir_mpc.export import (
    cert_reports_text,
    mpc_log_text,
    read_mpc_log,
    write_cert_reports,
    write_closed_loop,
    write_csv,
    write_mpc_log,
    write_ocp_solution,
    write_trajectory,
)
from seir_mpc.integrate import Constant, Trajectory, mark_entry_times, simulate
from seir_mpc.model import as_state
from seir_mpc.mpc import LIFETIME_THRESHOLDS, epidemic_lifetime, run_mpc
from seir_mpc.ocp import OcpSpec, solve

logger = logging.getLogger("seir_mpc")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DOMAIN, EXIT_INFEASIBLE = 0, 1, 2, 3, 4

DEFAULT_LAMBDAS = (0.01, 0.2, 0.5, 0.7, 0.99)
CHECKS = ("xm-invariance", "lie-boundary", "uniform-bound", "cost-controllability", "a3", "lyapunov", "staged")
LIFETIME_COLUMNS = [f"days_below_{v:g}" for v in LIFETIME_THRESHOLDS]


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    c = argparse.ArgumentParser(add_help=False)
    c.add_argument("--config", help="flat key = value scenario file")
    c.add_argument("--out", help="output directory")
    c.add_argument("--seed", help="random seed for sampling")
    c.add_argument("--lambda", dest="lam", help="stage-cost weight in (0, 1]")
    c.add_argument("--horizon", type=float, help="prediction horizon T in days")
    c.add_argument("--delta", help="control horizon in days")
    c.add_argument("--h", help="transcription and plant step in days")
    c.add_argument("--x0", help="initial state S,E,I")
    c.add_argument("-v", "--verbose", action="store_true")
    return c


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="seir-mpc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="open-loop or feedback simulation")
    s.add_argument("--policy", default="nominal",
                   help="nominal | maximal | holding-staged | constant:<beta>,<gamma>")
    s.add_argument("--days", type=float, default=300.0)

    sub.add_parser("mpc", parents=[common], help="closed-loop MPC run")

    w = sub.add_parser("sweep-lambda", parents=[common], help="lifetime table over several lambda")
    w.add_argument("--lambdas", default=",".join(map(str, DEFAULT_LAMBDAS)))

    sub.add_parser("ocp", parents=[common], help="single open-loop optimal control solve")

    c = sub.add_parser("certify", parents=[common], help="numerical certificates")
    c.add_argument("--check", action="append", required=True,
                   help=f"one of {', '.join(CHECKS)}; repeatable or comma-separated")
    c.add_argument("--samples", type=int, help="override the per-check sample count")
    c.add_argument("--from-log", help="MPC log CSV for the lyapunov check")
    return ap


def resolve_config(args, horizon_sets_N: bool) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    raw = {}
    for key, attr in (("out", "out"), ("seed", "seed"), ("lambda", "lam"), ("delta", "delta"),
                      ("h", "h"), ("x0", "x0")):
        val = getattr(args, attr)
        if val is not None:
            raw[key] = str(val)
    if horizon_sets_N and args.horizon is not None:
        raw["T"] = repr(args.horizon)
    # flags override the file
    return apply_overrides(cfg, raw) if raw else cfg


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _policy_signal(name: str, p):
    if name == "nominal":
        return Constant(p.u_nom)
    if name == "maximal":
        return Constant(p.u_max_intervention)
    if name.startswith("constant:"):
        try:
            b, g = (float(v) for v in name.split(":", 1)[1].split(","))
        except ValueError as exc:
            raise ConfigError(f"bad constant policy {name!r}") from exc
        return Constant([b, g])
    raise ConfigError(f"unknown policy {name!r}")


def _fmt_time(t) -> str:
    return "never" if t is None else f"{t:.6g}"


def cmd_simulate(args) -> int:
    cfg = resolve_config(args, horizon_sets_N=False)
    p = cfg.params()
    x0 = as_state(cfg.x0)
    out = Path(cfg.out)
    if args.policy == "holding-staged":
        head, t_reach = certify.staged_reach_XM(x0, p, h=cfg.h)
        rest = max(args.days - t_reach, 0.0)
        n = int(math.ceil(rest / cfg.h - 1e-9))
        tail = simulate(head.final_state, Constant(p.u_nom), n * cfg.h, p, h=cfg.h, t0=head.times[-1])
        traj = Trajectory.concatenate([head, tail])
        mark_entry_times(traj, p)
        print(f"staged: phase 1 ended at t={head.meta['t_phase1']:.6g}, X_M entered at t={t_reach:.6g}")
    else:
        traj = simulate(x0, _policy_signal(args.policy, p), args.days, p, h=cfg.h)
    path = write_trajectory(out / "trajectory.csv", traj, p)
    viol = np.flatnonzero(traj.states[:, 2] > p.i_max + 1e-12)
    print(f"t_enter_XA={_fmt_time(traj.t_enter_XA)} t_enter_XM={_fmt_time(traj.t_enter_XM)}")
    if viol.size:
        print(f"constraint violated first at t={traj.times[viol[0]]:.6g} (max I={traj.states[:, 2].max():.6g})")
    else:
        print(f"no constraint violation (max I={traj.states[:, 2].max():.6g})")
    print(f"wrote {path}")
    return EXIT_OK


def _lifetimes(traj) -> list:
    out = []
    for v in LIFETIME_THRESHOLDS:
        try:
            out.append(epidemic_lifetime(traj, (v,))[0])
        except ThresholdNotReachedError:
            out.append(math.nan)
    return out


def _run_one(cfg: ScenarioConfig) -> dict:
    """Run the closed loop for one scenario and write its files."""
    p = cfg.params()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.txt").write_text(cfg.to_text())
    traj, log = run_mpc(cfg.x0, cfg.mpc_config())
    write_closed_loop(out / "closed_loop.csv", traj, log, p)
    write_mpc_log(out / "mpc_log.csv", log)
    (out / "mpc_log.txt").write_text(mpc_log_text(log))
    lt = _lifetimes(traj)
    alpha = certify.lyapunov_monitor(log).values["alpha_max"]
    row = [cfg.lam] + lt + [float(traj.states[:, 2].max()), alpha, len(log), int(log.all_converged)]
    write_csv(out / "lifetime.csv", ["lambda"] + LIFETIME_COLUMNS + ["max_I", "alpha_max", "iterations", "all_converged"], [row])
    return {"lambda": cfg.lam, "lifetimes": lt, "max_I": row[-4], "alpha_max": alpha,
            "iterations": len(log), "all_converged": log.all_converged}


def cmd_mpc(args) -> int:
    cfg = resolve_config(args, horizon_sets_N=True)
    res = _run_one(cfg)
    cells = " ".join(f"{v:.4g}" for v in res["lifetimes"])
    print(f"lambda={cfg.lam:g} T={cfg.T:g} lifetime (days below {', '.join(f'{v:g}' for v in LIFETIME_THRESHOLDS)}): {cells}")
    print(f"iterations={res['iterations']} max_I={res['max_I']:.10g} alpha_max={res['alpha_max']:.4g}")
    return EXIT_OK


def _sweep_worker(cfg: ScenarioConfig) -> dict:
    try:
        return {"status": "ok", **_run_one(cfg)}
    except (InfeasibleError, BudgetExceededError, DomainError) as exc:
        return {"lambda": cfg.lam, "status": f"{type(exc).__name__}: {exc}"}


def cmd_sweep_lambda(args) -> int:
    cfg = resolve_config(args, horizon_sets_N=True)
    try:
        lams = [float(s) for s in args.lambdas.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --lambdas {args.lambdas!r}") from exc
    if not lams or any(not 0 < v <= 1 for v in lams):
        raise ConfigError("lambda values must lie in (0, 1]")
    root = Path(cfg.out)
    cfgs = [apply_overrides(cfg, {"lambda": repr(v), "out": str(root / f"lambda_{v:g}")}) for v in lams]
    workers = min(len(cfgs), max(1, int(os.environ.get("SEIR_MPC_THREADS", os.cpu_count() or 1))))
    if workers == 1:
        results = [_sweep_worker(c) for c in cfgs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_sweep_worker, cfgs))
    rows = []
    failed = 0
    for r in results:
        if r["status"] == "ok":
            rows.append([r["lambda"], "ok"] + r["lifetimes"] + [r["max_I"], r["alpha_max"], r["iterations"]])
        else:
            failed += 1
            rows.append([r["lambda"], r["status"]] + [None] * (len(LIFETIME_THRESHOLDS) + 3))
        cells = " ".join(f"{v:8.2f}" for v in r.get("lifetimes", [])) or r["status"]
        print(f"lambda={r['lambda']:<5g} {cells}")
    write_csv(root / "lifetime_table.csv",
              ["lambda", "status"] + LIFETIME_COLUMNS + ["max_I", "alpha_max", "iterations"], rows)
    return EXIT_FAILED if failed else EXIT_OK


def cmd_ocp(args) -> int:
    cfg = resolve_config(args, horizon_sets_N=False)
    T = args.horizon if args.horizon is not None else cfg.T
    p = cfg.params()
    spec = OcpSpec(as_state(cfg.x0), T, p, cfg.h)
    sol = solve(spec)
    path = write_ocp_solution(Path(cfg.out) / "ocp_solution.csv", sol, cfg.h, p)
    print(f"status={sol.status} cost={sol.cost:.10e} kkt={sol.kkt_residual:.2e} "
          f"violation={sol.constraint_violation:.2e} iterations={sol.iterations}")
    print(f"wrote {path}")
    if sol.status == "infeasible":
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_certify(args) -> int:
    cfg = resolve_config(args, horizon_sets_N=False)
    p = cfg.params()
    checks = [c.strip() for item in args.check for c in item.split(",") if c.strip()]
    for c in checks:
        if c not in CHECKS:
            raise ConfigError(f"unknown check {c!r}; choose from {', '.join(CHECKS)}")
    n = args.samples
    T = args.horizon if args.horizon is not None else cfg.T
    reports = []
    for c in checks:
        if c == "xm-invariance":
            reports.append(certify.check_XM_invariance(p, n_samples=n or 1000, seed=cfg.seed, h=cfg.h))
            reports.append(certify.check_lie_boundary(p))
        elif c == "lie-boundary":
            reports.append(certify.check_lie_boundary(p))
        elif c == "uniform-bound":
            reports.append(certify.check_uniform_bound(p, n_samples=n or 200, seed=cfg.seed, h=cfg.h))
        elif c == "cost-controllability":
            reports.append(certify.cost_controllability(p, n_samples=n or 200, seed=cfg.seed, h=cfg.h))
        elif c == "a3":
            deltas = tuple(d for d in (0.25, 1.0, 5.0, 20.0) if d <= T)
            rep = certify.check_A3(p, T=T, deltas=deltas, n_samples=n or 200, seed=cfg.seed, h=cfg.h)
            print(f"Cbar = {rep.values['Cbar']:.6e}")
            reports.append(rep)
        elif c == "lyapunov":
            if not args.from_log:
                raise ConfigError("the lyapunov check needs --from-log")
            reports.append(certify.lyapunov_monitor(read_mpc_log(args.from_log)))
        elif c == "staged":
            reports.append(certify.check_staged(as_state(cfg.x0), p, h=cfg.h))
    out = Path(cfg.out)
    write_cert_reports(out / "cert_reports.csv", reports)
    text = cert_reports_text(reports)
    (out / "cert_reports.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAILED


COMMANDS = {
    "simulate": cmd_simulate,
    "mpc": cmd_mpc,
    "sweep-lambda": cmd_sweep_lambda,
    "ocp": cmd_ocp,
    "certify": cmd_certify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        where = f" at iteration {exc.iteration}" if exc.iteration is not None else ""
        print(f"infeasible{where}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DomainError, BudgetExceededError) as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
