"""Command-line driver.

Subcommands wire the pipeline stages to files: gen (seeded scenario ->
JSON), doe (envelope allocation -> CSV), clear (full pipeline ->
verdict), verify (recheck a dispatch CSV against the scenario's
constraints), decentralized (price-iteration clearing), bench (welfare
with vs. without reactive trading), report (prices/dispatch/voltages/
doe CSVs plus report.json).  Exit codes: 0 pass, 1 verification
failure, 2 usage or data error.

CSV cells are written with repr(float), so identical runs produce
byte-identical files.  Prices are converted to per-energy units
(cents/kWh, cents/kVarh); envelope prices stay in cents per unit of
squared-voltage headroom (pu^2) per step.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import __version__
from .doe import allocate_doe, export_allocation_csv
from .grid import voltage_profile
from .market import NonConvergence, clear_decentralized, compare_scenarios
from .prosumer import evaluate_payoff, simulate_dynamics
from .scenario import (
    ScenarioError,
    StageFailure,
    build_ieee13_scenario,
    load_scenario,
    run_pipeline,
    save_scenario,
    scenario_constraints,
)


def _fmt(x):
    return repr(float(x))


def _parse_scale(text):
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValueError(
            f"scale must look like 3x1 (aggregators x prosumers), got {text!r}")
    try:
        apn, ppa = int(parts[0]), int(parts[1])
    except ValueError:
        raise ValueError(
            f"scale must look like 3x1 (aggregators x prosumers), got {text!r}"
        ) from None
    return apn, ppa


# ---------------------------------------------------------------------------
# artifact writers


def _row_columns(cs, prefix):
    return [f"{prefix}:{node}:{kind}" for node, kind in cs.labels]


def write_prices_csv(path, s, ws, cs):
    dt = s.delta_hours
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "lambda_c_per_kwh", "gamma_c_per_kvarh",
                    *_row_columns(cs, "beta")])
        for t in range(s.horizon):
            row = [t, _fmt(ws.prices.lam[t] / dt),
                   _fmt(ws.prices.gamma[t] / dt)]
            row += [_fmt(ws.prices.beta[r, t]) for r in range(cs.n_rows)]
            w.writerow(row)


def write_dispatch_csv(path, s, ws, cs):
    m_max = max(spec.n_inputs for spec in s.prosumers)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prosumer", "t", "p_kw", "q_kvar",
                    *[f"u{k}_kw" for k in range(m_max)],
                    *_row_columns(cs, "l")])
        for i, spec in enumerate(s.prosumers):
            d = ws.decisions[i]
            for t in range(s.horizon):
                row = [spec.name, t, _fmt(d.P[t]), _fmt(d.Q[t])]
                row += [_fmt(d.U[k, t]) if k < spec.n_inputs else ""
                        for k in range(m_max)]
                row += [_fmt(d.L[r, t]) for r in range(cs.n_rows)]
                w.writerow(row)


def write_voltages_csv(path, s, sens, voltages):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "t", "v_pu"])
        for j, node in enumerate(sens.nodes):
            for t in range(s.horizon):
                w.writerow([node, t, _fmt(voltages[j, t])])


def _income_sum(ws):
    total = 0.0
    for d in ws.decisions:
        total += float(ws.prices.lam @ d.P)
        total += float(ws.prices.gamma @ d.Q)
        if d.L.size:
            total += float(np.sum(ws.prices.beta * d.L))
    return total


def write_report_json(path, s, rep):
    eq, nash = rep.equilibrium, rep.nash
    payload = {
        "version": __version__,
        "scenario": s.name,
        "seed": s.seed,
        "flags": {"reactive_trading": s.reactive_trading,
                  "limit_trading": s.limit_trading},
        "welfare_cents": rep.welfare,
        "equilibrium": {
            "passed": eq.passed,
            "max_payoff_gap": float(np.max(np.abs(eq.payoff_gaps))),
            "max_balance_residual": eq.max_balance_residual,
        },
        "nash": {
            "passed": nash.passed,
            "max_payoff_gap": float(np.max(np.abs(nash.payoff_gaps))),
            "unbounded_directions": [
                [kind, list(key)] for kind, key in nash.unbounded_directions],
        },
        "trading_income_sum_cents": _income_sum(rep.solution),
        "voltage_min_pu": float(rep.voltages.min()),
        "voltage_max_pu": float(rep.voltages.max()),
        "timing_seconds": {k: round(v, 3) for k, v in rep.timing.items()},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_artifacts(outdir, s, rep, sens, cs):
    import os
    os.makedirs(outdir, exist_ok=True)
    write_prices_csv(os.path.join(outdir, "prices.csv"), s, rep.solution, cs)
    write_dispatch_csv(os.path.join(outdir, "dispatch.csv"), s, rep.solution,
                       cs)
    write_voltages_csv(os.path.join(outdir, "voltages.csv"), s, sens,
                       rep.voltages)
    export_allocation_csv(rep.allocation, cs, os.path.join(outdir, "doe.csv"))
    write_report_json(os.path.join(outdir, "report.json"), s, rep)


# ---------------------------------------------------------------------------
# dispatch verification


def _read_dispatch(path, s, cs):
    """dispatch.csv -> {name: (P, Q, U, L)} in the scenario's shapes."""
    by_name = {spec.name: spec for spec in s.prosumers}
    T, M = s.horizon, cs.n_rows
    out = {name: (np.zeros(T), np.zeros(T),
                  np.zeros((spec.n_inputs, T)), np.zeros((M, T)))
           for name, spec in by_name.items()}
    seen = {name: np.zeros(T, dtype=bool) for name in by_name}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:4] != ["prosumer", "t", "p_kw",
                                            "q_kvar"]:
            raise ScenarioError(f"{path}: not a dispatch CSV")
        m_max = sum(1 for col in header if col.startswith("u"))
        l_cols = len(header) - 4 - m_max
        if l_cols != M:
            raise ScenarioError(
                f"{path}: {l_cols} envelope columns, scenario has {M} rows")
        for row in reader:
            name = row[0]
            if name not in by_name:
                raise ScenarioError(f"{path}: unknown prosumer {name!r}")
            t = int(row[1])
            if not 0 <= t < T:
                raise ScenarioError(f"{path}: step {t} outside horizon")
            P, Q, U, L = out[name]
            P[t] = float(row[2])
            Q[t] = float(row[3])
            m = by_name[name].n_inputs
            for k in range(m):
                U[k, t] = float(row[4 + k])
            for r in range(M):
                L[r, t] = float(row[4 + m_max + r])
            seen[name][t] = True
    missing = [n for n, mask in seen.items() if not mask.all()]
    if missing:
        raise ScenarioError(f"{path}: incomplete rows for {missing[0]!r}")
    return out


def verify_dispatch(s, dispatch, tol=1e-5):
    """Recheck a dispatch table against every scenario constraint.

    Returns a list of (check, ok, detail) triples covering prosumer
    dynamics and bounds, supply caps, trade balances, envelope
    membership (post-trade when limit trading is on), the voltage band,
    and exact-zero q/l when the matching market is disabled.
    """
    sens, cs = scenario_constraints(s)
    alloc = allocate_doe(cs, s.prosumers, s.epsilon)
    results = []

    def check(label, worst, limit):
        results.append((label, bool(worst <= limit),
                        f"worst {worst:.3g} vs {limit:.3g}"))

    worst_dyn = 0.0
    worst_box = 0.0
    worst_cap = 0.0
    worst_env = 0.0
    for i, spec in enumerate(s.prosumers):
        P, Q, U, L = dispatch[spec.name]
        X = simulate_dynamics(spec, U)
        worst_dyn = max(worst_dyn, float(np.max(spec.x_lower[None, :] - X.T)),
                        float(np.max(X.T - spec.x_upper[None, :])))
        worst_box = max(
            worst_box,
            float(np.max(spec.u_lower - U.T)),
            float(np.max(U.T - spec.u_upper)),
            float(np.max(spec.p_lower - P)), float(np.max(P - spec.p_upper)),
            float(np.max(spec.q_lower - Q)), float(np.max(Q - spec.q_upper)))
        worst_cap = max(worst_cap,
                        float(np.max(P + spec.h_coeffs @ U - spec.a)))
        for t in range(s.horizon):
            g = cs.coeff[i, :, 0] * P[t] + cs.coeff[i, :, 1] * Q[t]
            room = (alloc.w[i, :, t] + L[:, t] if s.limit_trading
                    else alloc.w[i, :, t])
            worst_env = max(worst_env, float(np.max(g - room)))
    check("state and input dynamics within bounds", worst_dyn, tol)
    check("trade boxes respected", worst_box, tol)
    check("supply caps respected", worst_cap, tol)
    check("envelope membership", worst_env, tol)

    P_all = np.vstack([dispatch[sp.name][0] for sp in s.prosumers])
    Q_all = np.vstack([dispatch[sp.name][1] for sp in s.prosumers])
    L_all = np.stack([dispatch[sp.name][3] for sp in s.prosumers])
    check("active-power balance", float(np.max(np.abs(P_all.sum(0)))), tol)
    if s.reactive_trading:
        check("reactive-power balance", float(np.max(np.abs(Q_all.sum(0)))),
              tol)
    else:
        check("q pinned to zero", float(np.max(np.abs(Q_all))), 0.0)
    if s.limit_trading:
        check("headroom-trade balance", float(np.max(np.abs(L_all.sum(0)))),
              tol)
    else:
        check("l pinned to zero", float(np.max(np.abs(L_all))), 0.0)

    worst_band = 0.0
    for t in range(s.horizon):
        v = voltage_profile(sens, P_all[:, t], Q_all[:, t])
        worst_band = max(worst_band, float(np.max(s.band[0] - v)),
                         float(np.max(v - s.band[1])))
    check("voltage band", worst_band, tol)
    return results


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args):
    apn, ppa = _parse_scale(args.scale)
    s = build_ieee13_scenario(scale=(apn, ppa), seed=args.seed,
                              name=args.name)
    save_scenario(s, args.out)
    print(f"wrote {args.out}: {s.name}, {len(s.prosumers)} prosumers, "
          f"T={s.horizon}")
    return 0


def _cmd_doe(args):
    s = load_scenario(args.scenario)
    _, cs = scenario_constraints(s)
    alloc = allocate_doe(cs, s.prosumers, s.epsilon)
    cover = float(np.max(np.abs(alloc.w.sum(axis=0) - cs.nu.T)))
    export_allocation_csv(alloc, cs, args.out)
    print(f"wrote {args.out}: {cs.n_rows} rows x {s.horizon} steps, "
          f"cover residual {cover:.3g}")
    return 0


def _cmd_clear(args):
    s = load_scenario(args.scenario)
    rep = run_pipeline(s, tol=args.tol)
    eq, nash = rep.equilibrium, rep.nash
    print(f"welfare {rep.welfare:.9g} cents")
    print(f"equilibrium {'PASS' if eq.passed else 'FAIL'} "
          f"(max payoff gap {float(np.max(np.abs(eq.payoff_gaps))):.3g}, "
          f"balance residual {eq.max_balance_residual:.3g})")
    print(f"nash {'PASS' if nash.passed else 'FAIL'} "
          f"(max payoff gap {float(np.max(np.abs(nash.payoff_gaps))):.3g}, "
          f"{len(nash.unbounded_directions)} unbounded directions)")
    print(f"voltages [{rep.voltages.min():.4f}, {rep.voltages.max():.4f}] pu")
    if args.out:
        sens, cs = scenario_constraints(s)
        _write_artifacts(args.out, s, rep, sens, cs)
        print(f"artifacts in {args.out}/")
    return 0 if rep.passed else 1


def _cmd_verify(args):
    s = load_scenario(args.scenario)
    _, cs = scenario_constraints(s)
    dispatch = _read_dispatch(args.dispatch, s, cs)
    results = verify_dispatch(s, dispatch, tol=args.tol)
    ok = True
    for label, passed, detail in results:
        print(f"{'OK  ' if passed else 'FAIL'} {label} ({detail})")
        ok = ok and passed
    return 0 if ok else 1


def _cmd_decentralized(args):
    s = load_scenario(args.scenario)
    _, cs = scenario_constraints(s)
    alloc = allocate_doe(cs, s.prosumers, s.epsilon)
    try:
        prices, decisions, trace = clear_decentralized(
            s.prosumers, cs, alloc, step_p=args.step,
            max_iters=args.max_iters, residual_tol=args.tol,
            include_q=s.reactive_trading, include_l=s.limit_trading)
    except NonConvergence as exc:
        print(f"FAIL {exc}")
        return 1
    welfare = sum(evaluate_payoff(spec, d)
                  for spec, d in zip(s.prosumers, decisions))
    print(f"converged in {len(trace)} iterations, "
          f"residual {trace[-1]['residual']:.3g}")
    print(f"welfare {welfare:.9g} cents")
    return 0


def _cmd_bench(args):
    s = load_scenario(args.scenario)
    sens, cs = scenario_constraints(s)
    alloc = allocate_doe(cs, s.prosumers, s.epsilon)
    from .market import solve_welfare
    with_q = solve_welfare(s.prosumers, cs, alloc, include_q=True,
                           include_l=s.limit_trading)
    without_q = solve_welfare(s.prosumers, cs, alloc, include_q=False,
                              include_l=s.limit_trading)
    cmpr = compare_scenarios(with_q, without_q, sens=sens, band=s.band)
    print("scenario,welfare_q_on_cents,welfare_q_off_cents,"
          "delta_cents,delta_pct,boundary_steps_q_on,boundary_steps_q_off")
    print(",".join([
        s.name, _fmt(cmpr.welfare_with), _fmt(cmpr.welfare_without),
        _fmt(cmpr.delta), _fmt(cmpr.delta_pct),
        str(cmpr.boundary_steps_with), str(cmpr.boundary_steps_without)]))
    return 0 if cmpr.delta >= -1e-9 else 1


def _cmd_report(args):
    s = load_scenario(args.scenario)
    rep = run_pipeline(s, tol=args.tol)
    sens, cs = scenario_constraints(s)
    _write_artifacts(args.out, s, rep, sens, cs)
    print(f"artifacts in {args.out}/: prices.csv dispatch.csv voltages.csv "
          f"doe.csv report.json")
    return 0 if rep.passed else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="doemarket",
        description="Envelope allocation and P2P market clearing for "
                    "islanded radial feeders.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="build a seeded synthetic scenario")
    p.add_argument("--scale", default="3x1",
                   help="aggregators-per-node x prosumers-per-aggregator")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("doe", help="allocate envelopes, write the CSV")
    p.add_argument("scenario")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_doe)

    p = sub.add_parser("clear", help="full pipeline, print the verdict")
    p.add_argument("scenario")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--out", default=None, help="artifact directory")
    p.set_defaults(fn=_cmd_clear)

    p = sub.add_parser("verify", help="recheck a dispatch CSV")
    p.add_argument("scenario")
    p.add_argument("dispatch")
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("decentralized", help="price-iteration clearing")
    p.add_argument("scenario")
    p.add_argument("--step", type=float, default=0.5)
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_decentralized)

    p = sub.add_parser("bench", help="welfare with vs. without q trading")
    p.add_argument("scenario")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("report", help="pipeline plus CSV/JSON artifacts")
    p.add_argument("scenario")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ScenarioError, StageFailure, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
