"""Scenario construction, serialization, and the end-to-end pipeline.

A Scenario bundles a feeder, a prosumer population, the voltage band,
and market flags.  build_ieee13_scenario synthesizes a community on a
modified IEEE 13-node feeder (transformer, switch, and capacitor banks
omitted; impedances stretched so a desk-scale community operates
against the voltage band).  All synthetic content is drawn from one
seeded generator in a fixed order, so a (scale, seed) pair fully
determines the scenario.

run_pipeline wires the stages together: envelope allocation, welfare
clearing, equilibrium verification, and the voltage sweep.  Failures
carry the stage name.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .doe import allocate_doe
from .grid import (FeederTopology, assemble_constraints, build_sensitivities,
                   voltage_profile)
from .market import (solve_welfare, verify_competitive_equilibrium,
                     verify_nash)
from .prosumer import ProsumerSpec, Utility

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage


@dataclass
class Scenario:
    feeder: FeederTopology
    prosumers: list
    horizon: int
    delta_hours: float
    band: tuple
    epsilon: float
    seed: int
    reactive_trading: bool = True
    limit_trading: bool = True
    name: str = "scenario"

    def __post_init__(self):
        self.band = (float(self.band[0]), float(self.band[1]))
        if not 0 < self.band[0] < self.band[1]:
            raise ScenarioError("band must satisfy 0 < v_min < v_max")
        if self.horizon < 1 or self.delta_hours <= 0:
            raise ScenarioError("horizon and delta_hours must be positive")
        if len(self.prosumers) != self.feeder.n_prosumers:
            raise ScenarioError(
                f"{len(self.prosumers)} prosumers for "
                f"{self.feeder.n_prosumers} connection points")
        for i, spec in enumerate(self.prosumers):
            if spec.horizon != self.horizon:
                raise ScenarioError(
                    f"prosumers[{i}] horizon {spec.horizon} != "
                    f"{self.horizon}")

    @property
    def n_prosumers(self):
        return len(self.prosumers)


# ---------------------------------------------------------------------------
# modified IEEE 13-node feeder


# (from, to, length in feet, r and x in ohm per mile); the 633-634
# transformer and the 671-692 switch are replaced by short ties, and
# capacitor banks are dropped
_SEGMENTS = [
    ("650", "632", 2000, 0.3465, 1.0179),
    ("632", "633", 500, 0.7526, 1.1814),
    ("633", "634", 100, 0.7526, 1.1814),
    ("632", "645", 500, 1.3294, 1.3471),
    ("645", "646", 300, 1.3294, 1.3471),
    ("632", "671", 2000, 0.3465, 1.0179),
    ("671", "692", 100, 0.7982, 0.4463),
    ("692", "675", 500, 0.7982, 0.4463),
    ("671", "684", 300, 1.3238, 1.3569),
    ("684", "611", 300, 1.3292, 1.3475),
    ("684", "652", 800, 1.3425, 0.5124),
    ("671", "680", 1000, 0.3465, 1.0179),
]

# the head and the two trunk junctions carry no prosumers
_TRUNK = ("650", "632", "671")

# the laterals off 632 host the solar-heavy prosumers; the deepest
# laterals host the load-heavy ones, so their imports spread the band
# drop over several segments instead of concentrating it on the trunk
_GEN_NODES = ("633", "634", "645", "646")
_HEAVY_NODES = ("652",)

# impedance stretch per segment: at nominal values the band only
# matters for megawatt-scale communities, so the shipped feeder is a
# resistance-dominated low-voltage variant that reaches it at desk
# scale; reactance is stretched less to keep the linearization honest
_R_SCALE = 60.0
_X_SCALE = 12.0

# utility weights, cents per (kW)^2 resp. (kWh)^2
_THETA = (1.0e-8, 1.0e-8, 1.0e-8, 4.0e-8)

_ETA = 0.9          # charge/discharge efficiency
_DELTA_H = 0.5      # step length, hours
_STEPS = 48         # 24-hour horizon
_RATE_KW = 6.6      # level-2 charger limit per prosumer
_QCAP_KVAR = 0.33   # inverter reactive limit per prosumer


def ieee13_topology(r_scale=None, x_scale=None):
    """Single-phase modified 13-node feeder; prosumer-free trunk."""
    r_scale = _R_SCALE if r_scale is None else r_scale
    x_scale = _X_SCALE if x_scale is None else x_scale
    nodes = ["650"] + sorted({s[1] for s in _SEGMENTS})
    lines = [(a, b, r * ft / 5280.0 * r_scale,
              x * ft / 5280.0 * x_scale)
             for a, b, ft, r, x in _SEGMENTS]
    bearing = [n for n in nodes if n not in _TRUNK]
    return nodes, lines, bearing


def _solar_shape(hours):
    s = np.sin(np.pi * (hours - 6.0) / 12.0)
    return np.where((hours >= 6.0) & (hours <= 18.0), np.maximum(s, 0.0), 0.0)


def _load_shape(hours, base, morning, evening):
    g = lambda mu, sig: np.exp(-0.5 * ((hours - mu) / sig) ** 2)
    return base + morning * g(8.0, 1.5) + evening * g(19.0, 2.0)


def build_ieee13_scenario(scale=(3, 1), seed=0, name=None):
    """Seeded synthetic community on the modified 13-node feeder.

    scale = (aggregators per prosumer-bearing node, prosumers per
    aggregator).  Each aggregator pools its prosumers' EVs (state
    channel 0) and home batteries (channel 1).  Nodes fall into three
    classes (solar-rich, mid, storage-heavy); capacity, initial
    charge, solar, and load parameters are drawn per class, with
    capacities within [0, 75] kWh per prosumer and charge kept between
    20% and 85% of capacity.  Net supply is a half-sine solar bump
    minus a two-peak load shape, scaled by 2.  EVs are away between a
    morning departure and an evening arrival, during which their input
    channel is pinned to 0.
    """
    apn, ppa = int(scale[0]), int(scale[1])
    if apn < 1 or ppa < 1:
        raise ScenarioError("scale entries must be >= 1")
    rng = np.random.default_rng(int(seed))

    nodes, lines, bearing = ieee13_topology()
    T, dt = _STEPS, _DELTA_H
    hours = np.arange(T) * dt

    # per-class draw ranges: storage capacity, initial-charge fraction,
    # solar amplitude, and the base/morning/evening load weights.
    # Solar-rich prosumers carry small storage so their surplus must be
    # exported; mid prosumers start nearly full so they add little to
    # shared-path loading; the heavy class concentrates empty storage
    # on the deepest laterals so the voltage band limits its imports.
    params = {
        "gen": ((0.0, 30.0), (0.2, 0.5), (6.0, 10.0),
                (0.1, 0.3), (0.2, 0.5), (0.3, 0.8)),
        "mid": ((10.0, 25.0), (0.55, 0.8), (0.5, 2.0),
                (0.3, 0.6), (0.4, 0.9), (0.8, 1.6)),
        "heavy": ((45.0, 75.0), (0.2, 0.5), (0.5, 1.5),
                  (0.4, 0.8), (0.6, 1.2), (1.5, 2.8)),
    }

    prosumer_nodes = []
    specs = []
    for node in bearing:
        if node in _GEN_NODES:
            cls = "gen"
        elif node in _HEAVY_NODES:
            cls = "heavy"
        else:
            cls = "mid"
        cap_rng, x0_rng, sol_rng, base_rng, morn_rng, eve_rng = params[cls]
        for k in range(apn):
            cap_ev = rng.uniform(*cap_rng, ppa)
            cap_batt = rng.uniform(*cap_rng, ppa)
            x0_ev = float(rng.uniform(*x0_rng, ppa) @ cap_ev)
            x0_batt = float(rng.uniform(*x0_rng, ppa) @ cap_batt)
            solar_amp = rng.uniform(*sol_rng, ppa).sum()
            load_base = rng.uniform(*base_rng, ppa).sum()
            load_morning = rng.uniform(*morn_rng, ppa).sum()
            load_evening = rng.uniform(*eve_rng, ppa).sum()
            depart = rng.uniform(7.0, 9.0)
            arrive = rng.uniform(16.0, 19.0)

            C = np.array([cap_ev.sum(), cap_batt.sum()])
            a = 2.0 * (solar_amp * _solar_shape(hours)
                       - _load_shape(hours, load_base, load_morning,
                                     load_evening))
            rate = _RATE_KW * ppa
            u_lower = np.full((T, 2), -rate)
            u_upper = np.full((T, 2), rate)
            away = (hours >= depart) & (hours < arrive)
            u_lower[away, 0] = 0.0
            u_upper[away, 0] = 0.0

            th1, th2, th3, th4 = _THETA
            specs.append(ProsumerSpec(
                A=np.eye(2), B=_ETA * dt * np.eye(2),
                x0=[x0_ev, x0_batt],
                x_lower=0.2 * C, x_upper=0.85 * C,
                u_lower=u_lower, u_upper=u_upper,
                p_lower=-40.0 * ppa, p_upper=40.0 * ppa,
                q_lower=-_QCAP_KVAR * ppa, q_upper=_QCAP_KVAR * ppa,
                a=a, h_coeffs=[1.0, 1.0],
                utility=Utility(
                    Q_u=th1 * np.eye(2),
                    Q_x=np.diag([th2, th3]),
                    x_target=0.85 * C,
                    Q_terminal=th4 * np.eye(2),
                    terminal_target=0.85 * C),
                name=f"agg-{node}-{k}"))
            prosumer_nodes.append(node)

    feeder = FeederTopology(
        nodes=nodes, head="650", lines=lines,
        base_voltage_kv=4.16, base_power_kva=100.0,
        prosumer_nodes=prosumer_nodes)
    return Scenario(
        feeder=feeder, prosumers=specs, horizon=T, delta_hours=dt,
        band=(0.95, 1.05), epsilon=1e-3, seed=int(seed),
        name=name or f"ieee13-{apn}x{ppa}-seed{seed}")


def scenario_constraints(s):
    """(sensitivities, constraint set) for a scenario's feeder and band."""
    sens = build_sensitivities(s.feeder)
    cs = assemble_constraints(sens, s.band[0], s.band[1], s.horizon)
    return sens, cs


# ---------------------------------------------------------------------------
# JSON round-trip


def _constant_rows(arr):
    return all(np.array_equal(arr[t], arr[0]) for t in range(1, len(arr)))


def _spec_to_dict(spec):
    ut = spec.utility
    q_x = ut.Q_x[0].tolist() if _constant_rows(ut.Q_x) else ut.Q_x.tolist()
    x_tgt = (ut.x_target[0].tolist() if _constant_rows(ut.x_target)
             else ut.x_target.tolist())
    u_lo = (spec.u_lower[0].tolist() if _constant_rows(spec.u_lower)
            else spec.u_lower.tolist())
    u_hi = (spec.u_upper[0].tolist() if _constant_rows(spec.u_upper)
            else spec.u_upper.tolist())
    return {
        "name": spec.name,
        "A": spec.A.tolist(), "B": spec.B.tolist(),
        "x0": spec.x0.tolist(),
        "x_lower": spec.x_lower.tolist(), "x_upper": spec.x_upper.tolist(),
        "u_lower": u_lo, "u_upper": u_hi,
        "p_lower": spec.p_lower, "p_upper": spec.p_upper,
        "q_lower": spec.q_lower, "q_upper": spec.q_upper,
        "a": spec.a.tolist(), "h_coeffs": spec.h_coeffs.tolist(),
        "utility": {
            "Q_u": ut.Q_u.tolist(), "Q_x": q_x, "x_target": x_tgt,
            "Q_terminal": ut.Q_terminal.tolist(),
            "terminal_target": ut.terminal_target.tolist()},
    }


def scenario_to_dict(s):
    return {
        "version": SCHEMA_VERSION,
        "name": s.name,
        "seed": s.seed,
        "horizon": s.horizon,
        "delta_hours": s.delta_hours,
        "band": [s.band[0], s.band[1]],
        "epsilon": s.epsilon,
        "flags": {"reactive_trading": s.reactive_trading,
                  "limit_trading": s.limit_trading},
        "feeder": {
            "nodes": list(s.feeder.nodes),
            "head": s.feeder.head,
            "base_voltage_kv": s.feeder.base_voltage_kv,
            "base_power_kva": s.feeder.base_power_kva,
            "v0": s.feeder.v0,
            "lines": [{"from": ln.node_from, "to": ln.node_to,
                       "r_ohm": ln.resistance_ohm, "x_ohm": ln.reactance_ohm}
                      for ln in s.feeder.lines],
            "prosumer_nodes": list(s.feeder.prosumer_nodes)},
        "prosumers": [_spec_to_dict(p) for p in s.prosumers],
    }


def save_scenario(s, path):
    """Write a scenario as deterministic JSON (same scenario, same bytes)."""
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(s), fh, allow_nan=False,
                  separators=(",", ":"))
        fh.write("\n")


def _check_keys(obj, path, required, optional=()):
    if not isinstance(obj, dict):
        raise ScenarioError(f"{path}: expected an object")
    for key in required:
        if key not in obj:
            raise ScenarioError(f"{path}.{key}: missing required field")
    extras = sorted(set(obj) - set(required) - set(optional))
    if extras:
        raise ScenarioError(f"{path}.{extras[0]}: unknown field")


def _number(obj, path):
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise ScenarioError(f"{path}: expected a number")
    return float(obj)


def _array(obj, path):
    try:
        arr = np.asarray(obj, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(f"{path}: expected a numeric array") from None
    if arr.dtype != float or not np.isfinite(arr).all():
        raise ScenarioError(f"{path}: expected a finite numeric array")
    return arr


def _string(obj, path):
    if not isinstance(obj, str):
        raise ScenarioError(f"{path}: expected a string")
    return obj


def _boolean(obj, path):
    if not isinstance(obj, bool):
        raise ScenarioError(f"{path}: expected a boolean")
    return obj


def _spec_from_dict(d, path):
    _check_keys(d, path,
                ["name", "A", "B", "x0", "x_lower", "x_upper", "u_lower",
                 "u_upper", "p_lower", "p_upper", "q_lower", "q_upper",
                 "a", "h_coeffs", "utility"])
    ut = d["utility"]
    _check_keys(ut, f"{path}.utility",
                ["Q_u", "Q_x", "x_target", "Q_terminal", "terminal_target"])
    try:
        return ProsumerSpec(
            A=_array(d["A"], f"{path}.A"),
            B=_array(d["B"], f"{path}.B"),
            x0=_array(d["x0"], f"{path}.x0"),
            x_lower=_array(d["x_lower"], f"{path}.x_lower"),
            x_upper=_array(d["x_upper"], f"{path}.x_upper"),
            u_lower=_array(d["u_lower"], f"{path}.u_lower"),
            u_upper=_array(d["u_upper"], f"{path}.u_upper"),
            p_lower=_number(d["p_lower"], f"{path}.p_lower"),
            p_upper=_number(d["p_upper"], f"{path}.p_upper"),
            q_lower=_number(d["q_lower"], f"{path}.q_lower"),
            q_upper=_number(d["q_upper"], f"{path}.q_upper"),
            a=_array(d["a"], f"{path}.a"),
            h_coeffs=_array(d["h_coeffs"], f"{path}.h_coeffs"),
            utility=Utility(
                Q_u=_array(ut["Q_u"], f"{path}.utility.Q_u"),
                Q_x=_array(ut["Q_x"], f"{path}.utility.Q_x"),
                x_target=_array(ut["x_target"], f"{path}.utility.x_target"),
                Q_terminal=_array(ut["Q_terminal"],
                                  f"{path}.utility.Q_terminal"),
                terminal_target=_array(ut["terminal_target"],
                                       f"{path}.utility.terminal_target")),
            name=_string(d["name"], f"{path}.name"))
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc


def scenario_from_dict(d):
    _check_keys(d, "scenario",
                ["version", "name", "seed", "horizon", "delta_hours",
                 "band", "epsilon", "flags", "feeder", "prosumers"])
    if d["version"] != SCHEMA_VERSION:
        raise ScenarioError(
            f"scenario.version: expected {SCHEMA_VERSION}, got {d['version']}")
    flags = d["flags"]
    _check_keys(flags, "scenario.flags", ["reactive_trading", "limit_trading"])
    fd = d["feeder"]
    _check_keys(fd, "scenario.feeder",
                ["nodes", "head", "base_voltage_kv", "base_power_kva", "v0",
                 "lines", "prosumer_nodes"])
    if not isinstance(fd["lines"], list):
        raise ScenarioError("scenario.feeder.lines: expected an array")
    lines = []
    for k, ln in enumerate(fd["lines"]):
        lp = f"scenario.feeder.lines[{k}]"
        _check_keys(ln, lp, ["from", "to", "r_ohm", "x_ohm"])
        lines.append((_string(ln["from"], f"{lp}.from"),
                      _string(ln["to"], f"{lp}.to"),
                      _number(ln["r_ohm"], f"{lp}.r_ohm"),
                      _number(ln["x_ohm"], f"{lp}.x_ohm")))
    if not isinstance(fd["nodes"], list) \
            or not isinstance(fd["prosumer_nodes"], list):
        raise ScenarioError("scenario.feeder.nodes: expected arrays of labels")
    band = d["band"]
    if not isinstance(band, list) or len(band) != 2:
        raise ScenarioError("scenario.band: expected [v_min, v_max]")
    if not isinstance(d["prosumers"], list):
        raise ScenarioError("scenario.prosumers: expected an array")
    try:
        feeder = FeederTopology(
            nodes=[_string(n, "scenario.feeder.nodes[]") for n in fd["nodes"]],
            head=_string(fd["head"], "scenario.feeder.head"),
            lines=lines,
            base_voltage_kv=_number(fd["base_voltage_kv"],
                                    "scenario.feeder.base_voltage_kv"),
            base_power_kva=_number(fd["base_power_kva"],
                                   "scenario.feeder.base_power_kva"),
            prosumer_nodes=[_string(n, "scenario.feeder.prosumer_nodes[]")
                            for n in fd["prosumer_nodes"]],
            v0=_number(fd["v0"], "scenario.feeder.v0"))
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(f"scenario.feeder: {exc}") from exc
    prosumers = [_spec_from_dict(p, f"scenario.prosumers[{i}]")
                 for i, p in enumerate(d["prosumers"])]
    if not isinstance(d["horizon"], int) or isinstance(d["horizon"], bool):
        raise ScenarioError("scenario.horizon: expected an integer")
    if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
        raise ScenarioError("scenario.seed: expected an integer")
    return Scenario(
        feeder=feeder, prosumers=prosumers,
        horizon=d["horizon"],
        delta_hours=_number(d["delta_hours"], "scenario.delta_hours"),
        band=(_number(band[0], "scenario.band[0]"),
              _number(band[1], "scenario.band[1]")),
        epsilon=_number(d["epsilon"], "scenario.epsilon"),
        seed=d["seed"],
        reactive_trading=_boolean(flags["reactive_trading"],
                                  "scenario.flags.reactive_trading"),
        limit_trading=_boolean(flags["limit_trading"],
                               "scenario.flags.limit_trading"),
        name=_string(d["name"], "scenario.name"))


def load_scenario(path):
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc
    return scenario_from_dict(d)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class RunReport:
    scenario_name: str
    welfare: float
    prices: object
    voltages: np.ndarray        # (n_nodes, T) pu
    allocation: object
    equilibrium: object
    nash: object
    solution: object
    timing: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(self.equilibrium.passed and self.nash.passed)


def run_pipeline(s, cfg=None, tol=1e-5):
    """allocate -> clear -> verify -> voltage sweep, with stage labels."""
    timing = {}

    def stage(label, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except Exception as exc:
            raise StageFailure(label, exc) from exc
        timing[label] = time.perf_counter() - t0
        return out

    sens, cs = stage("constraints", lambda: scenario_constraints(s))
    alloc = stage("doe", lambda: allocate_doe(cs, s.prosumers, s.epsilon,
                                              cfg=cfg))
    ws = stage("clearing", lambda: solve_welfare(
        s.prosumers, cs, alloc, cfg=cfg,
        include_q=s.reactive_trading, include_l=s.limit_trading))
    eq = stage("equilibrium", lambda: verify_competitive_equilibrium(
        ws, s.prosumers, cs, alloc, tol=tol, cfg=cfg))
    nash = stage("nash", lambda: verify_nash(
        ws, s.prosumers, cs, alloc, tol=tol, cfg=cfg))

    def sweep():
        V = np.empty((len(sens.nodes), s.horizon))
        for t in range(s.horizon):
            p = np.array([d.P[t] for d in ws.decisions])
            q = np.array([d.Q[t] for d in ws.decisions])
            V[:, t] = voltage_profile(sens, p, q)
        return V

    voltages = stage("voltages", sweep)
    return RunReport(
        scenario_name=s.name, welfare=ws.welfare, prices=ws.prices,
        voltages=voltages, allocation=alloc, equilibrium=eq, nash=nash,
        solution=ws, timing=timing)
