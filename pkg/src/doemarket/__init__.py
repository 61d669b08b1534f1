"""Market clearing for islanded radial feeders.

Allocates per-prosumer dynamic operating envelopes from network voltage
limits, clears peer-to-peer trades in active power, reactive power and
envelope headroom through a social-welfare QP, and reads the market
prices off that QP's constraint multipliers.
"""

from .doe import (
    AllocationFailure,
    DoeAllocation,
    allocate_doe,
    doe_contains,
    export_allocation_csv,
    headroom,
)
from .grid import (
    ConstraintSet,
    FeederTopology,
    Line,
    SensitivityMatrices,
    assemble_constraints,
    build_sensitivities,
    evaluate_g,
    voltage_profile,
)
from .market import (
    EquilibriumReport,
    MarketPrices,
    NonConvergence,
    ScenarioComparison,
    TradeDuals,
    WelfareSolution,
    clear_decentralized,
    compare_scenarios,
    price_player_objective,
    solve_welfare,
    verify_competitive_equilibrium,
    verify_nash,
)
from .prosumer import (
    InfeasibleProsumer,
    ProsumerSpec,
    TrajectoryDecision,
    Utility,
    best_response,
    check_feasible_point,
    evaluate_payoff,
    simulate_dynamics,
)
from .scenario import (
    SCHEMA_VERSION,
    RunReport,
    Scenario,
    ScenarioError,
    StageFailure,
    build_ieee13_scenario,
    ieee13_topology,
    load_scenario,
    run_pipeline,
    save_scenario,
    scenario_constraints,
    scenario_from_dict,
    scenario_to_dict,
)
from .solver import (
    KktReport,
    KktResiduals,
    PrimalDualSolution,
    QuadraticProgram,
    SolveStatus,
    SolverConfig,
    check_kkt,
    solve_qp,
)

__version__ = "0.1.0"

__all__ = [
    "AllocationFailure",
    "ConstraintSet",
    "DoeAllocation",
    "EquilibriumReport",
    "FeederTopology",
    "InfeasibleProsumer",
    "KktReport",
    "KktResiduals",
    "Line",
    "MarketPrices",
    "NonConvergence",
    "PrimalDualSolution",
    "ProsumerSpec",
    "QuadraticProgram",
    "RunReport",
    "SCHEMA_VERSION",
    "Scenario",
    "ScenarioComparison",
    "ScenarioError",
    "SensitivityMatrices",
    "SolveStatus",
    "SolverConfig",
    "StageFailure",
    "TradeDuals",
    "TrajectoryDecision",
    "Utility",
    "WelfareSolution",
    "allocate_doe",
    "assemble_constraints",
    "best_response",
    "build_ieee13_scenario",
    "build_sensitivities",
    "check_feasible_point",
    "check_kkt",
    "clear_decentralized",
    "compare_scenarios",
    "doe_contains",
    "evaluate_g",
    "evaluate_payoff",
    "export_allocation_csv",
    "headroom",
    "ieee13_topology",
    "load_scenario",
    "price_player_objective",
    "run_pipeline",
    "save_scenario",
    "scenario_constraints",
    "scenario_from_dict",
    "scenario_to_dict",
    "simulate_dynamics",
    "solve_qp",
    "solve_welfare",
    "verify_competitive_equilibrium",
    "verify_nash",
    "voltage_profile",
    "__version__",
]
