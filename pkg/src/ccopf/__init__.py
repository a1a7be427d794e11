"""Chance-constrained reactive set-point optimization for unbalanced feeders.

The package layers as: feeder descriptions and admittance assembly
(`feeder`), three-phase Newton power flow and unbalance metrics
(`powerflow`), household data and sampling (`scenario`), the deterministic
tightened OPF (`opf`), sample-based tightenings and Monte Carlo evaluation
(`chance`), the two iterative algorithms (`driver`), and the experiment
runner with reporting (`experiment`, `plots`, `cli`).
"""

__version__ = "0.1.0"

from .feeder import (
    AdmittanceMatrix,
    Branch,
    FeederError,
    FeederModel,
    InverterSpec,
    LoadSpec,
    Node,
    PhaseMask,
    assemble_admittance,
    load_feeder,
)
from .powerflow import (
    DegenerateSequence,
    NonConvergence,
    NotThreePhase,
    PowerFlowResult,
    SequenceVoltages,
    SingularJacobian,
    VoltageState,
    flat_start,
    mismatch,
    mismatch_jacobian,
    node_sequence,
    sequence_voltages,
    solve_pf,
    total_vuf,
    total_vuf_squared,
    vuf_objective,
    vuf_squared,
)
from .scenario import (
    DaySeries,
    InjectionMap,
    SamplePoint,
    ScenarioError,
    ScenarioSet,
    SynthProfile,
    build_injection_map,
    draw_full_days,
    draw_random,
    gamma_from_pf,
    injections_for,
    load_timeseries,
    save_timeseries,
    synthesize,
    take_days,
    validate_series,
)
from .opf import (
    Infeasible,
    OperatingPoint,
    SolverSettings,
    TighteningSet,
    nominal_q_limits,
    operating_point_at,
    solve_ccr_opf,
)
from .chance import (
    EmpiricalDistribution,
    EvaluationReport,
    evaluate,
    inverter_tightenings,
    quantile,
    voltage_quantile_tightenings,
)
from .driver import (
    IterationTrace,
    QuantileLoopConfig,
    TuningDegenerate,
    TuningLoopConfig,
    estimate_sigma,
    init_tuning_bounds,
    run_quantile_method,
    run_tuning_method,
)
from .experiment import (
    ConfigError,
    ExperimentConfig,
    RunReport,
    build_series,
    emit_timeseries,
    resolve_feeder_path,
    run_experiment,
    split_days,
    timeseries_tables,
)

__all__ = [
    "__version__",
    # feeder
    "AdmittanceMatrix", "Branch", "FeederError", "FeederModel",
    "InverterSpec", "LoadSpec", "Node", "PhaseMask",
    "assemble_admittance", "load_feeder",
    # powerflow
    "DegenerateSequence", "NonConvergence", "NotThreePhase",
    "PowerFlowResult", "SequenceVoltages", "SingularJacobian",
    "VoltageState", "flat_start", "mismatch", "mismatch_jacobian",
    "node_sequence", "sequence_voltages", "solve_pf", "total_vuf",
    "total_vuf_squared", "vuf_objective", "vuf_squared",
    # scenario
    "DaySeries", "InjectionMap", "SamplePoint", "ScenarioError",
    "ScenarioSet", "SynthProfile", "build_injection_map", "draw_full_days",
    "draw_random", "gamma_from_pf", "injections_for", "load_timeseries",
    "save_timeseries", "synthesize", "take_days", "validate_series",
    # opf
    "Infeasible", "OperatingPoint", "SolverSettings", "TighteningSet",
    "nominal_q_limits", "operating_point_at", "solve_ccr_opf",
    # chance
    "EmpiricalDistribution", "EvaluationReport", "evaluate",
    "inverter_tightenings", "quantile", "voltage_quantile_tightenings",
    # driver
    "IterationTrace", "QuantileLoopConfig", "TuningDegenerate",
    "TuningLoopConfig", "estimate_sigma", "init_tuning_bounds",
    "run_quantile_method", "run_tuning_method",
    # experiment
    "ConfigError", "ExperimentConfig", "RunReport", "build_series",
    "emit_timeseries", "resolve_feeder_path", "run_experiment",
    "split_days", "timeseries_tables",
]
