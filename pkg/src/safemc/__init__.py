"""safemc: synthesis, simulation and verification of safe convergent Markov
chain policies for ON/OFF mode-switching agents."""

from .chain import (
    AcceptancePlan,
    AdjacencyMatrix,
    BudgetViolation,
    ChainError,
    ColumnStochasticMatrix,
    ColumnSumViolation,
    DeadState,
    DecisionPolicy,
    DimensionMismatch,
    EnvironmentModel,
    NegativeEntry,
    ProbVector,
    SingleActionPolicy,
    budget_ok,
    compose_multi,
    compose_single,
    extract_policy,
    normalize_policy,
    policy_to_plan,
    validate_stochastic,
)
from .program import ConicProgram, ProgramBuilder
from .simulate import (
    DensityHistory,
    EnsembleConfig,
    estimate_transition_matrix,
    propagate_analytic,
    run_ensemble,
    step_agent_general,
    step_agent_single,
)
from .solver import (
    SolveOptions,
    SolveStatus,
    Solution,
    SynthesisResult,
    ValidationFailure,
    recover_and_validate,
    solve,
)
from .synthesis import (
    Connectivity,
    DecayLMI,
    InfeasibleAtUpper,
    InfeasibleByStructure,
    Reversible,
    SafetySpec,
    SynthesisSpec,
    ZeroTargetEntry,
    build_program,
    line_search_lambda,
)
from .verify import (
    ConvergenceReport,
    SafetyReport,
    certificate_check,
    compare_mc_analytic,
    connectivity_check,
    contraction_check,
    safety_oracle,
)

__version__ = "0.1.0"
