"""Adapter between the conic-program IR and a numerical conic solver, plus
solution recovery with full constraint-residual validation.

The bridge is deliberately narrow: submit variable blocks and constraints,
read back a status and block values.  Everything downstream works from the
recovered arrays, so swapping the backend cannot change the semantics.
"""

import time
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import cvxpy as cp
import numpy as np

from . import verify
from .chain import (
    AcceptancePlan,
    ColumnStochasticMatrix,
    DeadState,
    DecisionPolicy,
    compose_multi,
    extract_policy,
    normalize_policy,
)
from .program import ConicProgram
from .synthesis import (
    PSD_FLOOR,
    Connectivity,
    DecayLMI,
    Reversible,
    SynthesisSpec,
    _l_expr,
    connectivity_floor_mask,
    permitted_mask,
)
from .program import AffineExpr


class SolveStatus(Enum):
    OPTIMAL = "optimal"
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"


_STATUS_MAP = {
    cp.OPTIMAL: SolveStatus.OPTIMAL,
    cp.OPTIMAL_INACCURATE: SolveStatus.FEASIBLE,
    cp.INFEASIBLE: SolveStatus.INFEASIBLE,
    cp.INFEASIBLE_INACCURATE: SolveStatus.INFEASIBLE,
    cp.UNBOUNDED: SolveStatus.UNBOUNDED,
    cp.UNBOUNDED_INACCURATE: SolveStatus.UNBOUNDED,
}


class SolverFailure(RuntimeError):
    pass


class ValidationFailure(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        lines = ", ".join(f"{c.name} (residual {c.residual:.3e})" for c in self.violations)
        super().__init__(f"solution violates: {lines}")


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-8
    max_iter: Optional[int] = None
    time_limit: Optional[float] = None
    solver: str = "CLARABEL"


@dataclass(frozen=True)
class SolverStats:
    solver: str
    iterations: Optional[int]
    solve_time: Optional[float]

    def to_json_dict(self) -> dict:
        return {
            "solver": self.solver,
            "iterations": self.iterations,
            "solve_time": self.solve_time,
        }


@dataclass(frozen=True, eq=False)
class Solution:
    status: SolveStatus
    values: Optional[dict]
    objective_value: Optional[float]
    stats: SolverStats
    diagnostics: str = ""

    @property
    def is_feasible(self) -> bool:
        return self.status in (SolveStatus.OPTIMAL, SolveStatus.FEASIBLE)


def _to_cvxpy(expr: AffineExpr, variables: dict):
    out = cp.Constant(expr.const)
    for name, tensor in expr.terms.items():
        r, s, p, q = tensor.shape
        flat = tensor.reshape(r * s, p * q) @ cp.vec(variables[name], order="C")
        out = out + cp.reshape(flat, (r, s), order="C")
    return out


def _solver_kwargs(options: SolveOptions) -> dict:
    if options.solver == "CLARABEL":
        kwargs = {
            "tol_gap_abs": options.tol,
            "tol_gap_rel": options.tol,
            "tol_feas": options.tol,
        }
        if options.max_iter is not None:
            kwargs["max_iter"] = options.max_iter
        if options.time_limit is not None:
            kwargs["time_limit"] = options.time_limit
        return kwargs
    if options.solver == "SCS":
        kwargs = {"eps": options.tol}
        if options.max_iter is not None:
            kwargs["max_iters"] = options.max_iter
        return kwargs
    return {}


def solve(program: ConicProgram, options: Optional[SolveOptions] = None) -> Solution:
    """Submit a program to the backing conic solver.

    The status is mapped faithfully from the solver's termination reason and
    block values are returned keyed by block name (only for usable
    statuses).  Solver exceptions surface as a numerical-failure status with
    the diagnostic text attached.
    """
    options = options or SolveOptions()
    variables = {}
    for block in program.blocks:
        if block.symmetric:
            variables[block.name] = cp.Variable(block.shape, name=block.name, symmetric=True)
        else:
            variables[block.name] = cp.Variable(block.shape, name=block.name)
    constraints = []
    for c in program.constraints:
        expr = _to_cvxpy(c.expr, variables)
        if c.kind == "eq":
            constraints.append(expr == 0)
        elif c.kind == "ineq":
            constraints.append(expr >= 0)
        else:
            constraints.append((expr + expr.T) * 0.5 >> 0)
    objective = cp.Minimize(cp.sum(_to_cvxpy(program.objective, variables)))
    problem = cp.Problem(objective, constraints)

    started = time.perf_counter()
    try:
        with warnings.catch_warnings():
            # Status is reported faithfully below; cvxpy's accuracy warning
            # would only add noise on boundary solves.
            warnings.simplefilter("ignore", UserWarning)
            problem.solve(solver=options.solver, **_solver_kwargs(options))
    except cp.SolverError as err:
        stats = SolverStats(options.solver, None, time.perf_counter() - started)
        return Solution(SolveStatus.NUMERICAL_FAILURE, None, None, stats, str(err))

    status = _STATUS_MAP.get(problem.status, SolveStatus.NUMERICAL_FAILURE)
    raw_stats = problem.solver_stats
    stats = SolverStats(
        options.solver,
        getattr(raw_stats, "num_iters", None),
        getattr(raw_stats, "solve_time", None) or (time.perf_counter() - started),
    )
    values = None
    objective_value = None
    if status in (SolveStatus.OPTIMAL, SolveStatus.FEASIBLE):
        values = {b.name: np.array(variables[b.name].value, dtype=float) for b in program.blocks}
        objective_value = float(problem.value)
    return Solution(status, values, objective_value, stats, f"solver status: {problem.status}")


def feasibility_oracle(options: Optional[SolveOptions] = None):
    """Feasibility predicate over programs, e.g. for the rate line search."""

    def is_feasible(program: ConicProgram) -> bool:
        sol = solve(program, options)
        if sol.status is SolveStatus.NUMERICAL_FAILURE:
            raise SolverFailure(sol.diagnostics)
        return sol.is_feasible

    return is_feasible


@dataclass(frozen=True)
class CheckRecord:
    name: str
    residual: float
    threshold: float
    passed: bool
    note: str = ""

    def to_json_dict(self) -> dict:
        return {
            "check": self.name,
            "pass": self.passed,
            "residual": self.residual,
            "threshold": self.threshold,
            "note": self.note,
        }


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    chain: ColumnStochasticMatrix
    plan: AcceptancePlan
    policy: DecisionPolicy
    certificates: tuple  # one (S, y) pair per safety condition
    lyapunov: Optional[np.ndarray]
    report: dict  # name -> CheckRecord
    projection_distance: float

    def report_json(self) -> list:
        return [rec.to_json_dict() for rec in self.report.values()]


def _project_solution(spec: SynthesisSpec, values: dict):
    """Snap a raw solver iterate onto exact probability semantics.

    Plan entries are clamped to [0, 1] and columns rescaled if the budget is
    (marginally) exceeded; the chain is recomposed from the projected plan,
    forbidden entries are zeroed and columns renormalized.  Interior-point
    outputs violate these bounds at roughly the solve tolerance, so all of
    this moves entries by amounts comparable to that tolerance.
    """
    raw_plans = [np.asarray(values[f"P{k}"], dtype=float) for k in range(spec.m)]
    projected = [np.clip(p, 0.0, 1.0) for p in raw_plans]
    totals = np.sum([p.max(axis=0) for p in projected], axis=0)
    scale = np.where(totals > 1.0, 1.0 / np.maximum(totals, 1e-300), 1.0)
    projected = [p * scale[np.newaxis, :] for p in projected]
    plan = AcceptancePlan(tuple(projected))

    chain = compose_multi(spec.env, plan).entries.copy()
    chain[~permitted_mask(spec.adjacency)] = 0.0
    chain = np.maximum(chain, 0.0)
    chain /= chain.sum(axis=0, keepdims=True)

    m_raw = np.asarray(values["M"], dtype=float)
    distance = max(
        float(np.abs(chain - m_raw).max()),
        max(float(np.abs(p - r).max()) for p, r in zip(projected, raw_plans)),
    )
    return ColumnStochasticMatrix(chain), plan, distance


def recover_and_validate(
    spec: SynthesisSpec, sol: Solution, tol: float = 1e-6
) -> SynthesisResult:
    """Turn a feasible solver solution into a validated synthesis result.

    The chain is reconstructed independently from the recovered plan through
    the composition formula and checked against the solver's own chain
    block; every constraint of the feasible set is then re-checked
    numerically on the projected values.  All residuals land in the report;
    any residual above ``tol`` raises :class:`ValidationFailure`.
    """
    if not sol.is_feasible:
        raise SolverFailure(f"cannot recover from status {sol.status.value}")
    checks: dict = {}

    def record(name, residual, threshold=tol, note=""):
        residual = float(residual)
        checks[name] = CheckRecord(name, residual, threshold, residual <= threshold, note)

    chain, plan, distance = _project_solution(spec, sol.values)
    m = chain.entries
    v = spec.target.entries
    record("chain_vs_solver", np.abs(m - np.asarray(sol.values["M"])).max())
    record("projection_distance", distance)
    record("composition", np.abs(m - compose_multi(spec.env, plan).entries).max(), max(tol, 1e-8))
    record("column_sums", np.abs(m.sum(axis=0) - 1.0).max())
    record("nonnegativity", max(0.0, -m.min()))
    forbidden = ~permitted_mask(spec.adjacency)
    record("forbidden_transitions", np.abs(m[forbidden]).max() if forbidden.any() else 0.0)
    totals = np.sum([p.max(axis=0) for p in plan.matrices], axis=0)
    record("budget", max(0.0, float(totals.max()) - 1.0))
    record("stationary_target", np.abs(m @ v - v).max())

    certificates = []
    for idx, sspec in enumerate(spec.safety):
        s_val = np.asarray(sol.values[f"S{idx}"], dtype=float)
        y_val = np.asarray(sol.values[f"y{idx}"], dtype=float).reshape(-1)
        l_val = _l_expr(sspec, AffineExpr.variable(_m_block(spec))).evaluate({"M": m})
        record(
            f"safety{idx}_certificate",
            verify.certificate_residual(l_val, sspec.cap, sspec.bound, s_val, y_val),
        )
        certificates.append((s_val, y_val))

    lyapunov = None
    mode = spec.ergodicity
    if isinstance(mode, DecayLMI):
        lyapunov = np.asarray(sol.values["lyapunov"], dtype=float)
        lyapunov = (lyapunov + lyapunov.T) / 2.0
        weight = mode.weight if mode.weight is not None else np.diag(1.0 / v)
        err = weight @ (m - np.outer(v, np.ones(spec.n)))
        block = np.block(
            [[mode.decay**2 * lyapunov, err.T], [err, weight + weight.T - lyapunov]]
        )
        record("decay_lmi_psd", max(0.0, -np.linalg.eigvalsh((block + block.T) / 2.0)[0]))
        floor = PSD_FLOOR * np.trace(lyapunov) / spec.n
        record("lyapunov_floor", max(0.0, floor - np.linalg.eigvalsh(lyapunov)[0]))
    elif isinstance(mode, Reversible):
        record("detailed_balance", verify.detailed_balance_residual(m, v))
        h = np.sqrt(v)
        sandwich = np.diag(1.0 / h) @ m @ np.diag(h) - np.outer(h, h)
        sandwich = (sandwich + sandwich.T) / 2.0
        radius = float(np.abs(np.linalg.eigvalsh(sandwich)).max())
        record("spectral_radius", max(0.0, radius - mode.decay))
    elif isinstance(mode, Connectivity):
        mask = connectivity_floor_mask(spec.adjacency, spec.env)
        shortfall = max(0.0, mode.epsilon - float(m[mask].min())) if mask.any() else 0.0
        record("connectivity_floor", shortfall)
        record("strong_connectivity", 0.0 if verify.connectivity_check(m > 0.0) else 1.0)

    try:
        policy = normalize_policy(plan)
        normalized = True
    except DeadState as err:
        # A state that never turns ON has nothing to normalize; the default
        # extraction is still a valid policy for it.
        policy = extract_policy(plan)
        normalized = False
        record("policy_normalization", 0.0, note=str(err))
    if normalized:
        total_selection = np.sum(policy.selection, axis=0)
        record("selection_sums_to_one", np.abs(total_selection - 1.0).max())

    failed = [rec for rec in checks.values() if not rec.passed]
    if failed:
        raise ValidationFailure(failed)
    return SynthesisResult(
        chain, plan, policy, tuple(certificates), lyapunov, checks, distance
    )


def _m_block(spec: SynthesisSpec):
    from .program import VarBlock

    return VarBlock("M", (spec.n, spec.n))
