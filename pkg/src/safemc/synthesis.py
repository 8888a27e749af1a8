"""Translate a chain-synthesis problem into a linear/PSD conic program.

The design variables are the plan matrices (one per ON action) plus the
closed-loop chain itself, coupled by the composition identity.  Constraints
cover realizability (nonnegativity, column stochasticity, the per-state
budget via slack variables), forbidden transitions, duality certificates for
linear density-safety conditions, the stationary target, and one of three
ergodicity encodings.
"""

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

import numpy as np

from .chain import (
    AdjacencyMatrix,
    DimensionMismatch,
    EnvironmentModel,
    ProbVector,
)
from .program import AffineExpr, ConicProgram, ProgramBuilder, block2x2, vstack

PSD_FLOOR = 1e-9  # relative floor that stands in for strict definiteness


class SynthesisError(ValueError):
    pass


class ZeroTargetEntry(SynthesisError):
    def __init__(self, i: int):
        self.i = i
        super().__init__(
            f"target distribution entry {i} is zero; the reversible encoding "
            "requires a strictly positive target"
        )


class InfeasibleByStructure(SynthesisError):
    def __init__(self, states):
        self.states = tuple(states)
        super().__init__(
            "no adjacency-permitted transition with environment support can "
            f"deliver mass into state(s) {self.states}; the stationary "
            "constraint cannot hold"
        )


class InfeasibleAtUpper(SynthesisError):
    def __init__(self, hi: float):
        self.hi = hi
        super().__init__(f"program is infeasible even at the largest rate {hi}")


@dataclass(frozen=True, eq=False)
class SafetySpec:
    """Linear density-safety condition: L x <= bound for every probability
    vector x with x <= cap.

    ``L`` may depend affinely on the chain M; the supported forms are a pure
    constant, ``const + M``, ``const - M`` and the stacked rate form
    ``[M - I; I - M]``.
    """

    L_const: np.ndarray
    L_coeff: str  # "none" | "plus_m" | "minus_m" | "rate_stack"
    cap: np.ndarray
    bound: np.ndarray

    def __post_init__(self):
        lc = np.atleast_2d(np.asarray(self.L_const, dtype=float))
        cap = np.asarray(self.cap, dtype=float)
        bound = np.asarray(self.bound, dtype=float)
        if self.L_coeff not in ("none", "plus_m", "minus_m", "rate_stack"):
            raise SynthesisError(f"unknown L form {self.L_coeff!r}")
        if cap.ndim != 1 or bound.ndim != 1:
            raise DimensionMismatch("cap and bound must be vectors")
        if lc.shape != (bound.shape[0], cap.shape[0]):
            raise DimensionMismatch(
                f"L is {lc.shape} but bound/cap imply {(bound.shape[0], cap.shape[0])}"
            )
        if cap.min() < 0.0 or cap.max() > 1.0:
            raise SynthesisError("cap must lie in [0, 1]")
        if not np.isfinite(bound).all():
            raise SynthesisError("bound must be finite")
        n = cap.shape[0]
        if self.L_coeff in ("plus_m", "minus_m") and lc.shape != (n, n):
            raise DimensionMismatch("chain-coupled safety needs an n x n map")
        if self.L_coeff == "rate_stack" and lc.shape != (2 * n, n):
            raise DimensionMismatch("rate safety needs a 2n x n map")
        for name, val in (("L_const", lc), ("cap", cap), ("bound", bound)):
            arr = val.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def rows(self) -> int:
        return self.bound.shape[0]

    @classmethod
    def density_upper(cls, d) -> "SafetySpec":
        """Keep every state's density at or below ``d`` whenever it starts
        there: L = M, cap = bound = d."""
        d = np.asarray(d, dtype=float)
        n = d.shape[0]
        return cls(np.zeros((n, n)), "plus_m", d, d)

    @classmethod
    def density_rate(cls, f, box) -> "SafetySpec":
        """Limit the per-step density change to ``|x(t+1) - x(t)| <= f``
        inside the operating box ``x <= box``."""
        f = np.asarray(f, dtype=float)
        box = np.asarray(box, dtype=float)
        n = box.shape[0]
        const = np.concatenate([-np.eye(n), np.eye(n)], axis=0)
        return cls(const, "rate_stack", box, np.concatenate([f, f]))

    @classmethod
    def general(cls, L, cap, bound) -> "SafetySpec":
        return cls(np.asarray(L, dtype=float), "none", cap, bound)


@dataclass(frozen=True)
class DecayLMI:
    """Certify a geometric decay rate of the error to the target in a
    quadratic norm found by the solver.  ``weight`` is the fixed free matrix
    of the LMI; the default is diag(target)^-1."""

    decay: float
    weight: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise SynthesisError("decay rate must lie in [0, 1)")


@dataclass(frozen=True)
class Reversible:
    """Detailed balance plus a spectral sandwich on the symmetrized chain."""

    decay: float

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise SynthesisError("decay rate must lie in [0, 1)")


@dataclass(frozen=True)
class Connectivity:
    """Floor supported, permitted transitions at ``epsilon`` so the chain's
    support graph is the (strongly connected) adjacency support."""

    epsilon: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise SynthesisError("epsilon must be positive")


ErgodicityMode = Union[DecayLMI, Reversible, Connectivity]


@dataclass(frozen=True, eq=False)
class SynthesisSpec:
    """Complete problem statement for policy synthesis."""

    env: EnvironmentModel
    adjacency: AdjacencyMatrix
    target: ProbVector
    safety: tuple = ()
    ergodicity: ErgodicityMode = Connectivity()
    # Optional linear objective <weights, M>; None minimizes the total
    # off-diagonal action 1'(1 - diag(M)).
    objective_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.env.n
        if self.adjacency.n != n:
            raise DimensionMismatch("adjacency size differs from environment")
        if self.target.dim != n:
            raise DimensionMismatch("target size differs from environment")
        object.__setattr__(self, "safety", tuple(self.safety))
        for s in self.safety:
            if s.cap.shape[0] != n:
                raise DimensionMismatch("safety cap size differs from environment")
        if isinstance(self.ergodicity, Reversible) and self.target.entries.min() <= 0.0:
            raise ZeroTargetEntry(int(np.argmin(self.target.entries)))
        if self.objective_weights is not None:
            w = np.asarray(self.objective_weights, dtype=float)
            if w.shape != (n, n):
                raise DimensionMismatch("objective weights must be n x n")
            object.__setattr__(self, "objective_weights", w)

    @property
    def n(self) -> int:
        return self.env.n

    @property
    def m(self) -> int:
        return self.env.m


def environment_support(env: EnvironmentModel) -> np.ndarray:
    """Boolean mask of entries reachable through any action or the OFF mode."""
    support = env.off_action.entries > 0.0
    for g in env.on_actions:
        support = support | (g.entries > 0.0)
    return support


def permitted_mask(adjacency: AdjacencyMatrix) -> np.ndarray:
    """Mask of chain entries M[i, j] permitted by the adjacency (j -> i)."""
    return adjacency.entries.T.astype(bool)


def connectivity_floor_mask(adjacency: AdjacencyMatrix, env: EnvironmentModel) -> np.ndarray:
    """Entries floored by the connectivity encoding: permitted by the
    adjacency and carrying environment support.

    Flooring entries with no support would be structurally infeasible, so the
    floor applies only where some transition matrix can actually place mass.
    """
    return permitted_mask(adjacency) & environment_support(env)


def _structurally_starved_states(spec: SynthesisSpec) -> list:
    """States that need stationary mass but have no permitted, supported
    inflow from any state that carries mass."""
    v = spec.target.entries
    feed = connectivity_floor_mask(spec.adjacency, spec.env)
    starved = []
    for i in np.flatnonzero(v > 0.0):
        sources = np.flatnonzero(feed[i, :] & (v > 0.0))
        if sources.size == 0:
            starved.append(int(i))
    return starved


def _l_expr(sspec: SafetySpec, m_expr: AffineExpr) -> AffineExpr:
    const = AffineExpr.constant(sspec.L_const)
    if sspec.L_coeff == "none":
        return const
    if sspec.L_coeff == "plus_m":
        return const + m_expr
    if sspec.L_coeff == "minus_m":
        return const - m_expr
    return const + vstack([m_expr, m_expr * -1.0])


def build_safety_dual(
    builder: ProgramBuilder, m_expr: AffineExpr, sspec: SafetySpec, index: int = 0
):
    """Emit the duality certificate for one safety condition.

    Introduces a nonnegative multiplier matrix S and a free vector y (the
    multiplier of the unit-mass equality) with

        L + S + y 1'            >= 0
        y + bound               >= (L + S + y 1') cap

    which holds for some (S, y) exactly when ``L x <= bound`` on every
    probability vector ``x <= cap``.  All constraints are affine in
    (M, S, y).
    """
    r, n = sspec.rows, sspec.cap.shape[0]
    s_expr = builder.add_block(f"S{index}", (r, n))
    y_expr = builder.add_block(f"y{index}", (r, 1))
    cert = _l_expr(sspec, m_expr) + s_expr + y_expr.tile_cols(n)
    builder.add_ineq(f"safety{index}_multiplier_nonneg", s_expr)
    builder.add_ineq(f"safety{index}_certificate_nonneg", cert)
    worst = y_expr + AffineExpr.constant(sspec.bound[:, np.newaxis]) - cert.rmul(sspec.cap)
    builder.add_ineq(f"safety{index}_worst_case", worst)


def build_ergodicity(
    builder: ProgramBuilder,
    m_expr: AffineExpr,
    mode: ErgodicityMode,
    target: ProbVector,
    adjacency: AdjacencyMatrix,
    env: EnvironmentModel,
):
    """Emit the stationary-target equality plus the chosen ergodicity
    encoding."""
    v = target.entries
    n = v.shape[0]
    builder.add_eq(
        "stationary_target", m_expr.rmul(v) - AffineExpr.constant(v[:, np.newaxis])
    )
    if isinstance(mode, DecayLMI):
        if mode.weight is not None:
            weight = np.asarray(mode.weight, dtype=float)
            if weight.shape != (n, n):
                raise DimensionMismatch("LMI weight must be n x n")
        else:
            if v.min() <= 0.0:
                raise ZeroTargetEntry(int(np.argmin(v)))
            weight = np.diag(1.0 / v)
        lyap = builder.add_block("lyapunov", (n, n), symmetric=True)
        err_map = m_expr - AffineExpr.constant(np.outer(v, np.ones(n)))
        fa = err_map.lmul(weight)
        lmi = block2x2(
            lyap * mode.decay**2,
            fa.T,
            fa,
            AffineExpr.constant(weight + weight.T) - lyap,
        )
        builder.add_psd("decay_lmi", lmi)
        # Strict definiteness is not solver-representable; require a scale
        # free relative floor on the quadratic form instead.
        builder.add_psd(
            "lyapunov_floor", lyap - lyap.trace().times_identity(n) * (PSD_FLOOR / n)
        )
    elif isinstance(mode, Reversible):
        if v.min() <= 0.0:
            raise ZeroTargetEntry(int(np.argmin(v)))
        flux = m_expr.rmul(np.diag(v))  # flux[i, j] = M[i, j] v[j]
        builder.add_eq("detailed_balance", flux - flux.T)
        h = np.sqrt(v)
        sandwich = m_expr.lmul(np.diag(1.0 / h)).rmul(np.diag(h)) - AffineExpr.constant(
            np.outer(h, h)
        )
        sym = (sandwich + sandwich.T) * 0.5
        lam_eye = AffineExpr.constant(mode.decay * np.eye(n))
        builder.add_psd("spectral_upper", lam_eye - sym)
        builder.add_psd("spectral_lower", lam_eye + sym)
    elif isinstance(mode, Connectivity):
        mask = connectivity_floor_mask(adjacency, env).astype(float)
        builder.add_ineq(
            "connectivity_floor",
            m_expr.hadamard(mask) - AffineExpr.constant(mode.epsilon * mask),
        )
    else:
        raise SynthesisError(f"unknown ergodicity mode {mode!r}")


def build_program(spec: SynthesisSpec) -> ConicProgram:
    """Assemble the full synthesis program.

    Blocks: the chain M, one plan matrix per ON action, the per-state budget
    slacks, one (S, y) pair per safety condition and, for the decay-LMI
    encoding, a symmetric quadratic-form matrix.
    """
    starved = _structurally_starved_states(spec)
    if starved:
        raise InfeasibleByStructure(starved)
    n, m = spec.n, spec.m
    builder = ProgramBuilder()
    m_expr = builder.add_block("M", (n, n))
    p_exprs = [builder.add_block(f"P{k}", (n, n)) for k in range(m)]
    beta = builder.add_block("beta", (m, n))

    builder.add_ineq("M_nonneg", m_expr)
    for k, p in enumerate(p_exprs):
        builder.add_ineq(f"P{k}_nonneg", p)
    ones_row = AffineExpr.constant(np.ones((1, n)))
    builder.add_eq("columns_sum_to_one", m_expr.col_sums() - ones_row)

    accepted = p_exprs[0].hadamard(spec.env.on_actions[0].entries)
    for k in range(1, m):
        accepted = accepted + p_exprs[k].hadamard(spec.env.on_actions[k].entries)
    off_share = ones_row - accepted.col_sums()
    off_term = off_share.tile_rows(n).hadamard(spec.env.off_action.entries)
    builder.add_eq("chain_composition", m_expr - accepted - off_term)

    forbidden = 1.0 - spec.adjacency.entries.T.astype(float)
    if forbidden.any():
        builder.add_eq("forbidden_transitions", m_expr.hadamard(forbidden))

    # Exact reformulation of the per-state budget: P_k[i, j] <= beta[k, j]
    # and the beta column sums stay at or below one.
    for k, p in enumerate(p_exprs):
        builder.add_ineq(f"budget_cap_P{k}", beta.row(k).tile_rows(n) - p)
    builder.add_ineq("budget_total", ones_row - beta.col_sums())

    for idx, sspec in enumerate(spec.safety):
        build_safety_dual(builder, m_expr, sspec, idx)

    build_ergodicity(builder, m_expr, spec.ergodicity, spec.target, spec.adjacency, spec.env)

    if spec.objective_weights is None:
        objective = AffineExpr.constant([[float(n)]]) - m_expr.trace()
    else:
        objective = m_expr.hadamard(spec.objective_weights).sum_all()
    builder.set_objective(objective)
    return builder.build()


def line_search_lambda(
    spec: SynthesisSpec,
    lo: float,
    hi: float,
    tol: float,
    solver: Callable[[ConicProgram], bool],
) -> float:
    """Bisect for the smallest certified decay rate.

    ``solver`` maps a program to a feasibility verdict.  Feasibility is
    assumed monotone in the rate (larger rates only relax the encoding), so
    the bracket keeps the smallest rate known to be feasible on top.  Raises
    :class:`InfeasibleAtUpper` when even ``hi`` fails.
    """
    if not isinstance(spec.ergodicity, (DecayLMI, Reversible)):
        raise SynthesisError("rate search needs the decay-LMI or reversible encoding")
    if not 0.0 <= lo < hi <= 1.0:
        raise SynthesisError("need 0 <= lo < hi <= 1")
    if tol <= 0.0:
        raise SynthesisError("tol must be positive")

    def feasible_at(lam: float) -> bool:
        candidate = replace(spec, ergodicity=replace(spec.ergodicity, decay=lam))
        return bool(solver(build_program(candidate)))

    found = None
    steps = max(0, math.ceil(math.log2((hi - lo) / tol)))
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if feasible_at(mid):
            hi = mid
            found = mid
        else:
            lo = mid
    if found is None:
        if not feasible_at(hi):
            raise InfeasibleAtUpper(hi)
    return hi
