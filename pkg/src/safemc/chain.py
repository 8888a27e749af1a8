"""Core types and algebra for ON/OFF mode-switching Markov chains.

Matrices follow the column-stochastic convention throughout: ``M[i, j]`` is
the probability of moving to state ``i`` given that the current state is
``j``, so columns index the current state and every column sums to one.
State and action indices are 0-based in code.

All values are immutable after construction and every operation is a pure
function, so everything here is safe to share across threads.
"""

from dataclasses import InitVar, dataclass
from typing import Sequence, Union

import numpy as np

# Tolerance regimes: matrices we construct accumulate only a handful of
# rounding operations, user-supplied data may come from rounded text.
STRICT_TOL = 1e-12
INPUT_TOL = 1e-9
BUDGET_TOL = 1e-9


class ChainError(ValueError):
    """Base class for chain-model validation failures."""


class NegativeEntry(ChainError):
    def __init__(self, i: int, j: int, value: float):
        self.i, self.j, self.value = i, j, value
        super().__init__(f"entry [{i},{j}] = {value!r} is negative")


class ColumnSumViolation(ChainError):
    def __init__(self, j: int, total: float):
        self.j, self.total = j, total
        super().__init__(f"column {j} sums to {total!r}, expected 1")


class DimensionMismatch(ChainError):
    pass


class BudgetViolation(ChainError):
    def __init__(self, j: int, total: float):
        self.j, self.total = j, total
        super().__init__(
            f"plan budget at state {j} is {total!r} > 1: the per-state "
            "column maxima of the plan matrices must sum to at most 1"
        )


class DeadState(ChainError):
    def __init__(self, j: int):
        self.j = j
        super().__init__(
            f"state {j} never selects any action; selection probabilities "
            "cannot be normalized"
        )


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class ProbVector:
    """Nonnegative vector with unit sum: a discrete probability distribution."""

    entries: np.ndarray
    tol: InitVar[float] = STRICT_TOL

    def __post_init__(self, tol):
        e = _frozen(self.entries)
        if e.ndim != 1:
            raise DimensionMismatch(f"probability vector must be 1-d, got shape {e.shape}")
        if e.min(initial=0.0) < -tol:
            i = int(np.argmin(e))
            raise NegativeEntry(i, 0, float(e[i]))
        total = float(e.sum())
        if abs(total - 1.0) > tol:
            raise ColumnSumViolation(0, total)
        object.__setattr__(self, "entries", e)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class ColumnStochasticMatrix:
    """Nonnegative square matrix whose columns each sum to one."""

    entries: np.ndarray
    tol: InitVar[float] = STRICT_TOL

    def __post_init__(self, tol):
        e = _frozen(self.entries)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise DimensionMismatch(f"matrix must be square, got shape {e.shape}")
        if e.size and e.min() < -tol:
            i, j = np.unravel_index(int(np.argmin(e)), e.shape)
            raise NegativeEntry(int(i), int(j), float(e[i, j]))
        sums = e.sum(axis=0)
        dev = np.abs(sums - 1.0)
        j = int(np.argmax(dev))
        if dev[j] > tol:
            raise ColumnSumViolation(j, float(sums[j]))
        object.__setattr__(self, "entries", e)

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class AdjacencyMatrix:
    """Binary matrix of permitted transitions: A[i, j] = 1 allows i -> j.

    Self-transitions must always be permitted (unit diagonal); the diagonal
    correction in the chain composition can place mass there and forbidding
    it would make most synthesis problems structurally infeasible.
    """

    entries: np.ndarray

    def __post_init__(self):
        e = np.array(self.entries)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise DimensionMismatch(f"adjacency must be square, got shape {e.shape}")
        if not np.isin(e, (0, 1)).all():
            raise ChainError("adjacency entries must be 0 or 1")
        if not (np.diag(e) == 1).all():
            raise ChainError("adjacency diagonal must be all ones (self-transitions)")
        object.__setattr__(self, "entries", _frozen(e, dtype=np.int8))

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class SingleActionPolicy:
    """Acceptance probabilities K for the single-action model.

    K[i, j] is the probability of executing an observed transition j -> i.
    The diagonal is fixed at 1: with no motion in the OFF mode, accepting or
    rejecting an observed self-transition is the same outcome.
    """

    acceptance: np.ndarray
    tol: InitVar[float] = INPUT_TOL

    def __post_init__(self, tol):
        k = _frozen(self.acceptance)
        if k.ndim != 2 or k.shape[0] != k.shape[1]:
            raise DimensionMismatch(f"acceptance matrix must be square, got shape {k.shape}")
        if k.min() < -tol or k.max() > 1.0 + tol:
            raise ChainError("acceptance probabilities must lie in [0, 1]")
        if np.abs(np.diag(k) - 1.0).max() > tol:
            raise ChainError("acceptance diagonal must be all ones")
        object.__setattr__(self, "acceptance", k)

    @property
    def n(self) -> int:
        return self.acceptance.shape[0]


@dataclass(frozen=True, eq=False)
class EnvironmentModel:
    """Stochastic environment: one transition matrix per ON action plus the
    OFF-mode fallback matrix."""

    on_actions: tuple
    off_action: ColumnStochasticMatrix

    def __post_init__(self):
        on = tuple(as_stochastic(g) for g in self.on_actions)
        off = as_stochastic(self.off_action)
        if not on:
            raise DimensionMismatch("environment needs at least one ON action")
        n = off.n
        if any(g.n != n for g in on):
            raise DimensionMismatch("all environment matrices must share one size")
        object.__setattr__(self, "on_actions", on)
        object.__setattr__(self, "off_action", off)

    @property
    def n(self) -> int:
        return self.off_action.n

    @property
    def m(self) -> int:
        return len(self.on_actions)


def _budget_totals(matrices: Sequence[np.ndarray]) -> np.ndarray:
    """Per-state sums of column maxima over the plan matrices."""
    return np.sum([np.asarray(p).max(axis=0) for p in matrices], axis=0)


@dataclass(frozen=True, eq=False)
class AcceptancePlan:
    """Combined choose-and-accept probabilities, one matrix per ON action.

    These are the convex design variables of the synthesis problem.  Every
    entry lies in [0, 1] and the per-state budget holds: the column maxima
    summed over actions never exceed 1, which guarantees the plan can be
    realized by valid selection and acceptance probabilities.
    """

    matrices: tuple
    tol: InitVar[float] = BUDGET_TOL

    def __post_init__(self, tol):
        ms = tuple(_frozen(p) for p in self.matrices)
        if not ms:
            raise DimensionMismatch("plan needs at least one matrix")
        shape = ms[0].shape
        if len(shape) != 2 or shape[0] != shape[1] or any(p.shape != shape for p in ms):
            raise DimensionMismatch("plan matrices must be square and equally sized")
        for p in ms:
            if p.min() < -tol or p.max() > 1.0 + tol:
                raise ChainError("plan entries must lie in [0, 1]")
        totals = _budget_totals(ms)
        j = int(np.argmax(totals))
        if totals[j] > 1.0 + tol:
            raise BudgetViolation(j, float(totals[j]))
        object.__setattr__(self, "matrices", ms)

    @property
    def n(self) -> int:
        return self.matrices[0].shape[0]

    @property
    def m(self) -> int:
        return len(self.matrices)


@dataclass(frozen=True, eq=False)
class DecisionPolicy:
    """Executable per-agent policy.

    ``selection[k][j]`` is the probability of choosing ON action k for
    observation at state j; ``acceptance[k][i, j]`` is the probability of
    executing an observed transition j -> i under action k.
    """

    selection: tuple
    acceptance: tuple
    tol: InitVar[float] = BUDGET_TOL

    def __post_init__(self, tol):
        sel = tuple(_frozen(a) for a in self.selection)
        acc = tuple(_frozen(q) for q in self.acceptance)
        if len(sel) != len(acc) or not sel:
            raise DimensionMismatch("need matching selection/acceptance per action")
        n = sel[0].shape[0]
        if any(a.shape != (n,) for a in sel) or any(q.shape != (n, n) for q in acc):
            raise DimensionMismatch("policy shapes are inconsistent")
        for a in sel:
            if a.min() < -tol or a.max() > 1.0 + tol:
                raise ChainError("selection probabilities must lie in [0, 1]")
        for q in acc:
            if q.min() < -tol or q.max() > 1.0 + tol:
                raise ChainError("acceptance probabilities must lie in [0, 1]")
        total = np.sum(sel, axis=0)
        if total.max() > 1.0 + tol:
            raise ChainError("per-state selection probabilities must sum to at most 1")
        object.__setattr__(self, "selection", sel)
        object.__setattr__(self, "acceptance", acc)

    @property
    def n(self) -> int:
        return self.selection[0].shape[0]

    @property
    def m(self) -> int:
        return len(self.selection)


StochasticLike = Union[ColumnStochasticMatrix, np.ndarray, Sequence]
PlanLike = Union[AcceptancePlan, Sequence]


def as_stochastic(m: StochasticLike, tol: float = INPUT_TOL) -> ColumnStochasticMatrix:
    if isinstance(m, ColumnStochasticMatrix):
        return m
    return ColumnStochasticMatrix(np.asarray(m, dtype=float), tol=tol)


def as_plan(p: PlanLike, tol: float = BUDGET_TOL) -> AcceptancePlan:
    if isinstance(p, AcceptancePlan):
        return p
    return AcceptancePlan(tuple(np.asarray(q, dtype=float) for q in p), tol=tol)


def validate_stochastic(m, tol: float = INPUT_TOL) -> ColumnStochasticMatrix:
    """Check that a raw square matrix is column stochastic within ``tol``.

    Raises :class:`NegativeEntry` or :class:`ColumnSumViolation`; never
    modifies the data.
    """
    return ColumnStochasticMatrix(np.asarray(m, dtype=float), tol=tol)


def _column_slack(m: ColumnStochasticMatrix) -> float:
    return float(np.abs(m.entries.sum(axis=0) - 1.0).max())


def compose_single(g: StochasticLike, k) -> ColumnStochasticMatrix:
    """Closed-loop chain of the single-action model.

    Off-diagonal entries multiply the environment probability by the
    acceptance probability; the diagonal absorbs the rejected mass so each
    column still sums to one:

        M[i, j] = G[i, j] * K[i, j]                      (i != j)
        M[j, j] = 1 - sum_{i != j} G[i, j] * K[i, j]
    """
    g = as_stochastic(g)
    if not isinstance(k, SingleActionPolicy):
        k = SingleActionPolicy(np.asarray(k, dtype=float))
    if k.n != g.n:
        raise DimensionMismatch(f"G is {g.n}x{g.n} but K is {k.n}x{k.n}")
    s = g.entries * k.acceptance
    m = s.copy()
    off_mass = s.sum(axis=0) - np.diag(s)
    np.fill_diagonal(m, 1.0 - off_mass)
    # The diagonal correction self-normalizes the columns; only rounding in
    # the column sums can remain.
    tol = max(STRICT_TOL, 2.0 * _column_slack(g))
    return ColumnStochasticMatrix(m, tol=tol)


def compose_multi(env: EnvironmentModel, plan: PlanLike) -> ColumnStochasticMatrix:
    """Closed-loop chain of the multi-action model.

    The accepted mass is the Hadamard product of each action's environment
    matrix with its plan matrix; the OFF matrix carries whatever probability
    is left in each column:

        M = sum_k G_k (*) P_k + G_off @ diag(1 - colsums(sum_k G_k (*) P_k))
    """
    plan = as_plan(plan)
    if plan.n != env.n or plan.m != env.m:
        raise DimensionMismatch(
            f"plan is {plan.m} x {plan.n}x{plan.n} but environment is "
            f"{env.m} x {env.n}x{env.n}"
        )
    totals = _budget_totals(plan.matrices)
    j = int(np.argmax(totals))
    if totals[j] > 1.0 + BUDGET_TOL:
        raise BudgetViolation(j, float(totals[j]))
    accepted = np.zeros((env.n, env.n))
    for g, p in zip(env.on_actions, plan.matrices):
        accepted += g.entries * p
    off_share = 1.0 - accepted.sum(axis=0)
    m = accepted + env.off_action.entries * off_share[np.newaxis, :]
    # Column sums inherit only the OFF matrix's own slack (scaled by the OFF
    # share), so exactly normalized inputs give sums exact to rounding.
    tol = max(STRICT_TOL, 4.0 * _column_slack(env.off_action))
    return ColumnStochasticMatrix(m, tol=tol)


def budget_ok(plan: PlanLike) -> bool:
    """True iff the per-state budget holds: sum_k max_i P_k[i, j] <= 1."""
    if isinstance(plan, AcceptancePlan):
        matrices = plan.matrices
    else:
        matrices = [np.asarray(p, dtype=float) for p in plan]
    return bool((_budget_totals(matrices) <= 1.0 + BUDGET_TOL).all())


def extract_policy(plan: PlanLike) -> DecisionPolicy:
    """Default parameterization of a plan as an executable policy.

    Selection probabilities are the column maxima of each plan matrix and
    acceptance probabilities are the columns rescaled by those maxima, which
    makes the round trip through :func:`policy_to_plan` exact up to one
    multiply/divide pair per entry.  A state that never uses an action keeps
    zero acceptance probabilities for it (the values are never sampled).
    """
    plan = as_plan(plan)
    selection = []
    acceptance = []
    for p in plan.matrices:
        alpha = p.max(axis=0)
        scale = np.divide(1.0, alpha, out=np.zeros_like(alpha), where=alpha > 0)
        selection.append(alpha)
        acceptance.append(p * scale[np.newaxis, :])
    return DecisionPolicy(tuple(selection), tuple(acceptance))


def normalize_policy(plan: PlanLike) -> DecisionPolicy:
    """Like :func:`extract_policy` but rescales each state's selection
    probabilities to sum to one, so an action is always observed.

    The rescaling divides each acceptance column by the same factor that
    multiplies the selection probability, so the plan (and therefore the
    closed-loop chain) is unchanged.  Raises :class:`DeadState` if some state
    has zero total selection probability.
    """
    plan = as_plan(plan)
    defaults = np.stack([p.max(axis=0) for p in plan.matrices])  # (m, n)
    totals = defaults.sum(axis=0)
    dead = np.flatnonzero(totals == 0.0)
    if dead.size:
        raise DeadState(int(dead[0]))
    scaled = defaults / totals[np.newaxis, :]
    selection = []
    acceptance = []
    for p, alpha in zip(plan.matrices, scaled):
        inv = np.divide(1.0, alpha, out=np.zeros_like(alpha), where=alpha > 0)
        selection.append(alpha)
        acceptance.append(p * inv[np.newaxis, :])
    return DecisionPolicy(tuple(selection), tuple(acceptance))


def policy_to_plan(policy: DecisionPolicy) -> AcceptancePlan:
    """Combine selection and acceptance probabilities into plan matrices:
    P_k = Q_k @ diag(alpha_k)."""
    matrices = tuple(
        q * a[np.newaxis, :] for q, a in zip(policy.acceptance, policy.selection)
    )
    return AcceptancePlan(matrices)
