"""Independent oracles and certificate checkers.

Nothing here reuses the synthesis encodings: safety is checked by direct
worst-case optimization over the feasible density set (greedy vertex
construction, with LP formulations available as cross-checks), contraction
by sampling quadratic-form ratios, connectivity by plain reachability, and
Monte Carlo output by comparison against exact propagation.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from .chain import as_stochastic
from .simulate import DensityHistory, propagate_analytic

ORACLE_TOL = 1e-9


class InfeasibleSet(ValueError):
    def __init__(self, cap_total: float):
        self.cap_total = cap_total
        super().__init__(
            f"caps sum to {cap_total!r} < 1: no probability vector satisfies them"
        )


@dataclass(frozen=True, eq=False)
class SafetyReport:
    """Worst case of each safety row over {x >= 0, sum x = 1, x <= cap}."""

    worst: np.ndarray  # (r,) maximal row values
    margin: np.ndarray  # (r,) bound minus worst
    witnesses: np.ndarray  # (r, n) maximizing vertices
    safe: bool

    def to_json_dict(self) -> dict:
        return {
            "check": "safety_oracle",
            "pass": self.safe,
            "residual": float(max(0.0, -self.margin.min())),
            "rows": [
                {
                    "worst": float(w),
                    "margin": float(g),
                    "witness": [float(x) for x in vx],
                }
                for w, g, vx in zip(self.worst, self.margin, self.witnesses)
            ],
        }


def _greedy_row_max(row: np.ndarray, cap: np.ndarray) -> tuple:
    """Maximize ``row @ x`` over the capped simplex by filling coordinates in
    decreasing coefficient order (stable, so ties go to the lower index)."""
    x = np.zeros_like(cap)
    remaining = 1.0
    for i in np.argsort(-row, kind="stable"):
        take = min(cap[i], remaining)
        x[i] = take
        remaining -= take
        if remaining <= 0.0:
            break
    return float(row @ x), x


def safety_oracle(L, cap, bound, tol: float = ORACLE_TOL) -> SafetyReport:
    """Brute-force safety verdict: is ``L x <= bound`` for every probability
    vector ``x <= cap``?

    Raises :class:`InfeasibleSet` when the caps cannot carry unit mass.
    """
    L = np.atleast_2d(np.asarray(L, dtype=float))
    cap = np.asarray(cap, dtype=float)
    bound = np.asarray(bound, dtype=float)
    total = float(cap.sum())
    if total < 1.0 - 1e-12:
        raise InfeasibleSet(total)
    worst = np.empty(L.shape[0])
    witnesses = np.empty_like(L)
    for r, row in enumerate(L):
        worst[r], witnesses[r] = _greedy_row_max(row, cap)
    margin = bound - worst
    return SafetyReport(worst, margin, witnesses, bool((margin >= -tol).all()))


def safety_row_max_lp(row, cap) -> float:
    """LP cross-check of the greedy vertex oracle: solve the worst case of
    one row directly as a linear program over the capped simplex."""
    row = np.asarray(row, dtype=float)
    cap = np.asarray(cap, dtype=float)
    res = linprog(
        -row,
        A_eq=np.ones((1, row.shape[0])),
        b_eq=[1.0],
        bounds=[(0.0, c) for c in cap],
        method="highs",
    )
    if not res.success:
        raise InfeasibleSet(float(cap.sum()))
    return -float(res.fun)


def certificate_exists_lp(L, cap, bound, tol: float = 1e-7) -> bool:
    """Feasibility of the duality certificate, decided by an LP.

    For each row, minimize ``(l + s + y 1)' cap - y`` over ``s >= 0`` and
    free ``y`` subject to ``l + s + y 1 >= 0``; a certificate exists exactly
    when the optimum is at most the bound.
    """
    L = np.atleast_2d(np.asarray(L, dtype=float))
    cap = np.asarray(cap, dtype=float)
    bound = np.asarray(bound, dtype=float)
    n = cap.shape[0]
    for row, b in zip(L, bound):
        cost = np.concatenate([cap, [float(cap.sum()) - 1.0]])
        a_ub = np.concatenate([-np.eye(n), -np.ones((n, 1))], axis=1)
        res = linprog(
            cost,
            A_ub=a_ub,
            b_ub=row,
            bounds=[(0.0, None)] * n + [(None, None)],
            method="highs",
        )
        if not res.success:
            return False
        if float(res.fun) + float(cap @ row) > b + tol:
            return False
    return True


def certificate_residual(L, cap, bound, S, y) -> float:
    """Largest violation of the three certificate conditions (0 when the
    certificate is exact)."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    cap = np.asarray(cap, dtype=float)
    bound = np.asarray(bound, dtype=float)
    cert = L + S + y[:, np.newaxis]
    return float(
        max(
            max(0.0, -S.min()),
            max(0.0, -cert.min()),
            max(0.0, (cert @ cap - y - bound).max()),
        )
    )


def certificate_check(L, cap, bound, S, y, tol: float = 1e-9) -> bool:
    """True iff (S, y) witnesses safety within ``tol``."""
    return certificate_residual(L, cap, bound, S, y) <= tol


@dataclass(frozen=True)
class ConvergenceReport:
    t_star: Optional[int]  # first step with max-norm error under the threshold
    lyapunov_ratio_max: float
    violations: int
    trials: int

    def to_json_dict(self) -> dict:
        return {
            "check": "contraction",
            "pass": self.violations == 0,
            "t_star": self.t_star,
            "lyapunov_ratio_max": self.lyapunov_ratio_max,
            "violations": self.violations,
            "trials": self.trials,
        }


def contraction_check(
    m,
    v,
    p_lyap,
    decay: float,
    trials: int = 100,
    seed: int = 0,
    x0=None,
    horizon: int = 1000,
    conv_tol: float = 1e-3,
) -> ConvergenceReport:
    """Sample quadratic-form contraction ratios of the error map.

    For random zero-sum errors e, checks
    ``e' A' P A e <= decay^2 e' P e + 1e-9`` with ``A = M - v 1'`` and
    records the largest ratio.  When ``x0`` is given, also propagates it and
    records the first step whose max-norm distance to the target drops below
    ``conv_tol``.
    """
    m = as_stochastic(m).entries
    v = np.asarray(v, dtype=float)
    p = np.asarray(p_lyap, dtype=float)
    n = v.shape[0]
    err_map = m - np.outer(v, np.ones(n))
    rng = np.random.default_rng(seed)
    ratio_max = 0.0
    violations = 0
    for _ in range(trials):
        e = rng.standard_normal(n)
        e -= e.mean()
        denom = float(e @ p @ e)
        if denom <= 1e-300:
            continue
        ae = err_map @ e
        num = float(ae @ p @ ae)
        ratio_max = max(ratio_max, num / denom)
        if num > decay**2 * denom + 1e-9:
            violations += 1
    t_star = None
    if x0 is not None:
        hist = propagate_analytic(m, x0, horizon)
        below = np.abs(hist.densities - v).max(axis=1) < conv_tol
        hits = np.flatnonzero(below)
        if hits.size:
            t_star = int(hits[0])
    return ConvergenceReport(t_star, ratio_max, violations, trials)


def connectivity_check(indicator) -> bool:
    """Strong connectivity of a directed support graph via two reachability
    passes (forward and backward from vertex 0)."""
    a = np.asarray(indicator) != 0
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("indicator must be square")
    n = a.shape[0]
    if n == 0:
        return True

    def reaches_all(edges) -> bool:
        seen = np.zeros(n, dtype=bool)
        seen[0] = True
        frontier = [0]
        while frontier:
            nxt = edges[frontier].any(axis=0) & ~seen
            frontier = list(np.flatnonzero(nxt))
            seen |= nxt
        return bool(seen.all())

    return reaches_all(a) and reaches_all(a.T)


def detailed_balance_residual(m, v) -> float:
    """Largest asymmetry of the probability flux M[i, j] v[j]."""
    m = np.asarray(m, dtype=float)
    flux = m * np.asarray(v, dtype=float)[np.newaxis, :]
    return float(np.abs(flux - flux.T).max())


@dataclass(frozen=True, eq=False)
class McComparison:
    """Empirical ensemble densities against exact propagation."""

    max_abs_dev: np.ndarray  # per-step max over states of |emp - analytic|
    inside_band: int
    total: int
    band_fraction: float
    empirical_cap_flags: tuple  # (t, state) pairs beyond cap + 3 sigma
    analytic_cap_flags: tuple  # (t, state) pairs where the exact density breaks the cap
    analytic: DensityHistory

    def to_json_dict(self) -> dict:
        return {
            "check": "monte_carlo_vs_analytic",
            "pass": not self.empirical_cap_flags and not self.analytic_cap_flags,
            "band_fraction": self.band_fraction,
            "inside_band": self.inside_band,
            "total": self.total,
            "max_abs_dev": float(self.max_abs_dev.max()),
            "empirical_cap_flags": [list(f) for f in self.empirical_cap_flags],
            "analytic_cap_flags": [list(f) for f in self.analytic_cap_flags],
        }


def compare_mc_analytic(hist_emp: DensityHistory, m, x0, cap=None) -> McComparison:
    """Compare an ensemble history against exact propagation of the chain.

    Per (step, state) pair, checks whether the empirical density falls
    inside the 3-sigma multinomial band around the analytic density.  With a
    ``cap`` given, flags empirical excursions beyond cap + 3 sigma and any
    analytic excursion beyond cap + 1e-8 (the guarantee lives on the exact
    densities; finite ensembles fluctuate around them).
    """
    if hist_emp.num_agents is None:
        raise ValueError("empirical history must carry its agent count")
    analytic = propagate_analytic(m, x0, hist_emp.steps)
    diff = np.abs(hist_emp.densities - analytic.densities)
    sigma = np.sqrt(
        analytic.densities * (1.0 - analytic.densities) / hist_emp.num_agents
    )
    inside = diff <= 3.0 * sigma + 1e-12
    emp_flags = []
    ana_flags = []
    if cap is not None:
        cap = np.asarray(cap, dtype=float)
        over_emp = hist_emp.densities > cap[np.newaxis, :] + 3.0 * sigma
        over_ana = analytic.densities > cap[np.newaxis, :] + 1e-8
        emp_flags = [(int(t), int(i)) for t, i in zip(*np.nonzero(over_emp))]
        ana_flags = [(int(t), int(i)) for t, i in zip(*np.nonzero(over_ana))]
    return McComparison(
        diff.max(axis=1),
        int(inside.sum()),
        int(inside.size),
        float(inside.mean()),
        tuple(emp_flags),
        tuple(ana_flags),
        analytic,
    )
