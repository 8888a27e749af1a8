"""Monte Carlo execution of ON/OFF decision policies for agent ensembles.

Randomness discipline: every agent owns a counter-based stream keyed by
(seed, agent id), so results are bit-reproducible no matter how the work is
scheduled.  Each step consumes a fixed four-slot tuple of uniforms
(action selection, acceptance, ON observation, OFF fallback) plus one
reserved slot per agent for initial placement; unused slots are still
skipped so trajectories never depend on which branches earlier steps took.

Categorical sampling is inverse-CDF over cumulative column sums scanned in
index order with half-open intervals, so a draw exactly on a boundary
belongs to the next interval and zero-probability states are never chosen.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.random import Generator, Philox

from .chain import (
    DecisionPolicy,
    DimensionMismatch,
    EnvironmentModel,
    ProbVector,
    SingleActionPolicy,
    as_stochastic,
)

_MASK64 = (1 << 64) - 1
_COLUMN_STREAM_BASE = 1 << 48  # keeps estimator streams apart from agent streams

# Per-step draw slots, in consumption order.
SLOT_SELECT, SLOT_ACCEPT, SLOT_OBSERVE, SLOT_OFF = 0, 1, 2, 3
DRAWS_PER_STEP = 4


@dataclass(frozen=True)
class AgentState:
    """Snapshot of a single agent: where it is, what it last did, and which
    random stream it owns."""

    state_index: int
    mode_last: Optional[str] = None  # "on" | "off" | None before the first step
    rng_stream: int = 0

    def __post_init__(self):
        if self.state_index < 0:
            raise DimensionMismatch("state_index must be nonnegative")
        if self.mode_last not in (None, "on", "off"):
            raise ValueError(f"unknown mode {self.mode_last!r}")


@dataclass(frozen=True, eq=False)
class EnsembleConfig:
    num_agents: int
    horizon: int
    seed: int
    initial: ProbVector
    exact_counts: bool = True

    def __post_init__(self):
        if self.num_agents < 1 or self.horizon < 1:
            raise ValueError("need at least one agent and one step")


@dataclass(frozen=True, eq=False)
class DensityHistory:
    """Densities over time: row t is the distribution after t steps.

    ``std`` holds per-state standard-error estimates for empirical runs and
    is None for analytic propagation; ``num_agents`` likewise.
    """

    densities: np.ndarray
    std: Optional[np.ndarray] = None
    num_agents: Optional[int] = None

    def __post_init__(self):
        d = np.asarray(self.densities, dtype=float)
        if d.ndim != 2:
            raise DimensionMismatch("densities must be a (steps+1, n) array")
        for row in d:
            ProbVector(row)
        d = d.copy()
        d.flags.writeable = False
        object.__setattr__(self, "densities", d)
        if self.std is not None:
            s = np.asarray(self.std, dtype=float)
            if s.shape != d.shape:
                raise DimensionMismatch("std shape must match densities")
            s = s.copy()
            s.flags.writeable = False
            object.__setattr__(self, "std", s)

    @property
    def steps(self) -> int:
        return self.densities.shape[0] - 1

    @property
    def n(self) -> int:
        return self.densities.shape[1]

    def to_csv(self, path) -> None:
        """Write ``t,x1..xn[,s1..sn]`` rows, 10 significant digits."""
        n = self.n
        header = "t," + ",".join(f"x{i + 1}" for i in range(n))
        if self.std is not None:
            header += "," + ",".join(f"s{i + 1}" for i in range(n))
        lines = [header]
        for t, row in enumerate(self.densities):
            cells = [str(t)] + [f"{x:.10g}" for x in row]
            if self.std is not None:
                cells += [f"{s:.10g}" for s in self.std[t]]
            lines.append(",".join(cells))
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def _stream_uniforms(seed: int, stream_id: int, count: int) -> np.ndarray:
    key = np.array([seed & _MASK64, stream_id & _MASK64], dtype=np.uint64)
    return Generator(Philox(key=key)).random(count)


def categorical_index(cum: np.ndarray, u) -> np.ndarray:
    """Index of the half-open cumulative interval containing each draw."""
    u = np.asarray(u)
    idx = (cum <= u[..., np.newaxis]).sum(axis=-1)
    return np.minimum(idx, cum.shape[-1] - 1)


@dataclass(frozen=True, eq=False)
class _PolicyTables:
    sel_cum: np.ndarray  # (n, m) cumulative selection thresholds per state
    acc: np.ndarray  # (m, n, n) acceptance probabilities
    obs_cum: np.ndarray  # (m, n, n) per-column observation CDFs
    off_cum: np.ndarray  # (n, n) per-column OFF-mode CDF

    @property
    def n(self) -> int:
        return self.off_cum.shape[0]

    @property
    def m(self) -> int:
        return self.sel_cum.shape[1]


def _tables(policy: DecisionPolicy, env: EnvironmentModel) -> _PolicyTables:
    if policy.n != env.n or policy.m != env.m:
        raise DimensionMismatch("policy and environment sizes differ")
    sel_cum = np.cumsum(np.stack(policy.selection, axis=1), axis=1)
    acc = np.stack(policy.acceptance, axis=0)
    obs_cum = np.stack(
        [np.cumsum(np.maximum(g.entries, 0.0), axis=0) for g in env.on_actions]
    )
    off_cum = np.cumsum(np.maximum(env.off_action.entries, 0.0), axis=0)
    return _PolicyTables(sel_cum, acc, obs_cum, off_cum)


@dataclass(frozen=True, eq=False)
class BatchStep:
    next_state: np.ndarray  # (N,) int
    observed_action: np.ndarray  # (N,) int, -1 when no action was observed
    accepted: np.ndarray  # (N,) bool, True iff the step ended in ON mode


def _step_batch(states: np.ndarray, tables: _PolicyTables, draws: np.ndarray) -> BatchStep:
    n, m = tables.n, tables.m
    mu = draws[:, SLOT_SELECT]
    eta = draws[:, SLOT_ACCEPT]
    zeta = draws[:, SLOT_OBSERVE]
    zeta_off = draws[:, SLOT_OFF]

    chosen = (tables.sel_cum[states] <= mu[:, np.newaxis]).sum(axis=1)
    candidate = chosen < m
    next_state = np.empty(states.shape[0], dtype=np.int64)
    accepted = np.zeros(states.shape[0], dtype=bool)

    idx = np.flatnonzero(candidate)
    if idx.size:
        j = states[idx]
        k = chosen[idx]
        observed = categorical_index(tables.obs_cum[k, :, j], zeta[idx])
        ok = eta[idx] <= tables.acc[k, observed, j]
        accepted[idx[ok]] = True
        next_state[idx[ok]] = observed[ok]

    off = np.flatnonzero(~accepted)
    if off.size:
        next_state[off] = categorical_index(tables.off_cum[:, states[off]].T, zeta_off[off])
    return BatchStep(next_state, np.where(candidate, chosen, -1), accepted)


def step_agent_single(state: int, policy: SingleActionPolicy, g, draws) -> tuple:
    """One step of the single-action model.

    ``draws = (eta, zeta)``: the environment's proposed destination is drawn
    from column ``state`` of ``g`` with ``zeta``; the move is executed when
    ``eta <= K[destination, state]``, otherwise the agent stays put.
    Returns ``(mode, next_state)``.
    """
    g = as_stochastic(g)
    eta, zeta = draws
    cum = np.cumsum(np.maximum(g.entries[:, state], 0.0))
    observed = int(categorical_index(cum, np.asarray(zeta)))
    if eta <= policy.acceptance[observed, state]:
        return "on", observed
    return "off", state


def step_agent_general(state: int, policy: DecisionPolicy, env: EnvironmentModel, draws) -> tuple:
    """One step of the multi-action model.

    ``draws = (mu, eta, zeta, zeta_off)``: ``mu`` picks the action to
    observe through the per-state cumulative selection thresholds (past the
    last threshold means OFF with no observation), ``zeta`` draws the
    observed destination, ``eta`` decides acceptance, and ``zeta_off`` draws
    the OFF-mode transition whenever the step ends OFF.  Returns
    ``(mode, action, next_state)`` with ``action`` None in OFF mode.
    """
    tables = _tables(policy, env)
    step = _step_batch(
        np.array([state], dtype=np.int64),
        tables,
        np.asarray(draws, dtype=float).reshape(1, DRAWS_PER_STEP),
    )
    if step.accepted[0]:
        return "on", int(step.observed_action[0]), int(step.next_state[0])
    return "off", None, int(step.next_state[0])


def apportion_counts(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` items; ties go to the
    lower index."""
    exact = total * np.asarray(weights, dtype=float)
    counts = np.floor(exact).astype(np.int64)
    remainder = total - int(counts.sum())
    if remainder > 0:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def _resolve_threads(threads: Optional[int]) -> int:
    if threads is None:
        threads = int(os.environ.get("SAFEMC_THREADS", "1"))
    return max(1, threads)


def _chunk_counts(
    agent_lo: int,
    agent_hi: int,
    cfg: EnsembleConfig,
    tables: _PolicyTables,
    init_states: Optional[np.ndarray],
) -> np.ndarray:
    size = agent_hi - agent_lo
    horizon = cfg.horizon
    draws = np.empty((size, 1 + DRAWS_PER_STEP * horizon))
    for a in range(size):
        draws[a] = _stream_uniforms(cfg.seed, agent_lo + a, 1 + DRAWS_PER_STEP * horizon)
    if init_states is not None:
        states = init_states[agent_lo:agent_hi].copy()
    else:
        cum0 = np.cumsum(np.maximum(cfg.initial.entries, 0.0))
        states = categorical_index(cum0, draws[:, 0]).astype(np.int64)
    counts = np.zeros((horizon + 1, tables.n), dtype=np.int64)
    counts[0] = np.bincount(states, minlength=tables.n)
    for t in range(horizon):
        lo = 1 + DRAWS_PER_STEP * t
        states = _step_batch(states, tables, draws[:, lo : lo + DRAWS_PER_STEP]).next_state
        counts[t + 1] = np.bincount(states, minlength=tables.n)
    return counts


def run_ensemble(
    cfg: EnsembleConfig,
    policy: DecisionPolicy,
    env: EnvironmentModel,
    threads: Optional[int] = None,
) -> DensityHistory:
    """Step every agent through the policy and record empirical densities.

    Deterministic given (seed, num_agents, horizon) under any thread count:
    agents own their streams and counts are reduced in fixed agent order.
    ``threads`` defaults to the SAFEMC_THREADS environment variable (1 when
    unset); agents are independent, so chunks parallelize trivially.
    """
    tables = _tables(policy, env)
    if cfg.initial.dim != env.n:
        raise DimensionMismatch("initial distribution size differs from environment")
    init_states = None
    if cfg.exact_counts:
        counts0 = apportion_counts(cfg.num_agents, cfg.initial.entries)
        init_states = np.repeat(np.arange(env.n), counts0)
    threads = _resolve_threads(threads)
    bounds = np.linspace(0, cfg.num_agents, threads + 1).astype(int)
    chunks = [(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    if len(chunks) == 1:
        totals = _chunk_counts(0, cfg.num_agents, cfg, tables, init_states)
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(
                pool.map(lambda c: _chunk_counts(c[0], c[1], cfg, tables, init_states), chunks)
            )
        totals = np.sum(parts, axis=0)
    densities = totals / float(cfg.num_agents)
    std = np.sqrt(densities * (1.0 - densities) / cfg.num_agents)
    return DensityHistory(densities, std, cfg.num_agents)


def propagate_analytic(m, x0, t_max: int) -> DensityHistory:
    """Exact density evolution ``x(t+1) = M x(t)``.

    Each iterate is renormalized by its own sum (a no-op up to rounding for
    a stochastic matrix) so long horizons cannot drift off the simplex.
    """
    m = as_stochastic(m)
    x = ProbVector(np.asarray(x0, dtype=float) if not isinstance(x0, ProbVector) else x0.entries)
    out = np.empty((t_max + 1, m.n))
    out[0] = x.entries
    for t in range(t_max):
        nxt = m.entries @ out[t]
        out[t + 1] = nxt / nxt.sum()
    return DensityHistory(out)


def sample_transitions(
    policy: DecisionPolicy,
    env: EnvironmentModel,
    state: int,
    samples: int,
    seed: int,
    stream_id: Optional[int] = None,
) -> BatchStep:
    """Draw independent single steps from one start state."""
    tables = _tables(policy, env)
    sid = _COLUMN_STREAM_BASE + state if stream_id is None else stream_id
    draws = _stream_uniforms(seed, sid, samples * DRAWS_PER_STEP).reshape(
        samples, DRAWS_PER_STEP
    )
    states = np.full(samples, state, dtype=np.int64)
    return _step_batch(states, tables, draws)


def estimate_transition_matrix(
    policy: DecisionPolicy,
    env: EnvironmentModel,
    samples_per_column: int,
    seed: int,
) -> tuple:
    """Empirical transition matrix of a policy, column by column.

    Returns ``(m_hat, stderr)`` where ``stderr`` is the per-entry binomial
    standard error of the estimated frequencies.
    """
    if samples_per_column < 1:
        raise ValueError("need at least one sample per column")
    n = env.n
    m_hat = np.empty((n, n))
    for j in range(n):
        step = sample_transitions(policy, env, j, samples_per_column, seed)
        m_hat[:, j] = np.bincount(step.next_state, minlength=n) / samples_per_column
    stderr = np.sqrt(m_hat * (1.0 - m_hat) / samples_per_column)
    return m_hat, stderr
