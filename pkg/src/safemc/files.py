"""Problem and policy file formats.

Matrices are stored as row-major arrays of rows under the column-stochastic
semantic: ``G[i][j]`` is the probability of observing a move to state ``i``
from state ``j``.  Because a silent transpose is the most likely integration
bug, every file must carry a top-level ``"convention": "column_stochastic"``
field and is rejected otherwise.  Parse errors carry a JSON-pointer-style
``pointer`` to the offending field.
"""

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .chain import (
    AcceptancePlan,
    AdjacencyMatrix,
    ChainError,
    ColumnStochasticMatrix,
    ColumnSumViolation,
    DecisionPolicy,
    EnvironmentModel,
    NegativeEntry,
    ProbVector,
    policy_to_plan,
)
from .simulate import EnsembleConfig
from .solver import SolveOptions, SynthesisResult
from .synthesis import Connectivity, DecayLMI, Reversible, SafetySpec, SynthesisSpec

CONVENTION = "column_stochastic"


class ParseError(ValueError):
    def __init__(self, message: str, pointer: str = ""):
        self.pointer = pointer
        super().__init__(f"{pointer}: {message}" if pointer else message)


class DimensionError(ParseError):
    pass


class StochasticityError(ParseError):
    pass


@dataclass(frozen=True, eq=False)
class ParsedProblem:
    spec: SynthesisSpec
    simulation: EnsembleConfig
    solver_options: SolveOptions
    raw: dict
    digest: str  # sha256 of the canonical problem document


@dataclass(frozen=True, eq=False)
class PolicyBundle:
    policy: DecisionPolicy
    plan: AcceptancePlan
    chain: ColumnStochasticMatrix
    metadata: dict
    raw: dict


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1)


def _require(doc: dict, key: str, pointer: str = ""):
    if key not in doc:
        raise ParseError(f"missing required field {key!r}", pointer + "/" + key)
    return doc[key]


def _matrix(doc, n: int, pointer: str) -> np.ndarray:
    arr = np.asarray(doc, dtype=float)
    if arr.shape != (n, n):
        raise DimensionError(f"expected an {n}x{n} matrix, got shape {arr.shape}", pointer)
    return arr


def _vector(doc, n: int, pointer: str) -> np.ndarray:
    arr = np.asarray(doc, dtype=float)
    if arr.shape != (n,):
        raise DimensionError(f"expected a length-{n} vector, got shape {arr.shape}", pointer)
    return arr


def _stochastic(doc, n: int, pointer: str, renormalize: bool) -> ColumnStochasticMatrix:
    arr = _matrix(doc, n, pointer)
    if renormalize:
        sums = arr.sum(axis=0)
        if sums.min() <= 0.0:
            raise StochasticityError("column with nonpositive sum cannot be renormalized", pointer)
        arr = arr / sums
    try:
        return ColumnStochasticMatrix(arr, tol=1e-9)
    except (NegativeEntry, ColumnSumViolation) as err:
        raise StochasticityError(str(err), pointer) from err


def _parse_safety(doc, n: int, pointer: str) -> SafetySpec:
    kind = _require(doc, "kind", pointer)
    try:
        if kind == "density_upper":
            return SafetySpec.density_upper(_vector(_require(doc, "d", pointer), n, pointer + "/d"))
        if kind == "density_rate":
            f = _vector(_require(doc, "f", pointer), n, pointer + "/f")
            box = _vector(_require(doc, "d", pointer), n, pointer + "/d")
            return SafetySpec.density_rate(f, box)
        if kind == "general":
            L = np.asarray(_require(doc, "L", pointer), dtype=float)
            cap = _vector(_require(doc, "cap", pointer), n, pointer + "/cap")
            bound = np.asarray(_require(doc, "bound", pointer), dtype=float)
            return SafetySpec.general(L, cap, bound)
    except ChainError as err:
        raise ParseError(str(err), pointer) from err
    except ValueError as err:
        raise ParseError(str(err), pointer) from err
    raise ParseError(f"unknown safety kind {kind!r}", pointer + "/kind")


def _parse_ergodicity(doc, n: int, pointer: str):
    mode = _require(doc, "mode", pointer)
    if mode == "decay_lmi":
        decay = float(_require(doc, "lambda", pointer))
        weight = doc.get("F", "diag_v_inv")
        if weight == "diag_v_inv":
            return DecayLMI(decay)
        return DecayLMI(decay, _matrix(weight, n, pointer + "/F"))
    if mode == "reversible":
        return Reversible(float(_require(doc, "lambda", pointer)))
    if mode == "connectivity":
        return Connectivity(float(doc.get("epsilon", 1e-6)))
    raise ParseError(f"unknown ergodicity mode {mode!r}", pointer + "/mode")


def parse_problem_dict(doc: dict) -> ParsedProblem:
    if not isinstance(doc, dict):
        raise ParseError("problem document must be a JSON object")
    if doc.get("convention") != CONVENTION:
        raise ParseError(
            f"file must declare \"convention\": \"{CONVENTION}\" (matrices are "
            "arrays of rows with columns indexing the current state)",
            "/convention",
        )
    n = int(_require(doc, "n"))
    m = int(_require(doc, "m"))
    renormalize = bool(doc.get("renormalize", False))
    g_docs = _require(doc, "G")
    if len(g_docs) != m:
        raise DimensionError(f"expected {m} matrices, got {len(g_docs)}", "/G")
    on_actions = tuple(
        _stochastic(g, n, f"/G/{k}", renormalize) for k, g in enumerate(g_docs)
    )
    off_action = _stochastic(_require(doc, "G_off"), n, "/G_off", renormalize)
    try:
        adjacency = AdjacencyMatrix(_matrix(_require(doc, "A_a"), n, "/A_a"))
    except ChainError as err:
        raise ParseError(str(err), "/A_a") from err
    try:
        target = ProbVector(_vector(_require(doc, "v"), n, "/v"), tol=1e-9)
    except ChainError as err:
        raise StochasticityError(str(err), "/v") from err
    try:
        x0 = ProbVector(_vector(_require(doc, "x0"), n, "/x0"), tol=1e-9)
    except ChainError as err:
        raise StochasticityError(str(err), "/x0") from err
    safety = tuple(
        _parse_safety(s, n, f"/safety/{i}") for i, s in enumerate(doc.get("safety", []))
    )
    ergodicity = _parse_ergodicity(_require(doc, "ergodicity"), n, "/ergodicity")
    try:
        env = EnvironmentModel(on_actions, off_action)
        spec = SynthesisSpec(env, adjacency, target, safety, ergodicity)
    except (ChainError, ValueError) as err:
        raise ParseError(str(err)) from err

    sim_doc = doc.get("simulation", {})
    simulation = EnsembleConfig(
        num_agents=int(sim_doc.get("num_agents", 1000)),
        horizon=int(sim_doc.get("horizon", 100)),
        seed=int(sim_doc.get("seed", 0)),
        initial=x0,
        exact_counts=bool(sim_doc.get("exact_counts", True)),
    )
    sol_doc = doc.get("solver", {})
    solver_options = SolveOptions(
        tol=float(sol_doc.get("tol", 1e-8)),
        max_iter=sol_doc.get("max_iter"),
        time_limit=sol_doc.get("time_limit"),
        solver=sol_doc.get("solver", "CLARABEL"),
    )
    digest = hashlib.sha256(canonical_json(doc).encode()).hexdigest()
    return ParsedProblem(spec, simulation, solver_options, doc, digest)


def parse_problem(path) -> ParsedProblem:
    """Load and fully validate a problem file."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as err:
        raise ParseError(f"cannot read problem file: {err}") from err
    except json.JSONDecodeError as err:
        raise ParseError(f"invalid JSON: {err}") from err
    return parse_problem_dict(doc)


def problem_to_dict(
    spec: SynthesisSpec,
    simulation: Optional[EnsembleConfig] = None,
    solver_options: Optional[SolveOptions] = None,
    x0: Optional[np.ndarray] = None,
) -> dict:
    """Serialize a spec back to the document form (canonical field set)."""
    doc = {
        "convention": CONVENTION,
        "n": spec.n,
        "m": spec.m,
        "renormalize": False,
        "G": [g.entries.tolist() for g in spec.env.on_actions],
        "G_off": spec.env.off_action.entries.tolist(),
        "A_a": spec.adjacency.entries.astype(int).tolist(),
        "v": spec.target.entries.tolist(),
        "safety": [],
        "ergodicity": {},
    }
    if simulation is not None:
        x0 = simulation.initial.entries
        doc["simulation"] = {
            "num_agents": simulation.num_agents,
            "horizon": simulation.horizon,
            "seed": simulation.seed,
            "exact_counts": simulation.exact_counts,
        }
    doc["x0"] = (x0 if x0 is not None else spec.target.entries).tolist()
    for s in spec.safety:
        if s.L_coeff == "plus_m" and not s.L_const.any() and np.array_equal(s.cap, s.bound):
            doc["safety"].append({"kind": "density_upper", "d": s.cap.tolist()})
        elif s.L_coeff == "rate_stack":
            doc["safety"].append(
                {"kind": "density_rate", "f": s.bound[: spec.n].tolist(), "d": s.cap.tolist()}
            )
        else:
            doc["safety"].append(
                {
                    "kind": "general",
                    "L": s.L_const.tolist(),
                    "cap": s.cap.tolist(),
                    "bound": s.bound.tolist(),
                }
            )
    mode = spec.ergodicity
    if isinstance(mode, DecayLMI):
        doc["ergodicity"] = {"mode": "decay_lmi", "lambda": mode.decay}
        if mode.weight is not None:
            doc["ergodicity"]["F"] = np.asarray(mode.weight).tolist()
    elif isinstance(mode, Reversible):
        doc["ergodicity"] = {"mode": "reversible", "lambda": mode.decay}
    else:
        doc["ergodicity"] = {"mode": "connectivity", "epsilon": mode.epsilon}
    if solver_options is not None:
        doc["solver"] = {
            "tol": solver_options.tol,
            "max_iter": solver_options.max_iter,
            "time_limit": solver_options.time_limit,
            "solver": solver_options.solver,
        }
    return doc


def write_problem(path, spec, simulation=None, solver_options=None) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(canonical_json(problem_to_dict(spec, simulation, solver_options)) + "\n")


def policy_to_dict(result: SynthesisResult, metadata: Optional[dict] = None) -> dict:
    doc = {
        "convention": CONVENTION,
        "alpha": [a.tolist() for a in result.policy.selection],
        "Q": [q.tolist() for q in result.policy.acceptance],
        "P": [p.tolist() for p in result.plan.matrices],
        "M": result.chain.entries.tolist(),
        "metadata": dict(metadata or {}),
    }
    doc["metadata"]["report"] = result.report_json()
    doc["metadata"]["certificates"] = [
        {"S": s.tolist(), "y": y.tolist()} for s, y in result.certificates
    ]
    if result.lyapunov is not None:
        doc["metadata"]["lyapunov"] = result.lyapunov.tolist()
    return doc


def write_policy(path, result: SynthesisResult, metadata: Optional[dict] = None) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(canonical_json(policy_to_dict(result, metadata)) + "\n")


def parse_policy(path) -> PolicyBundle:
    """Load a policy file and check its internal consistency.

    The plan must be the product of acceptance and selection probabilities;
    the chain consistency against a problem's environment is checked by the
    CLI verify step, which has both files.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as err:
        raise ParseError(f"cannot read policy file: {err}") from err
    except json.JSONDecodeError as err:
        raise ParseError(f"invalid JSON: {err}") from err
    if doc.get("convention") != CONVENTION:
        raise ParseError(f"file must declare \"convention\": \"{CONVENTION}\"", "/convention")
    try:
        alpha = [np.asarray(a, dtype=float) for a in _require(doc, "alpha")]
        q_list = [np.asarray(q, dtype=float) for q in _require(doc, "Q")]
        policy = DecisionPolicy(tuple(alpha), tuple(q_list))
        plan = AcceptancePlan(tuple(np.asarray(p, dtype=float) for p in _require(doc, "P")))
        chain = ColumnStochasticMatrix(
            np.asarray(_require(doc, "M"), dtype=float), tol=1e-9
        )
    except ChainError as err:
        raise ParseError(str(err)) from err
    recombined = policy_to_plan(policy)
    dev = max(
        float(np.abs(p - q).max()) for p, q in zip(recombined.matrices, plan.matrices)
    )
    if dev > 1e-9:
        raise ParseError(
            f"P does not equal Q scaled by alpha (max deviation {dev:.3e})", "/P"
        )
    return PolicyBundle(policy, plan, chain, doc.get("metadata", {}), doc)
