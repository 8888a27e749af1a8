"""Command-line interface.

Subcommands: ``synth`` (policy synthesis), ``simulate`` (ensemble run),
``verify`` (check a policy against its problem), ``demo-paper`` (end-to-end
run of the bundled 8-bin example) and ``rates`` (decay-rate line search).

Exit codes: 0 success, 1 verification failure, 2 input error, 3 solver
failure.  Errors are emitted as a JSON object on stderr.
"""

import functools
import json
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import data as bundled
from .chain import ChainError, compose_multi, budget_ok, policy_to_plan
from .files import (
    ParseError,
    ParsedProblem,
    canonical_json,
    parse_policy,
    parse_problem,
    parse_problem_dict,
    policy_to_dict,
)
from .plots import render_density_tubes
from .simulate import EnsembleConfig, propagate_analytic, run_ensemble
from .solver import (
    SolveOptions,
    SolverFailure,
    ValidationFailure,
    feasibility_oracle,
    recover_and_validate,
    solve,
)
from .synthesis import (
    Connectivity,
    DecayLMI,
    InfeasibleAtUpper,
    InfeasibleByStructure,
    Reversible,
    SynthesisError,
    build_program,
    connectivity_floor_mask,
    line_search_lambda,
    permitted_mask,
    _l_expr,
)
from .program import AffineExpr, VarBlock
from . import verify as checks


def _fail(code: int, err_type: str, message: str, **extra):
    click.echo(json.dumps({"error": {"type": err_type, "message": message, **extra}}), err=True)
    sys.exit(code)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ParseError as err:
            _fail(2, type(err).__name__, str(err), pointer=err.pointer)
        except (ChainError, SynthesisError, InfeasibleByStructure) as err:
            _fail(2, type(err).__name__, str(err))
        except (SolverFailure, ValidationFailure, InfeasibleAtUpper) as err:
            _fail(3, type(err).__name__, str(err))
        except OSError as err:
            _fail(2, type(err).__name__, str(err))

    return wrapper


@click.group()
@click.version_option(package_name="safemc")
def main():
    """Safe convergent chain policies for ON/OFF agents."""


def _synthesize(parsed: ParsedProblem, rate: str, tol):
    """Solve a parsed problem; optionally fall back to the smallest feasible
    decay rate when the requested one is infeasible."""
    options = parsed.solver_options if tol is None else replace(parsed.solver_options, tol=tol)
    spec = parsed.spec
    metadata = {"problem_sha256": parsed.digest}
    if rate not in ("file", "auto"):
        spec = replace(spec, ergodicity=replace(spec.ergodicity, decay=float(rate)))
    requested = getattr(spec.ergodicity, "decay", None)
    if requested is not None:
        metadata["requested_rate"] = requested
    sol = solve(build_program(spec), options)
    if (
        not sol.is_feasible
        and rate == "auto"
        and isinstance(spec.ergodicity, (DecayLMI, Reversible))
    ):
        lam = line_search_lambda(spec, requested, 0.999, 1e-3, feasibility_oracle(options))
        spec = replace(spec, ergodicity=replace(spec.ergodicity, decay=lam))
        sol = solve(build_program(spec), options)
        metadata["achieved_rate"] = lam
        click.echo(
            f"requested rate {requested} infeasible; line search found {lam:.4f}", err=True
        )
    elif requested is not None:
        metadata["achieved_rate"] = requested
    if not sol.is_feasible:
        raise SolverFailure(f"synthesis {sol.status.value}: {sol.diagnostics}")
    result = recover_and_validate(spec, sol, tol=1e-6)
    metadata["solver"] = sol.stats.to_json_dict()
    metadata["objective_value"] = sol.objective_value
    return spec, result, metadata


@main.command()
@click.argument("problem", type=click.Path())
@click.option("-o", "--output", default="policy.json", show_default=True)
@click.option("--rate", default="file", show_default=True, help="'file', 'auto', or a number")
@click.option("--tol", type=float, default=None, help="override solver tolerance")
@click.option("--dump-program", type=click.Path(), default=None, help="write the conic program as sparse-triplet JSON")
@_guarded
def synth(problem, output, rate, tol, dump_program):
    """Synthesize a decision policy for a problem file."""
    parsed = parse_problem(problem)
    if dump_program:
        with open(dump_program, "w", newline="\n") as fh:
            fh.write(canonical_json(build_program(parsed.spec).to_json_dict()) + "\n")
    spec, result, metadata = _synthesize(parsed, rate, tol)
    with open(output, "w", newline="\n") as fh:
        fh.write(canonical_json(policy_to_dict(result, metadata)) + "\n")
    click.echo(json.dumps({
        "status": "ok",
        "output": output,
        "achieved_rate": metadata.get("achieved_rate"),
        "objective_value": metadata.get("objective_value"),
    }))


@main.command()
@click.argument("policy", type=click.Path())
@click.argument("problem", type=click.Path())
@click.option("-o", "--output", default="density.csv", show_default=True)
@click.option("--seed", type=int, default=None, help="override the file's seed")
@click.option("--agents", type=int, default=None)
@click.option("--horizon", type=int, default=None)
@click.option("--plot", type=click.Path(), default=None, help="also render the density figure")
@_guarded
def simulate(policy, problem, output, seed, agents, horizon, plot):
    """Run a Monte Carlo ensemble of a synthesized policy."""
    parsed = parse_problem(problem)
    bundle = parse_policy(policy)
    cfg = parsed.simulation
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if agents is not None:
        cfg = replace(cfg, num_agents=agents)
    if horizon is not None:
        cfg = replace(cfg, horizon=horizon)
    hist = run_ensemble(cfg, bundle.policy, parsed.spec.env)
    hist.to_csv(output)
    if plot:
        analytic = propagate_analytic(bundle.chain, cfg.initial, cfg.horizon)
        cap = _density_cap(parsed)
        render_density_tubes(plot, analytic, hist, target=parsed.spec.target.entries, cap=cap)
    click.echo(json.dumps({"status": "ok", "output": output, "agents": cfg.num_agents,
                           "horizon": cfg.horizon, "seed": cfg.seed}))


def _density_cap(parsed: ParsedProblem):
    for s in parsed.spec.safety:
        if s.L_coeff == "plus_m" and np.array_equal(s.cap, s.bound):
            return s.cap
    return None


def _policy_checks(bundle_doc: dict, parsed: ParsedProblem, tol: float) -> list:
    """Every invariant a policy file must satisfy against its problem,
    reported as one record per named check."""
    spec = parsed.spec
    n, m = spec.n, spec.m
    out = []

    def rec(name, residual, threshold, note=""):
        residual = float(residual)
        out.append({
            "check": name, "pass": bool(residual <= threshold),
            "residual": residual, "threshold": threshold, "note": note,
        })

    alpha = [np.asarray(a, dtype=float) for a in bundle_doc["alpha"]]
    q_list = [np.asarray(q, dtype=float) for q in bundle_doc["Q"]]
    p_list = [np.asarray(p, dtype=float) for p in bundle_doc["P"]]
    chain = np.asarray(bundle_doc["M"], dtype=float)
    if len(alpha) != m or any(a.shape != (n,) for a in alpha):
        raise ParseError("selection probabilities have the wrong shape", "/alpha")
    if any(q.shape != (n, n) for q in q_list) or any(p.shape != (n, n) for p in p_list):
        raise ParseError("policy matrices have the wrong shape", "/Q")
    if chain.shape != (n, n):
        raise ParseError("chain has the wrong shape", "/M")

    rec("selection_bounds", max(0.0, max(max(-a.min(), a.max() - 1.0) for a in alpha)), tol)
    rec("selection_budget", max(0.0, float(np.sum(alpha, axis=0).max()) - 1.0), tol)
    rec("acceptance_bounds", max(0.0, max(max(-q.min(), q.max() - 1.0) for q in q_list)), tol)
    rec(
        "plan_consistency",
        max(float(np.abs(q * a[np.newaxis, :] - p).max()) for q, a, p in zip(q_list, alpha, p_list)),
        1e-9,
        "P must equal Q scaled columnwise by alpha",
    )
    rec("plan_budget", max(0.0, float(np.sum([p.max(axis=0) for p in p_list], axis=0).max()) - 1.0), 1e-9)
    composed = compose_multi(spec.env, tuple(np.clip(p, 0.0, 1.0) for p in p_list)).entries
    rec("chain_composition", np.abs(chain - composed).max(), max(tol, 1e-8))
    rec("chain_column_sums", np.abs(chain.sum(axis=0) - 1.0).max(), 1e-9)
    rec("chain_nonnegative", max(0.0, -chain.min()), 1e-12)
    forbidden = ~permitted_mask(spec.adjacency)
    rec("forbidden_transitions", np.abs(chain[forbidden]).max() if forbidden.any() else 0.0, 1e-12)
    v = spec.target.entries
    rec("stationary_target", np.abs(chain @ v - v).max(), tol)

    metadata = bundle_doc.get("metadata", {})
    certificates = metadata.get("certificates", [])
    for idx, sspec in enumerate(spec.safety):
        l_val = _l_expr(sspec, AffineExpr.variable(VarBlock("M", (n, n)))).evaluate({"M": chain})
        report = checks.safety_oracle(l_val, sspec.cap, sspec.bound)
        rec(f"safety{idx}_oracle", max(0.0, -float(report.margin.min())), 1e-9)
        if idx < len(certificates):
            cert = certificates[idx]
            rec(
                f"safety{idx}_certificate",
                checks.certificate_residual(
                    l_val, sspec.cap, sspec.bound,
                    np.asarray(cert["S"], dtype=float), np.asarray(cert["y"], dtype=float),
                ),
                tol,
            )

    mode = spec.ergodicity
    rate = metadata.get("achieved_rate", getattr(mode, "decay", None))
    if isinstance(mode, DecayLMI) and "lyapunov" in metadata:
        lyap = np.asarray(metadata["lyapunov"], dtype=float)
        conv = checks.contraction_check(chain, v, lyap, rate, trials=100)
        rec("decay_contraction", float(conv.violations), 0.0,
            f"max squared ratio {conv.lyapunov_ratio_max:.6f} vs rate^2 {rate ** 2:.6f}")
    elif isinstance(mode, Reversible):
        rec("detailed_balance", checks.detailed_balance_residual(chain, v), 1e-8)
        h = np.sqrt(v)
        sandwich = np.diag(1.0 / h) @ chain @ np.diag(h) - np.outer(h, h)
        radius = float(np.abs(np.linalg.eigvalsh((sandwich + sandwich.T) / 2.0)).max())
        rec("spectral_radius", max(0.0, radius - rate), tol)
    elif isinstance(mode, Connectivity):
        mask = connectivity_floor_mask(spec.adjacency, spec.env)
        shortfall = max(0.0, mode.epsilon - float(chain[mask].min())) if mask.any() else 0.0
        rec("connectivity_floor", shortfall, 1e-9)
    if v.min() > 0.0:
        rec("strong_connectivity", 0.0 if checks.connectivity_check(chain > 0.0) else 1.0, 0.0)
    return out


def _load_policy_doc(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as err:
        raise ParseError(f"cannot read policy file: {err}") from err
    except json.JSONDecodeError as err:
        raise ParseError(f"invalid JSON: {err}") from err
    if doc.get("convention") != "column_stochastic":
        raise ParseError('file must declare "convention": "column_stochastic"', "/convention")
    for key in ("alpha", "Q", "P", "M"):
        if key not in doc:
            raise ParseError(f"missing required field {key!r}", "/" + key)
    return doc


@main.command()
@click.argument("policy", type=click.Path())
@click.argument("problem", type=click.Path())
@click.option("--tol", type=float, default=1e-6, show_default=True)
@_guarded
def verify(policy, problem, tol):
    """Check a policy file against its problem; exit 0 iff all checks pass."""
    parsed = parse_problem(problem)
    doc = _load_policy_doc(policy)
    results = _policy_checks(doc, parsed, tol)
    ok = all(r["pass"] for r in results)
    click.echo(json.dumps({"pass": ok, "checks": results}, indent=1))
    sys.exit(0 if ok else 1)


@main.command()
@click.argument("problem", type=click.Path())
@click.option("--lo", type=float, default=0.0, show_default=True)
@click.option("--hi", type=float, default=0.999, show_default=True)
@click.option("--tol", type=float, default=1e-3, show_default=True)
@_guarded
def rates(problem, lo, hi, tol):
    """Line-search the smallest certifiable decay rate of a problem."""
    parsed = parse_problem(problem)
    lam = line_search_lambda(
        parsed.spec, lo, hi, tol, feasibility_oracle(parsed.solver_options)
    )
    click.echo(json.dumps({"lambda_star": lam, "tol": tol}))


@main.command(name="demo-paper")
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--out", type=click.Path(), default="safemc-demo", show_default=True)
@click.option("--agents", type=int, default=None, help="override the bundled agent count")
@click.option("--horizon", type=int, default=None, help="override the bundled horizon")
@click.option("--rate", default="auto", show_default=True,
              help="'file' solves the bundled rate exactly; 'auto' falls back to the smallest feasible rate")
@click.option("--figures/--no-figures", default=True, show_default=True)
@_guarded
def demo_paper(seed, out, agents, horizon, rate, figures):
    """Synthesize, simulate and verify the bundled 8-bin swarm example."""
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    parsed = parse_problem_dict(bundled.load_paper_problem())
    spec, result, metadata = _synthesize(parsed, rate, None)

    policy_path = outdir / "policy.json"
    with open(policy_path, "w", newline="\n") as fh:
        fh.write(canonical_json(policy_to_dict(result, metadata)) + "\n")

    cfg = replace(parsed.simulation, seed=seed)
    if agents is not None:
        cfg = replace(cfg, num_agents=agents)
    if horizon is not None:
        cfg = replace(cfg, horizon=horizon)
    hist = run_ensemble(cfg, result.policy, spec.env)
    hist.to_csv(outdir / "density.csv")
    analytic = propagate_analytic(result.chain, cfg.initial, cfg.horizon)
    analytic.to_csv(outdir / "analytic.csv")

    cap = _density_cap(parsed)
    mc = checks.compare_mc_analytic(hist, result.chain, cfg.initial, cap=cap)
    conv = checks.contraction_check(
        result.chain, spec.target.entries, result.lyapunov,
        metadata.get("achieved_rate"), trials=100, x0=cfg.initial,
    )
    static = _policy_checks(json.loads(canonical_json(policy_to_dict(result, metadata))), parsed, 1e-6)
    extra = [
        {"check": "band_coverage", "pass": mc.band_fraction >= 0.99,
         "residual": 1.0 - mc.band_fraction, "threshold": 0.01,
         "note": f"{mc.inside_band}/{mc.total} (step, state) pairs inside 3 sigma"},
        mc.to_json_dict(),
        conv.to_json_dict(),
        {"check": "convergence_time", "pass": conv.t_star is not None,
         "residual": 0.0 if conv.t_star is not None else 1.0, "threshold": 0.0,
         "note": f"t_star = {conv.t_star}"},
    ]
    report = {
        "pass": all(r["pass"] for r in static + extra),
        "seed": cfg.seed,
        "achieved_rate": metadata.get("achieved_rate"),
        "requested_rate": metadata.get("requested_rate"),
        "checks": static + extra,
    }
    with open(outdir / "report.json", "w", newline="\n") as fh:
        fh.write(canonical_json(report) + "\n")
    if figures:
        render_density_tubes(
            outdir / "density.png", analytic, hist, target=spec.target.entries, cap=cap
        )
    click.echo(json.dumps({
        "pass": report["pass"],
        "out": str(outdir),
        "achieved_rate": metadata.get("achieved_rate"),
        "t_star": conv.t_star,
        "band_fraction": mc.band_fraction,
    }, indent=1))
    sys.exit(0 if report["pass"] else 1)


if __name__ == "__main__":
    main()
