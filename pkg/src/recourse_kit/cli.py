"""Command-line workflows: generation, checks, restoration, solving, certification.

Exit codes: 0 pass, 2 check failed, 3 infeasible point/system, 4 usage or
schema error. Set ``RECOURSE_KIT_LOG`` to a level name (DEBUG, INFO, ...) for
diagnostics on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .errors import (InfeasibleNodeError, InfeasiblePointError, RestorationError, SchemaError)
from .instances import (GeneratorSpec, ProblemInstanceFile, canonical_json, generate,
                        parse_instance, policy_from_json, policy_to_json, random_policy,
                        serialize_instance)
from .optimality import (KktOptions, MultiplierCertificate, kkt_residual_builtin,
                         kkt_residual_explicit, recover_multipliers, reduce_multipliers)
from .penalty import phi
from .recourse import estimate_recourse_constant, restore_builtin, restore_relaxed
from .solvers import brute_force_solve, penalty_solve, total_decision_dim
from .causal import fd_check_jacobian
from .tree import inner_product, lp_norm

log = logging.getLogger("recourse_kit")

EXIT_OK = 0
EXIT_CHECK_FAILED = 2
EXIT_INFEASIBLE = 3
EXIT_USAGE = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _emit(report_dict, args):
    text = canonical_json(report_dict)
    if getattr(args, "out", None):
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.write("\n")
    if getattr(args, "format", "text") == "json":
        print(text)
    else:
        for key, val in report_dict.items():
            print(f"{key}: {json.dumps(val) if isinstance(val, (dict, list)) else val}")


def _load(args):
    pif = parse_instance(args.instance)
    return pif


def _policy_arg(args, pif, mode="builtin", seed=None):
    if getattr(args, "policy", None):
        with open(args.policy, "r", encoding="utf-8") as fh:
            return policy_from_json(pif.instance.tree, json.load(fh))
    if pif.policy is not None:
        return pif.policy if mode == "builtin" else pif.policy.lift()
    rng = np.random.default_rng(seed if seed is not None else getattr(args, "seed", 0))
    return random_policy(pif.instance.tree, pif.instance.n, mode, rng)


def cmd_gen(args):
    branching = tuple(int(b) for b in args.branching.split(",")) if args.branching else (2, 2)
    spec = GeneratorSpec(seed=args.seed, stages=len(branching) + 1, branching=branching,
                         n=args.n, m=args.m, operator_family=args.operator_family,
                         set_family=args.set_family, objective_family=args.objective_family,
                         recourse_friendly=not args.no_recourse_friendly)
    pif = generate(spec)
    text = serialize_instance(pif, args.out)
    if not args.out:
        print(text)
    return EXIT_OK


def cmd_check_jacobian(args):
    pif = _load(args)
    inst = pif.instance
    x = _policy_arg(args, pif)
    rng = np.random.default_rng(args.seed)
    dirs = [random_policy(inst.tree, inst.n, "builtin", rng, radius=1.0) for _ in range(args.directions)]
    report = fd_check_jacobian(inst.operator, x, dirs)
    _emit(report.to_json_dict(), args)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_check_adjoint(args):
    pif = _load(args)
    inst = pif.instance
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for mode in ("builtin", "relaxed"):
        for _ in range(args.samples):
            x = random_policy(inst.tree, inst.n, mode, rng)
            h = random_policy(inst.tree, inst.n, mode, rng)
            psi = random_policy(inst.tree, inst.m, mode, rng)
            lhs = inner_product(psi, inst.operator.apply_jacobian(x, h))
            rhs = inner_product(inst.operator.apply_adjoint(x, psi), h)
            worst = max(worst, abs(lhs - rhs))
    report = {"max_pairing_error": worst, "tolerance": args.tol, "samples": args.samples,
              "seed": args.seed, "passed": worst <= args.tol}
    _emit(report, args)
    return EXIT_OK if report["passed"] else EXIT_CHECK_FAILED


def cmd_restore(args):
    pif = _load(args)
    inst = pif.instance
    x = _policy_arg(args, pif, mode=args.mode)
    try:
        rep = restore_builtin(inst, x) if args.mode == "builtin" else restore_relaxed(inst, x)
    except (InfeasibleNodeError, RestorationError) as err:
        _emit({"error": str(err)}, args)
        return EXIT_INFEASIBLE
    d = rep.to_json_dict()
    d["restored_policy"] = policy_to_json(rep.restored)
    _emit(d, args)
    return EXIT_OK if rep.bound_ok else EXIT_CHECK_FAILED


def cmd_estimate_c(args):
    pif = _load(args)
    try:
        c = estimate_recourse_constant(pif.instance, n_samples=args.samples, seed=args.seed)
    except InfeasibleNodeError as err:
        _emit({"error": str(err)}, args)
        return EXIT_INFEASIBLE
    _emit({"recourse_c": c, "samples": args.samples, "seed": args.seed}, args)
    return EXIT_OK


def cmd_verify_kkt(args):
    pif = _load(args)
    inst = pif.instance
    if args.certificate:
        with open(args.certificate, "r", encoding="utf-8") as fh:
            cert = MultiplierCertificate.from_json_dict(inst.tree, json.load(fh), inst.n, inst.m)
    elif pif.certificate is not None:
        cert = pif.certificate
    else:
        raise _UsageError("no certificate given (embed one or pass --certificate)")
    x = _policy_arg(args, pif, mode="builtin" if cert.mode == "builtin" else "relaxed")
    options = KktOptions(stationarity_tol=args.tol)
    checker = kkt_residual_builtin if cert.mode == "builtin" else kkt_residual_explicit
    try:
        report = checker(inst, x, cert, options)
    except InfeasiblePointError as err:
        _emit({"error": str(err)}, args)
        return EXIT_INFEASIBLE
    _emit(report.to_json_dict(), args)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_solve(args):
    pif = _load(args)
    inst = pif.instance
    if args.method == "brute" or (args.method == "auto" and total_decision_dim(inst) <= 10):
        res = brute_force_solve(inst, grid_points=args.grid)
        policy, objective = res.policy, res.objective
    else:
        K = max(2.0 * inst.l_phi, inst.l_phi + 1.0)
        res = penalty_solve(inst, K=K, steps=args.steps, seed=args.seed)
        policy, objective = res.policy, res.objective
    out = {"objective": objective, "policy": policy_to_json(policy), "method": args.method}
    if args.certify:
        rec = recover_multipliers(inst, policy, "builtin")
        out["certificate"] = rec.certificate.to_json_dict()
        out["kkt"] = rec.report.to_json_dict()
    _emit(out, args)
    return EXIT_OK


def cmd_compare(args):
    """Both formulations end to end: solve, certify, reduce, cross-check."""
    pif = _load(args)
    inst = pif.instance
    if total_decision_dim(inst) <= 10:
        policy = brute_force_solve(inst, grid_points=args.grid).policy
    else:
        policy = penalty_solve(inst, K=2.0 * inst.l_phi + 1.0, steps=args.steps,
                               seed=args.seed).policy
    rec_b = recover_multipliers(inst, policy, "builtin")
    lifted = policy.lift()
    rec_e = recover_multipliers(inst, lifted, "explicit")
    reduced = reduce_multipliers(rec_e.certificate, inst.tree)
    red_report = kkt_residual_builtin(inst, policy, reduced)
    report = {
        "objective": inst.objective.value(policy),
        "builtin": rec_b.report.to_json_dict(),
        "explicit": rec_e.report.to_json_dict(),
        "reduced_builtin": red_report.to_json_dict(),
        "corollary_cross_check": {
            "builtin_residual_of_reduced": red_report.stationarity_max,
            "explicit_residual": rec_e.report.stationarity_max,
        },
    }
    _emit(report, args)
    ok = rec_b.found and rec_e.found and red_report.passed
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser():
    parser = _Parser(prog="recourse-kit",
                     description="Scenario-tree stochastic programming toolkit")
    parser.add_argument("--version", action="version", version=f"recourse-kit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, policy=False, certificate=False):
        p.add_argument("--instance", required=True)
        if policy:
            p.add_argument("--policy")
        if certificate:
            p.add_argument("--certificate")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--out")
        p.add_argument("--threads", type=int, default=1,
                       help="reserved; results are identical for any value")
        p.add_argument("--format", choices=("json", "text"), default="text")

    p = sub.add_parser("gen", help="generate a seeded random instance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--branching", default="2,2")
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--operator-family", choices=("affine", "smooth"), default="affine")
    p.add_argument("--set-family", choices=("box", "polyhedron"), default="box")
    p.add_argument("--objective-family", choices=("expected", "cvar"), default="expected")
    p.add_argument("--no-recourse-friendly", action="store_true")
    p.add_argument("--out")
    p.add_argument("--format", choices=("json", "text"), default="json")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("check-jacobian", help="finite-difference derivative audit")
    common(p, policy=True)
    p.add_argument("--directions", type=int, default=10)
    p.set_defaults(func=cmd_check_jacobian)

    p = sub.add_parser("check-adjoint", help="pairing identity audit in both modes")
    common(p)
    p.add_argument("--samples", type=int, default=10)
    p.set_defaults(func=cmd_check_adjoint, tol=1e-12)

    p = sub.add_parser("restore", help="feasibility restoration with bound audit")
    common(p, policy=True)
    p.add_argument("--mode", choices=("builtin", "relaxed"), default="builtin")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("estimate-C", help="sampled recourse constant estimate")
    common(p)
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(func=cmd_estimate_c)

    p = sub.add_parser("verify-kkt", help="check a multiplier certificate")
    common(p, policy=True, certificate=True)
    p.set_defaults(func=cmd_verify_kkt)

    p = sub.add_parser("solve", help="brute-force or penalty-descent solve")
    common(p, policy=False)
    p.add_argument("--method", choices=("auto", "brute", "penalty"), default="auto")
    p.add_argument("--grid", type=int, default=5)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--certify", action="store_true")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("compare", help="run both formulations and the reduction end to end")
    common(p)
    p.add_argument("--grid", type=int, default=5)
    p.add_argument("--steps", type=int, default=500)
    p.set_defaults(func=cmd_compare)

    return parser


def run_command(argv):
    """Programmatic entry point; returns the exit code."""
    level = os.environ.get("RECOURSE_KIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SchemaError as err:
        print(f"schema error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (InfeasibleNodeError, InfeasiblePointError, RestorationError) as err:
        print(f"infeasible: {err}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
