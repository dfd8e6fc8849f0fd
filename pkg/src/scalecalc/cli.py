"""``scalecalc`` command line: analyze, plan, verify.

Exit codes: 0 success/pass, 1 input error, 2 verification failed,
3 analysed network is not preconditioned.
"""

from __future__ import annotations

import argparse
import json
import sys

from .graph import (
    NetworkGraph,
    SpecError,
    WEIGHTED,
    infer_shapes,
    lint_scaling,
    parse_spec,
    path_str,
)
from .initplan import SCHEME_NAMES, InitPlan, Scheme, assign_second_moments, make_plan, plan_from_dict
from .moments import MissingWeightError, UnsupportedOpError
from .scaling import analyze

EXIT_OK, EXIT_INPUT, EXIT_FAIL, EXIT_NOT_PRECONDITIONED = 0, 1, 2, 3


class InputError(Exception):
    pass


def _read_json(path: str):
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise InputError(f"{path}: {e.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None


def _is_plan(doc) -> bool:
    return isinstance(doc, dict) and "network" in doc and "layers" in doc


def _load_graph(path: str) -> tuple[NetworkGraph, InitPlan | None]:
    doc = _read_json(path)
    try:
        if _is_plan(doc):
            plan = plan_from_dict(doc)
            return plan.network, plan
        return infer_shapes(parse_spec(doc)), None
    except SpecError as e:
        raise InputError(f"{path}: {e}") from None


def _print_diagnostics(diags, out):
    for d in diags:
        print(f"{d.severity}: {d.position}: {d.message} [{d.code}]", file=out)


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.6g}"


# ---------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    g, _ = _load_graph(args.spec)
    diags = lint_scaling(g)
    if not args.json:
        _print_diagnostics(diags, sys.stderr)
    if any(d.severity == "error" for d in diags):
        return EXIT_INPUT
    if args.scheme:
        g = assign_second_moments(g, Scheme(args.scheme, args.c))
    missing = [path_str(p) for p, op in g.walk() if isinstance(op, WEIGHTED) and op.init_m2 is None]
    if missing:
        raise InputError(f"no init_m2 for layer(s) {', '.join(missing)}; pass --scheme or analyze a plan file")
    try:
        report = analyze(g, rel_tol=args.tol)
    except (UnsupportedOpError, MissingWeightError, ValueError) as e:
        raise InputError(str(e)) from None
    if report.verdict is None:
        raise InputError("network has no weighted layers, biases or learnable scalars")
    if args.json:
        doc = report.as_dict()
        doc["diagnostics"] = [d.__dict__ for d in diags]
        print(json.dumps(doc, indent=2))
    else:
        print(f"{'#':>3} {'kind':<7} {'position':<16} {'sigma':>12} {'gamma':>12} {'gamma_int':>12} {'nu':>12}")
        for r in report.records:
            print(
                f"{r.index:>3} {r.kind:<7} {path_str(r.path):<16} {_fmt(r.sigma):>12} {_fmt(r.gamma):>12}"
                f" {_fmt(r.gamma_intrinsic):>12} {_fmt(r.nu if r.kind != 'scalar' else r.nu_scalar):>12}"
            )
        v = report.verdict
        word = "preconditioned" if v.preconditioned else "NOT preconditioned"
        print(f"verdict: {word} (weight/scalar gamma max/min {v.gamma_ratio:.6g}, bias {v.bias_ratio:.6g}, tol {v.rel_tol:g})")
    return EXIT_OK if report.verdict.preconditioned else EXIT_NOT_PRECONDITIONED


# ---------------------------------------------------------------- plan


def _parse_c(text: str | None):
    if text is None or text == "auto":
        return None
    try:
        c = float(text)
    except ValueError:
        raise InputError(f"--c must be 'auto' or a positive number, got {text!r}") from None
    if not c > 0:
        raise InputError("--c must be positive")
    return c


def cmd_plan(args) -> int:
    g, _ = _load_graph(args.spec)
    diags = lint_scaling(g)
    _print_diagnostics(diags, sys.stderr)
    if any(d.severity == "error" for d in diags):
        return EXIT_INPUT
    target = None if args.no_output_norm else args.target_std
    try:
        plan = make_plan(
            g,
            Scheme(args.scheme, _parse_c(args.c)),
            target_std=target,
            input_scale=not args.no_input_scale,
            distribution=args.distribution,
        )
    except (UnsupportedOpError, SpecError, ValueError) as e:
        raise InputError(str(e)) from None
    doc = plan.as_dict()
    text = json.dumps(doc, indent=2)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        print(text)
    echo = sys.stderr if not args.output else sys.stdout
    print(f"scheme {plan.scheme.name}, c {_fmt(plan.c)}, typical kernel {plan.k_typical}", file=echo)
    for layer in plan.layers:
        print(f"  layer {path_str(layer.path):<16} E[W^2] {layer.second_moment:.6g}", file=echo)
    for s in plan.scalars:
        print(f"  scalar {path_str(s.path):<15} {s.value:.6g} ({s.reason})", file=echo)
    print(f"predicted output second moment {_fmt(plan.predicted_output_m2)}", file=echo)
    for note in plan.notes:
        print(f"note: {note}", file=echo)
    if args.output:
        print(f"wrote {args.output}", file=echo)
    return EXIT_OK


# ---------------------------------------------------------------- verify


def cmd_verify(args) -> int:
    from .verify import EstimationConfig, PlanMismatchError, compare, theory_report, verify_plan

    g, _ = _load_graph(args.spec)
    doc = _read_json(args.plan)
    if not _is_plan(doc):
        raise InputError(f"{args.plan}: not a plan file (expected 'network' and 'layers')")
    try:
        plan = plan_from_dict(doc)
    except SpecError as e:
        raise InputError(f"{args.plan}: {e}") from None
    try:
        cfg = EstimationConfig(
            seed=args.seed, batch=args.batch, trials=args.trials, probes=args.probes, workers=args.workers
        )
    except ValueError as e:
        raise InputError(str(e)) from None
    try:
        report = verify_plan(plan, cfg, graph=g)
        result = compare(theory_report(plan.network), report, tol=args.tol, fraction=args.fraction, basis=args.basis)
    except PlanMismatchError as e:
        raise InputError(f"{args.plan}: {e}") from None
    except (UnsupportedOpError, ValueError) as e:
        raise InputError(str(e)) from None
    doc = report.as_dict()
    doc["comparison"] = result.as_dict()
    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
    if args.json:
        print(json.dumps(doc, indent=2))
    else:
        if report.overflow:
            print("numerical overflow: estimates are not finite")
        print(f"{'#':>3} {'layer':<16} {'gamma':>12} {'nu_hat':>12} {'g_hat':>12} {'ratio_nu':>9} {'ratio_g':>9}  ok")
        for est, row in zip(report.layers, result.rows):
            print(
                f"{est.index:>3} {path_str(est.path):<16} {est.gamma_theory:>12.6g} {est.nu_hat:>12.6g}"
                f" {_fmt(est.g_hat):>12} {row.ratio_nu:>9.3f} {_fmt(row.ratio_g):>9}  {'yes' if row.within else 'NO'}"
            )
        word = "PASS" if result.passed else "FAIL"
        print(
            f"{word}: {result.fraction_within:.0%} of layers within [{1 / args.tol:.3g}, {args.tol:.3g}]"
            f" ({args.basis} basis, need {args.fraction:.0%})"
        )
        if args.output:
            print(f"wrote {args.output}")
    return EXIT_OK if result.passed else EXIT_FAIL


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scalecalc", description="Second-moment scaling analysis for ReLU networks.")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="propagate moments and report scaling factors")
    a.add_argument("spec", help="network spec or plan JSON")
    a.add_argument("--scheme", choices=SCHEME_NAMES, help="fill missing init_m2 from this scheme")
    a.add_argument("--c", type=float, default=None, help="geometric numerator (default 2/typical kernel)")
    a.add_argument("--tol", type=float, default=1e-6, help="relative tolerance of the verdict")
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_analyze)

    pl = sub.add_parser("plan", help="emit an initialization plan")
    pl.add_argument("spec")
    pl.add_argument("--scheme", choices=SCHEME_NAMES, default="geometric")
    pl.add_argument("--c", default="auto", help="'auto' (2/typical kernel) or a number")
    pl.add_argument("--target-std", type=float, default=0.05)
    pl.add_argument("--no-output-norm", action="store_true", help="skip the output normaliser")
    pl.add_argument("--no-input-scale", action="store_true")
    pl.add_argument("--distribution", choices=("gaussian", "uniform"), default="gaussian")
    pl.add_argument("-o", "--output", help="plan file (default: stdout)")
    pl.set_defaults(func=cmd_plan)

    v = sub.add_parser("verify", help="Monte-Carlo check of a plan")
    v.add_argument("spec")
    v.add_argument("plan")
    v.add_argument("--seed", type=int, required=True)
    v.add_argument("--batch", type=int, default=1024)
    v.add_argument("--trials", type=int, default=10)
    v.add_argument("--probes", type=int, default=1, help="probe directions per sample")
    v.add_argument("--tol", type=float, default=2.0, help="ratios must lie in [1/tol, tol]")
    v.add_argument("--fraction", type=float, default=0.9, help="fraction of layers that must pass")
    v.add_argument("--basis", choices=("setup", "plan"), default="setup")
    v.add_argument("--workers", type=int, default=1)
    v.add_argument("-o", "--output", help="write the JSON report here")
    v.add_argument("--json", action="store_true")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code else EXIT_OK
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except SpecError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
