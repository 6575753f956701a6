"""Command-line interface: fit, ace, and simulate.

Usage sketches::

    fslmm fit data.csv model.json --out report.json
    fslmm ace data.csv pedigree.json model.json --out report.json
    fslmm simulate S2 --scale desk --reps 50 --seed 7 --out metrics.json

``data.csv`` is a UTF-8, comma-separated, headed table.  The model file
is flat JSON: ``response``, ``fixed`` (column list), ``intercept``,
``random`` (list of {factor, covariates, intercept, structure}),
``criterion``, ``method``, ``tol``, ``max_iter``, ``contrasts`` (name ->
row).  The pedigree file declares pairwise family relationships.

Reports are printed as aligned text and optionally written as JSON; the
JSON carries full-precision values (shortest round-trip decimal form) and
no wall-clock fields, so identical seeds give identical bytes.

Exit codes: 2 parse/usage error, 3 rank or degeneracy, 4 non-convergence
(report still emitted), 5 numerical failure, 6 pedigree inconsistency.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings

import numpy as np

from . import __version__
from .constraints import (
    AceStructure,
    CovStructure,
    Family,
    ace_constraint,
    ace_fit,
    build_ace_layout,
)
from .errors import (
    DegenerateDataError,
    LmmError,
    NumericalError,
    PedigreeError,
    SpecificationError,
)
from .estimators import METHODS, FitConfig, fit
from .inference import Contrast, contrast_report
from .model import (
    ModelData,
    ModelSpec,
    RandomTerm,
    build_design,
    product_forms,
)
from .simulate import SETTING_LABELS, compare_methods, df_baseline, direct_sw_estimates, generate, setting

EXIT_PARSE = 2
EXIT_DEGENERATE = 3
EXIT_NONCONVERGENCE = 4
EXIT_NUMERICAL = 5
EXIT_PEDIGREE = 6


# ---------------------------------------------------------------------------
# Input readers
# ---------------------------------------------------------------------------


def read_csv_table(path) -> dict[str, list[str]]:
    """Read a headed CSV into a column table ('.' decimals, ',' delimiter)."""
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            try:
                header = next(reader)
            except StopIteration:
                raise SpecificationError(f"{path}: empty file") from None
            columns = {name.strip(): [] for name in header}
            names = [name.strip() for name in header]
            if len(set(names)) != len(names):
                raise SpecificationError(f"{path}: duplicate column names")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(names):
                    raise SpecificationError(
                        f"{path}:{lineno}: expected {len(names)} fields, got {len(row)}"
                    )
                for name, value in zip(names, row):
                    columns[name].append(value.strip())
    except OSError as exc:
        raise SpecificationError(f"cannot read {path}: {exc}") from exc
    return columns


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except OSError as exc:
        raise SpecificationError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SpecificationError(f"{path}: invalid JSON ({exc})") from exc


def parse_model_spec(doc: dict) -> ModelSpec:
    if "response" not in doc:
        raise SpecificationError("model spec needs a 'response' column name")
    random_terms = []
    for entry in doc.get("random", []):
        if "factor" not in entry:
            raise SpecificationError("each random term needs a 'factor'")
        random_terms.append(
            RandomTerm(
                factor=entry["factor"],
                covariates=list(entry.get("covariates", [])),
                intercept=bool(entry.get("intercept", True)),
                structure=entry.get("structure", "unstructured"),
            )
        )
    spec = ModelSpec(
        response=doc["response"],
        fixed=list(doc.get("fixed", [])),
        intercept=bool(doc.get("intercept", True)),
        random=random_terms,
        criterion=doc.get("criterion", "ML"),
        method=doc.get("method", "FS"),
        tol=float(doc.get("tol", 1e-6)),
        max_iter=int(doc.get("max_iter", 200)),
        contrasts={
            name: [float(v) for v in row]
            for name, row in doc.get("contrasts", {}).items()
        },
    )
    if spec.criterion not in ("ML", "ReML"):
        raise SpecificationError(f"unknown criterion {spec.criterion!r}")
    if spec.method not in METHODS:
        raise SpecificationError(f"unknown method {spec.method!r}")
    return spec


def parse_pedigree(doc: dict, table: dict) -> tuple[list[Family], list, list]:
    family_col = doc.get("family_column", "family")
    member_col = doc.get("member_column", "member")
    for col in (family_col, member_col):
        if col not in table:
            raise SpecificationError(f"pedigree column {col!r} not in data")
    fams: dict = {}
    for fid, member in zip(table[family_col], table[member_col]):
        fams.setdefault(fid, [])
        if member in fams[fid]:
            raise PedigreeError(f"family {fid!r}: duplicate member {member!r}")
        fams[fid].append(member)
    relationships: dict = {fid: {} for fid in fams}
    reared_apart: dict = {fid: set() for fid in fams}
    for entry in doc.get("relationships", []):
        fid = entry.get("family")
        if fid not in fams:
            raise PedigreeError(f"relationship references unknown family {fid!r}")
        pair = (entry.get("a"), entry.get("b"))
        label = entry.get("label")
        prev = relationships[fid].get(pair) or relationships[fid].get(pair[::-1])
        if prev is not None and prev != label:
            raise PedigreeError(
                f"family {fid!r}: conflicting labels for pair {pair!r}"
            )
        relationships[fid][pair] = label
    for entry in doc.get("reared_apart", []):
        fid = entry.get("family")
        if fid not in fams:
            raise PedigreeError(f"rearing entry references unknown family {fid!r}")
        reared_apart[fid].add((entry.get("a"), entry.get("b")))
    families = [
        Family(
            fid=fid,
            members=members,
            relationships=relationships[fid],
            reared_apart=reared_apart[fid],
        )
        for fid, members in fams.items()
    ]
    return families, table[family_col], table[member_col]


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------


def _fit_report_document(spec, data, result, tests) -> dict:
    fs = data.structure
    blocks = []
    for k in range(fs.n_factors):
        blocks.append(
            {
                "factor": spec.random[k].factor,
                "q": fs.q_counts[k],
                "levels": fs.level_counts[k],
                "structure": spec.random[k].structure,
                "vech_d": list(map(float, result.params.blocks[k])),
            }
        )
    doc = {
        "kind": "fit",
        "version": __version__,
        "model": {
            "response": spec.response,
            "fixed_names": spec.fixed_names(),
            "criterion": result.criterion,
            "method": result.method,
            "n": data.n,
            "p": data.p,
        },
        "estimates": {
            "beta": list(map(float, result.beta)),
            "se_beta": list(map(float, result.se_beta)),
            "sigma2": float(result.sigma2),
            "blocks": blocks,
            "loglik": float(result.loglik),
            "iterations": result.iterations,
            "converged": bool(result.converged),
        },
        "tests": [
            {
                "name": t.name,
                "kind": t.kind,
                "statistic": float(t.statistic),
                "df": float(t.df),
                "p_value": float(t.p_value),
                "s2": float(t.s2),
            }
            for t in tests
        ],
        "trace": [[float(l), float(a)] for l, a in result.trace],
    }
    if result.extra:
        doc["extra"] = result.extra
    return doc


def write_report(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(doc, handle, sort_keys=True, indent=1)
        handle.write("\n")


def read_report(path) -> dict:
    return _load_json(path)


def _print_fit_table(doc, stream) -> None:
    est = doc["estimates"]
    model = doc["model"]
    print(
        f"Mixed model fit  method={model['method']}  criterion={model['criterion']}"
        f"  n={model['n']}",
        file=stream,
    )
    print(
        f"  log-likelihood {est['loglik']:.6f}   iterations {est['iterations']}"
        f"   converged {'yes' if est['converged'] else 'NO'}",
        file=stream,
    )
    print(f"  residual variance sigma2 = {est['sigma2']:.6g}", file=stream)
    print("  Fixed effects:", file=stream)
    print(f"    {'name':<16}{'estimate':>14}{'std.err':>12}", file=stream)
    for name, b, se in zip(model["fixed_names"], est["beta"], est["se_beta"]):
        print(f"    {name:<16}{b:>14.6g}{se:>12.4g}", file=stream)
    for block in est["blocks"]:
        print(
            f"  Random factor {block['factor']!r} (q={block['q']}, "
            f"levels={block['levels']}, {block['structure']}): "
            f"vech(D) = {np.round(block['vech_d'], 6).tolist()}",
            file=stream,
        )
    if doc.get("extra", {}).get("sigma2_a") is not None:
        ex = doc["extra"]
        print(
            "  Variance components: additive-genetic "
            f"{ex['sigma2_a']:.6g}, common-environment {ex['sigma2_c']:.6g}, "
            f"residual {ex['sigma2_e']:.6g}",
            file=stream,
        )
    if doc["tests"]:
        print("  Tests (direct Satterthwaite):", file=stream)
        print(
            f"    {'name':<16}{'stat':>10}{'df':>12}{'p':>12}",
            file=stream,
        )
        for t in doc["tests"]:
            print(
                f"    {t['name']:<16}{t['statistic']:>10.4f}{t['df']:>12.2f}"
                f"{t['p_value']:>12.4g}",
                file=stream,
            )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _contrast_rows(spec, p, overrides):
    rows = dict(spec.contrasts)
    for item in overrides or []:
        if "=" not in item:
            raise SpecificationError(f"bad contrast {item!r}; use name=v1,v2,...")
        name, values = item.split("=", 1)
        rows[name] = [float(v) for v in values.split(",")]
    if not rows:
        names = spec.fixed_names()
        for i in range(p):
            e = [0.0] * p
            e[i] = 1.0
            rows[names[i] if i < len(names) else f"beta[{i}]"] = e
    out = []
    for name, row in rows.items():
        arr = np.atleast_2d(np.asarray(row, dtype=float))
        if arr.shape[1] != p:
            raise SpecificationError(
                f"contrast {name!r} has {arr.shape[1]} entries, expected {p}"
            )
        out.append(Contrast(arr, name=name))
    return out


def cmd_fit(args) -> int:
    table = read_csv_table(args.data)
    spec = parse_model_spec(_load_json(args.spec))
    for field_name in ("method", "criterion"):
        value = getattr(args, field_name)
        if value:
            setattr(spec, field_name, value)
    if args.tol:
        spec.tol = args.tol
    if args.max_iter:
        spec.max_iter = args.max_iter
    data = build_design(table, spec)
    pf = product_forms(data)
    cfg = FitConfig(
        method=spec.method,
        criterion=spec.criterion,
        tol=spec.tol,
        max_iter=spec.max_iter,
    )
    structures = None
    if any(term.structure != "unstructured" for term in spec.random):
        structures = [
            CovStructure(term.structure, term.q) for term in spec.random
        ]
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        result = fit(pf, cfg, structure=structures)
    tests = []
    if spec.criterion == "ReML" or args.force_tests:
        for contrast in _contrast_rows(spec, data.p, args.contrast):
            tests.append(contrast_report(result, contrast, pf))
    elif data.p:
        print(
            "note: contrast tests skipped under ML (refit with ReML or pass "
            "--force-tests)",
            file=sys.stderr,
        )
    doc = _fit_report_document(spec, data, result, tests)
    _print_fit_table(doc, sys.stdout)
    if args.out:
        write_report(doc, args.out)
    return 0 if result.converged else EXIT_NONCONVERGENCE


def cmd_ace(args) -> int:
    table = read_csv_table(args.data)
    spec = parse_model_spec(_load_json(args.spec))
    families, fam_col, member_col = parse_pedigree(_load_json(args.pedigree), table)
    layout = build_ace_layout(families, fam_col, member_col)
    n = len(table[spec.response])
    x_cols = [np.ones(n)] if spec.intercept else []
    x_cols += [
        np.asarray([float(v) for v in table[c]]) for c in spec.fixed
    ]
    x = np.column_stack(x_cols) if x_cols else np.empty((n, 0))
    y = np.asarray([float(v) for v in table[spec.response]])
    cfg = FitConfig(method="FSFS", criterion="ReML", tol=spec.tol, max_iter=spec.max_iter)
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        result = ace_fit(x, y, layout, cfg)
    # Identity-Z product forms for the inference step.
    xc, yc = x[layout.row_order], y[layout.row_order]
    data = ModelData(y=yc, x=xc, z=np.eye(n), structure=layout.structure)
    pf = product_forms(data)
    shared_c = ace_constraint(np.asarray(result.extra["tau"]), layout.kinships)
    tests = []
    for contrast in _contrast_rows(spec, data.p, args.contrast):
        tests.append(contrast_report(result, contrast, pf, shared_constraint=shared_c))
    zero_info = [
        k for k, (ka, kc) in enumerate(layout.kinships) if ka.shape[0] == 1
    ]
    if len(zero_info) == len(layout.kinships):
        result.extra["warning"] = (
            "pedigree has only singleton families: genetic and environment "
            "components are not identified"
        )
    spec_for_report = spec
    spec_for_report.random = [
        RandomTerm(factor=f"family_type_{k}", covariates=[], intercept=True)
        for k in range(layout.structure.n_factors)
    ]
    doc = _fit_report_document(spec_for_report, data, result, tests)
    doc["kind"] = "ace"
    doc["model"]["family_types"] = [
        {"size": layout.structure.q_counts[k], "families": layout.structure.level_counts[k]}
        for k in range(layout.structure.n_factors)
    ]
    _print_fit_table(doc, sys.stdout)
    if args.out:
        write_report(doc, args.out)
    return 0 if result.converged else EXIT_NONCONVERGENCE


def cmd_simulate(args) -> int:
    sim = setting(args.label, args.scale)
    methods = tuple(args.methods.split(",")) if args.methods else (
        "FS",
        "FFS",
        "SFS",
        "FSFS",
    )
    table = compare_methods(
        sim,
        n_reps=args.reps,
        methods=methods,
        criterion=args.criterion,
        seed=args.seed,
        jobs=args.jobs,
    )
    doc = {"kind": "simulate", "version": __version__, "comparison": table.as_document()}
    print(
        f"Setting {sim.label} ({args.scale}): n={sim.n}, "
        f"levels={list(sim.level_counts)}, reps={args.reps}",
        file=sys.stdout,
    )
    print(
        f"  {'method':<8}{'mean iters':>12}{'mean secs':>12}{'failures':>10}",
        file=sys.stdout,
    )
    for m in methods:
        print(
            f"  {m:<8}{table.mean_iterations[m]:>12.2f}"
            f"{table.mean_seconds[m]:>12.4f}{table.failures[m]:>10d}",
            file=sys.stdout,
        )
    agreements = [
        metrics["max_abs_loglik_gap"]
        for (a, b), metrics in table.pairwise.items()
        if a != b
    ]
    if agreements:
        status = "pass" if max(agreements) < 1e-5 else "FAIL"
        print(
            f"  cross-method agreement (max loglik gap "
            f"{max(agreements):.2e}): {status}",
            file=sys.stdout,
        )
    if args.df_baseline:
        data = generate(sim, args.seed + 1)
        row = np.zeros(sim.p)
        row[1] = 1.0
        truth = df_baseline(data, sim, row, n_sims=args.df_sims, seed=args.seed + 2)
        sw = direct_sw_estimates(
            data, sim, row, n_sims=min(args.df_sims, 500), seed=args.seed + 3
        )
        doc["df"] = {"baseline": truth, "direct_sw": sw, "contrast": row.tolist()}
        print(
            f"  df baseline {truth['df_truth']:.2f} vs direct-SW mean "
            f"{sw['mean_df']:.2f}",
            file=sys.stdout,
        )
    if args.out:
        write_report(doc, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fslmm",
        description="Fisher-scoring estimation and Satterthwaite inference "
        "for crossed-factor linear mixed models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a mixed model from CSV data")
    p_fit.add_argument("data", help="CSV data file")
    p_fit.add_argument("spec", help="JSON model specification")
    p_fit.add_argument("--out", help="write the JSON report here")
    p_fit.add_argument("--method", choices=METHODS)
    p_fit.add_argument("--criterion", choices=("ML", "ReML"))
    p_fit.add_argument("--tol", type=float)
    p_fit.add_argument("--max-iter", type=int, dest="max_iter")
    p_fit.add_argument(
        "--contrast",
        action="append",
        help="extra contrast as name=v1,v2,... (repeatable)",
    )
    p_fit.add_argument(
        "--force-tests",
        action="store_true",
        help="run Satterthwaite tests even under ML (df are underestimated)",
    )
    p_fit.set_defaults(func=cmd_fit)

    p_ace = sub.add_parser("ace", help="fit the twin-study ACE model")
    p_ace.add_argument("data", help="CSV data file")
    p_ace.add_argument("pedigree", help="JSON pedigree description")
    p_ace.add_argument("spec", help="JSON model specification")
    p_ace.add_argument("--out", help="write the JSON report here")
    p_ace.add_argument("--contrast", action="append")
    p_ace.set_defaults(func=cmd_ace)

    p_sim = sub.add_parser("simulate", help="run the simulation harness")
    p_sim.add_argument("label", choices=SETTING_LABELS)
    p_sim.add_argument("--scale", choices=("desk", "paper"), default="desk")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--reps", type=int, default=50)
    p_sim.add_argument("--jobs", type=int, default=1)
    p_sim.add_argument("--criterion", choices=("ML", "ReML"), default="ML")
    p_sim.add_argument("--methods", help="comma-separated method subset")
    p_sim.add_argument(
        "--df-baseline",
        action="store_true",
        help="also run the moment-matching df baseline",
    )
    p_sim.add_argument("--df-sims", type=int, default=2000)
    p_sim.add_argument("--out", help="write the JSON metrics document here")
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpecificationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except DegenerateDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except PedigreeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PEDIGREE
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except LmmError as exc:  # residual library failures
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
