"""Command-line front end.

Subcommands: analyze, plan, apply, sweep, iterate, synth, precision.
Activation dumps are always inputs, produced by whatever framework trained
the network; everything here is deterministic given its inputs, warnings go
to stderr, data goes to files under --out.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import evalkit, featio, netir, planner, rewriter, sepstats


def _read_ir(path) -> netir.NetworkIR:
    return netir.parse_network(Path(path).read_text())


def _load_means(ir, manifest_path):
    sets = featio.load_manifest(manifest_path, ir)
    missing = sorted({b.name for b in ir.blocks} - sets.keys())
    if missing:
        raise featio.ManifestError(f"manifest has no dumps for block(s) {missing}")
    return {name: featio.class_means(s) for name, s in sets.items()}


def _outdirs(out, *subdirs) -> Path:
    base = Path(out)
    for sub in subdirs:
        (base / sub).mkdir(parents=True, exist_ok=True)
    return base


def _tally_table(ir, tallies) -> str:
    lines = []
    for b in ir.blocks:
        t = tallies.get(b.name)
        if t is None:
            continue
        lines.append(
            f"tally {b.name} stage={b.stage} plus={t.n_plus} minus={t.n_minus}"
            f" ties={t.n_ties} total={t.n_total}"
        )
    return "\n".join(lines) + "\n"


def cmd_analyze(args) -> int:
    ir = _read_ir(args.ir)
    means = _load_means(ir, args.manifest)
    stack = sepstats.network_correlations(ir, means, strict=args.strict_degenerate)
    tallies = sepstats.network_tallies(
        ir, means, tie_tol=args.tie_tol, strict=args.strict_degenerate
    )
    base = _outdirs(args.out, "analysis")
    for lc in stack.layers:
        sepstats.write_correlation_csv(base / "analysis" / f"{lc.layer_name}.corr.csv", lc.matrix)
        sepstats.write_correlation_pgm(base / "analysis" / f"{lc.layer_name}.corr.pgm", lc.matrix)
    (base / "analysis" / "tallies.txt").write_text(_tally_table(ir, tallies))
    print(f"analyzed {len(stack.layers)} layers, {len(tallies)} tallies -> {base / 'analysis'}")
    return 0


def _plan_from_inputs(args):
    ir = _read_ir(args.ir)
    means = _load_means(ir, args.manifest)
    tallies = sepstats.network_tallies(
        ir, means, tie_tol=args.tie_tol, strict=args.strict_degenerate
    )
    return ir, tallies


def cmd_plan(args) -> int:
    ir, tallies = _plan_from_inputs(args)
    cfg = planner.PlannerConfig(lam=args.lam, tie_tol=args.tie_tol)
    plan = planner.build_plan(ir, tallies, cfg)
    base = _outdirs(args.out, "plans")
    path = base / "plans" / f"lambda_{plan.lambda_used!r}.plan"
    path.write_text(planner.serialize_plan(plan))
    print(f"lambda_o={plan.lambda_o!r}")
    if plan.lambda_used > plan.lambda_o:
        print(
            f"warning: lambda {plan.lambda_used!r} exceeds lambda_o; plan is identity",
            file=sys.stderr,
        )
    print(f"plan -> {path}")
    return 0


def cmd_apply(args) -> int:
    ir = _read_ir(args.ir)
    plan = planner.parse_plan(Path(args.plan).read_text())
    refined = rewriter.apply_plan(ir, plan)
    report = rewriter.size_report(ir, refined)
    base = _outdirs(args.out, "refined", "reports")
    (base / "refined" / "refined.ir").write_text(netir.serialize_network(refined))
    (base / "reports" / "size_report.txt").write_text(rewriter.render_size_report(report, ir))
    (base / "reports" / "size_report.csv").write_text(rewriter.size_report_csv(report, ir))
    print(f"reduction_pct={report.reduction_pct!r}")
    print(f"refined -> {base / 'refined' / 'refined.ir'}")
    return 0


def cmd_sweep(args) -> int:
    ir, tallies = _plan_from_inputs(args)
    probe = planner.build_plan(ir, tallies, planner.PlannerConfig(lam=0.25, tie_tol=args.tie_tol))
    lo = args.sweep_min
    hi = args.sweep_max
    if hi is None:
        hi = probe.lambda_o if probe.lambda_o > lo else lo
    if hi < lo:
        raise ValueError(f"sweep range is empty: [{lo}, {hi}]")
    if args.sweep_steps < 1:
        raise ValueError("sweep needs at least one grid point")
    grid = np.linspace(lo, hi, args.sweep_steps)
    names = [b.name for b in ir.blocks]
    header = ["lambda", "above_lambda_o", "conv_params"]
    for name in names:
        header.extend((f"{name}_stretch", f"{name}_split"))
    rows = [f"# lambda_o={probe.lambda_o!r}", ",".join(header)]
    for lam in grid:
        plan = planner.build_plan(ir, tallies, planner.PlannerConfig(lam=float(lam), tie_tol=args.tie_tol))
        refined = rewriter.apply_plan(ir, plan)
        total = netir.param_count(refined).conv_total
        row = [repr(float(lam)), str(int(lam > probe.lambda_o)), str(total)]
        for name in names:
            e = plan.per_block[name]
            row.extend((repr(e.stretch), str(e.split)))
        rows.append(",".join(row))
    base = _outdirs(args.out, "reports")
    path = base / "reports" / "sweep.csv"
    path.write_text("\n".join(rows) + "\n")
    print(f"lambda_o={probe.lambda_o!r}")
    print(f"sweep -> {path}")
    return 0


def cmd_iterate(args) -> int:
    manifests = args.manifest
    rounds = args.rounds if args.rounds is not None else len(manifests)
    if rounds != len(manifests):
        raise ValueError(f"{rounds} round(s) requested but {len(manifests)} manifest(s) given")
    ir = _read_ir(args.ir)
    base = _outdirs(args.out, "plans", "refined", "reports")
    for r, manifest in enumerate(manifests, start=1):
        means = _load_means(ir, manifest)
        tallies = sepstats.network_tallies(
            ir, means, tie_tol=args.tie_tol, strict=args.strict_degenerate
        )
        plan = planner.build_plan(ir, tallies, planner.PlannerConfig(lam=args.lam, tie_tol=args.tie_tol))
        refined = rewriter.apply_plan(ir, plan)
        report = rewriter.size_report(ir, refined)
        (base / "plans" / f"round_{r}.plan").write_text(planner.serialize_plan(plan))
        (base / "refined" / f"round_{r}.ir").write_text(netir.serialize_network(refined))
        (base / "reports" / f"round_{r}_size.txt").write_text(
            rewriter.render_size_report(report, ir)
        )
        print(f"round {r}: reduction_pct={report.reduction_pct!r}")
        ir = refined
    return 0


def cmd_synth(args) -> int:
    profile = evalkit.load_profile(args.profile)
    sets, labels = evalkit.synth_activations(profile, seed=args.seed)
    spatial = None if args.flat else (2, 2)
    manifest = evalkit.write_activation_dumps(
        args.out, sets, labels, spatial=spatial, seed=args.seed
    )
    print(f"manifest -> {manifest}")
    return 0


def cmd_precision(args) -> int:
    scores = featio.read_tensor_file(args.scores)
    if scores.ndim != 2:
        raise ValueError("scores tensor must be rank 2 (images x classes)")
    truth = evalkit.read_truth_file(args.truth)
    dump = evalkit.PredictionDump(scores=scores, truth=truth)
    print(f"precision_at_k={evalkit.precision_at_k(dump, args.k)!r}")
    return 0


def _add_common_inputs(p, manifest_action="store"):
    p.add_argument("--ir", required=True, help="network IR file")
    p.add_argument("--manifest", required=True, action=manifest_action, help="activation manifest")
    p.add_argument("--tie-tol", type=float, default=1e-6, dest="tie_tol")
    p.add_argument("--strict-degenerate", action="store_true", dest="strict_degenerate")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="convrefine",
        description="class-separation analysis and stretch/split refinement of conv nets",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="correlation heatmaps and separation tallies")
    _add_common_inputs(p)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("plan", help="compute stretch/split factors")
    _add_common_inputs(p)
    p.add_argument("--lambda", type=float, default=0.25, dest="lam")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("apply", help="rewrite an IR with a plan file")
    p.add_argument("--ir", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_apply)

    p = sub.add_parser("sweep", help="factors and model size across a lambda grid")
    _add_common_inputs(p)
    p.add_argument("--sweep-min", type=float, default=0.05, dest="sweep_min")
    p.add_argument("--sweep-max", type=float, default=None, dest="sweep_max")
    p.add_argument("--sweep-steps", type=int, default=10, dest="sweep_steps")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("iterate", help="re-refine across rounds of retraining dumps")
    _add_common_inputs(p, manifest_action="append")
    p.add_argument("--lambda", type=float, default=0.25, dest="lam")
    p.add_argument("--rounds", type=int, default=None)
    p.set_defaults(fn=cmd_iterate)

    p = sub.add_parser("synth", help="generate synthetic activation dumps")
    p.add_argument("--profile", required=True, help="JSON correlation profile")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--flat", action="store_true", help="write rank-2 tensors (no spatial grid)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("precision", help="precision@k over a prediction dump")
    p.add_argument("--scores", required=True, help="ATNS rank-2 score tensor")
    p.add_argument("--truth", required=True, help="ATMH multi-hot ground truth")
    p.add_argument("--k", type=int, required=True)
    p.set_defaults(fn=cmd_precision)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
