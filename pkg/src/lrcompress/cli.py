"""Command-line pipeline tying the toolkit together.

Subcommands:

    gen-teacher   build a seeded toy teacher model package
    calibrate     run the teacher on seeded inputs, store per-layer C matrices
    compress      data-aware compression of a teacher at given/uniform ranks
    fermigrad     optimize per-layer ranks under a parameter budget
    compare       evaluate allocations side by side (optionally vs uniform
                  and the brute-force oracle)

Every random choice is controlled by an explicit --seed, so reruns with the
same flags are byte-identical (reports differ only in the wall-time field).

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 file-format error,
5 numerical/domain error. Failures print a single JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import fermigrad as fg
from . import matrixio as mio
from . import pivga
from . import toymodels as tm
from .errors import PackageFormatError, ToolkitError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5

_EPILOG = """exit codes:
  0  success
  2  usage error (bad flags)
  3  I/O error (missing or unwritable file)
  4  file-format error (bad magic, manifest, or JSON)
  5  numerical/domain error (rank-deficient, infeasible budget, ...)
"""


def _load_spec(spec_arg: str | None, seed: int | None) -> tm.ToyModelSpec:
    if spec_arg is None or spec_arg == "default":
        spec = tm.default_spec(seed=seed if seed is not None else 0)
    else:
        with open(spec_arg) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise PackageFormatError(f"{spec_arg}: invalid JSON: {exc}") from None
        if seed is not None:
            raw["seed"] = seed
        spec = tm.ToyModelSpec.from_dict(raw)
    return spec


def _load_teacher(model_dir: str) -> tm.ToyModel:
    pkg = mio.load_model_package(model_dir)
    return pkg.to_toy_model()


def _budget_from_args(args, spec: tm.ToyModelSpec, n_inc: int) -> fg.BudgetConstraint:
    if args.target_params is not None:
        target = int(args.target_params)
    elif args.target_ratio is not None:
        target = int(args.target_ratio * spec.dense_param_count(n_inc))
    else:
        raise PackageFormatError("one of --target-params / --target-ratio is required")
    return fg.BudgetConstraint.from_shapes(
        spec.layer_shapes, n_target=target, mode=args.mode, n_inc=n_inc,
        n_scale=args.n_scale,
    )


def cmd_gen_teacher(args) -> int:
    spec = _load_spec(args.spec, args.seed)
    model = tm.build_teacher(spec)
    mio.save_model_package(args.out, spec, model.dense_weights, n_inc=model.n_inc)
    print(json.dumps({"out": args.out, "layers": len(model.dense_weights),
                      "dense_params": spec.dense_param_count(model.n_inc),
                      "seed": spec.seed}, sort_keys=True))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    model = _load_teacher(args.model)
    X = tm.gen_calibration(model.spec, args.samples, args.seed)
    mats = tm.layer_calibration_matrices(model, X)
    mio.save_calibration_package(args.out, mats, samples=args.samples, seed=args.seed)
    print(json.dumps({"out": args.out, "samples": args.samples, "seed": args.seed,
                      "layers": len(mats)}, sort_keys=True))
    return EXIT_OK


def cmd_compress(args) -> int:
    t0 = time.perf_counter()
    model = _load_teacher(args.model)
    mats = mio.load_calibration_package(args.calib)
    tm.attach_factors_from_calibration(model, mats)
    caps = model.spec.caps()
    if args.ranks is not None:
        ranks = mio.read_ranks_file(args.ranks)
        if len(ranks) != len(caps):
            raise PackageFormatError(
                f"{len(ranks)} ranks for {len(caps)} layers in {args.ranks}"
            )
    elif args.uniform is not None:
        ranks = np.clip(np.floor(args.uniform * caps).astype(np.int64), 1, caps)
    else:
        raise PackageFormatError("one of --ranks / --uniform is required")

    layers = []
    residuals = []
    conds = []
    for W, f, r in zip(model.dense_weights, model.factors, ranks):
        g = f.truncated(int(r))
        residuals.append(float(np.linalg.norm(W - g.reconstruct()) / np.linalg.norm(W)))
        if args.pivga:
            pf = pivga.pivga_factorize(g)
            conds.append(pf.cond_b0)
            layers.append(pf)
        else:
            layers.append(g)
    mio.save_model_package(args.out, model.spec, layers, n_inc=model.n_inc)

    mode = "parabolic" if args.pivga else "linear"
    counts = [pivga.param_count(m, n, int(r), mode)
              for (m, n), r in zip(model.spec.layer_shapes, ranks)]
    report = {
        "command": "compress",
        "config": {"model": args.model, "calib": args.calib, "pivga": bool(args.pivga),
                   "uniform": args.uniform, "ranks_file": args.ranks},
        "ranks": [int(r) for r in ranks],
        "stored_params": sum(c.decomposed for c in counts) + model.n_inc,
        "permutation_indices": sum(c.permutation_indices for c in counts),
        "dense_params": model.spec.dense_param_count(model.n_inc),
        "per_layer_residual": residuals,
        "pivga_cond_b0": conds or None,
        "out": args.out,
        "wall_time_s": time.perf_counter() - t0,
    }
    if args.report:
        mio.write_report(args.report, report)
    print(json.dumps({"out": args.out, "ranks": report["ranks"],
                      "stored_params": report["stored_params"]}, sort_keys=True))
    return EXIT_OK


def cmd_fermigrad(args) -> int:
    t0 = time.perf_counter()
    model = _load_teacher(args.model)
    mats = mio.load_calibration_package(args.calib)
    tm.attach_factors_from_calibration(model, mats)
    budget = _budget_from_args(args, model.spec, model.n_inc)
    cfg = fg.FermiConfig(T=args.T, r_min=args.r_min)
    sched = fg.RhoSchedule(rho0=args.rho0, alpha=args.alpha, rho_max=args.rho_max)
    opt = fg.OptimizerConfig(step_size=args.step, max_iters=args.iters,
                             mu_tol=args.mu_tol, constraint_tol=args.constraint_tol,
                             batch_size=args.batch_size)
    data = tm.gen_calibration(model.spec, args.kl_samples, args.seed)
    trajectory, alloc = fg.optimize_ranks(model, data, budget, cfg, sched, opt,
                                          seed=args.seed)
    mio.write_ranks_file(args.out_ranks, alloc)
    if args.trajectory:
        mio.write_trajectory_csv(args.trajectory, trajectory)

    eval_data = tm.gen_calibration(model.spec, args.kl_samples, args.seed + 1)
    evaluation = tm.evaluate_allocation(model, eval_data, alloc.ranks)
    report = {
        "command": "fermigrad",
        "config": {
            "model": args.model, "calib": args.calib, "mode": budget.mode,
            "target_params": budget.n_target, "n_scale": budget.n_scale,
            "T": cfg.T, "r_min": cfg.r_min, "rho0": sched.rho0, "alpha": sched.alpha,
            "rho_max": sched.rho_max, "step": opt.step_size, "iters": opt.max_iters,
            "mu_tol": opt.mu_tol, "constraint_tol": opt.constraint_tol,
            "batch_size": opt.batch_size, "kl_samples": args.kl_samples,
            "seed": args.seed,
        },
        "trajectory_csv": args.trajectory,
        "iterations_run": len(trajectory),
        "final_mu": [float(v) for v in trajectory[-1].mu],
        "final_rho": trajectory[-1].rho,
        "final_n_param_soft": trajectory[-1].n_param,
        "final_ranks": [int(r) for r in alloc.ranks],
        "achieved_params": int(alloc.achieved_params),
        "target_params": int(alloc.target_params),
        "kl_eval": evaluation.kl,
        "per_layer_residual": [float(x) for x in evaluation.per_layer_residual],
        "wall_time_s": time.perf_counter() - t0,
    }
    if args.report:
        mio.write_report(args.report, report)
    print(json.dumps({"final_ranks": report["final_ranks"],
                      "achieved_params": report["achieved_params"],
                      "target_params": report["target_params"],
                      "kl_eval": report["kl_eval"]}, sort_keys=True))
    return EXIT_OK


def cmd_compare(args) -> int:
    t0 = time.perf_counter()
    model = _load_teacher(args.model)
    mats = mio.load_calibration_package(args.calib)
    tm.attach_factors_from_calibration(model, mats)
    data = tm.gen_calibration(model.spec, args.samples, args.seed)

    entries = []
    for item in args.ranks or []:
        label, _, path = item.partition("=")
        if not path:
            label, path = item, item
        ranks = mio.read_ranks_file(path)
        entries.append((label, ranks))

    budget = None
    if args.target_params is not None or args.target_ratio is not None:
        budget = _budget_from_args(args, model.spec, model.n_inc)
        if args.uniform:
            uni = fg.uniform_ranks(model.spec.layer_shapes, budget, r_min=args.r_min)
            entries.append(("uniform", uni.ranks))
        if args.brute_force:
            bf = tm.brute_force_rank_search(model, data, budget,
                                            grid_step=args.grid_step, r_min=args.r_min)
            entries.append(("brute-force", bf.ranks))
    elif args.uniform or args.brute_force:
        raise PackageFormatError(
            "--uniform/--brute-force need --target-params or --target-ratio"
        )
    if not entries:
        raise PackageFormatError("nothing to compare: give --ranks and/or --uniform")

    rows = []
    for label, ranks in entries:
        rep = tm.evaluate_allocation(model, data, ranks)
        rows.append({"label": label, **rep.to_dict()})
    report = {
        "command": "compare",
        "config": {"model": args.model, "calib": args.calib, "samples": args.samples,
                   "seed": args.seed, "mode": args.mode,
                   "target_params": budget.n_target if budget else None},
        "allocations": rows,
        "wall_time_s": time.perf_counter() - t0,
    }
    if args.out:
        mio.write_report(args.out, report)
    width = max(len(r["label"]) for r in rows)
    print(f"{'label':<{width}}  {'kl':>12}  {'params(lin)':>12}  {'params(par)':>12}  ranks")
    for r in rows:
        print(f"{r['label']:<{width}}  {r['kl']:>12.5e}  {r['params_linear']:>12}  "
              f"{r['params_parabolic']:>12}  {r['ranks']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lrcompress",
        description="Low-rank weight compression toolkit (data-aware SVD, "
                    "pivoted gauge fixing, gradient-based rank allocation).",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-teacher", help="build a seeded toy teacher package")
    g.add_argument("--spec", default="default",
                   help="JSON spec file, or 'default' for the built-in 4-layer model")
    g.add_argument("--seed", type=int, default=None, help="override the spec seed")
    g.add_argument("--out", required=True, help="output package directory")
    g.set_defaults(func=cmd_gen_teacher)

    c = sub.add_parser("calibrate", help="store per-layer calibration matrices")
    c.add_argument("--model", required=True, help="teacher package directory")
    c.add_argument("--samples", type=int, default=512)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True, help="output calibration directory")
    c.set_defaults(func=cmd_calibrate)

    k = sub.add_parser("compress", help="data-aware compression at fixed ranks")
    k.add_argument("--model", required=True)
    k.add_argument("--calib", required=True)
    k.add_argument("--ranks", help="JSON ranks file (e.g. from fermigrad)")
    k.add_argument("--uniform", type=float, help="uniform compression fraction kappa")
    k.add_argument("--pivga", action="store_true",
                   help="gauge-fix the factors (lossless secondary compression)")
    k.add_argument("--out", required=True, help="output package directory")
    k.add_argument("--report", help="write a JSON run report here")
    k.set_defaults(func=cmd_compress)

    f = sub.add_parser("fermigrad", help="optimize per-layer ranks under a budget")
    f.add_argument("--model", required=True)
    f.add_argument("--calib", required=True)
    f.add_argument("--target-params", type=int, default=None)
    f.add_argument("--target-ratio", type=float, default=None,
                   help="target as a fraction of the dense parameter count")
    f.add_argument("--mode", choices=["linear", "parabolic"], default="linear")
    f.add_argument("-T", type=float, default=0.01, help="Fermi temperature")
    f.add_argument("--r-min", type=int, default=8)
    f.add_argument("--rho0", type=float, default=1.0)
    f.add_argument("--alpha", type=float, default=1.02)
    f.add_argument("--rho-max", type=float, default=2000.0)
    f.add_argument("--n-scale", type=float, default=1e9)
    f.add_argument("--step", type=float, default=0.5)
    f.add_argument("--iters", type=int, default=500)
    f.add_argument("--mu-tol", type=float, default=1e-3)
    f.add_argument("--constraint-tol", type=float, default=5e-3)
    f.add_argument("--batch-size", type=int, default=32)
    f.add_argument("--kl-samples", type=int, default=512,
                   help="training samples for the KL loss (seeded)")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out-ranks", required=True, help="output ranks JSON")
    f.add_argument("--trajectory", help="output mu-trajectory CSV")
    f.add_argument("--report", help="write a JSON run report here")
    f.set_defaults(func=cmd_fermigrad)

    q = sub.add_parser("compare", help="evaluate allocations side by side")
    q.add_argument("--model", required=True)
    q.add_argument("--calib", required=True)
    q.add_argument("--ranks", action="append",
                   help="label=ranks.json (repeatable)")
    q.add_argument("--uniform", action="store_true",
                   help="include the uniform baseline at the target")
    q.add_argument("--brute-force", action="store_true",
                   help="include the brute-force oracle (small models only)")
    q.add_argument("--grid-step", type=int, default=1)
    q.add_argument("--r-min", type=int, default=1)
    q.add_argument("--target-params", type=int, default=None)
    q.add_argument("--target-ratio", type=float, default=None)
    q.add_argument("--mode", choices=["linear", "parabolic"], default="linear")
    q.add_argument("--n-scale", type=float, default=1e9)
    q.add_argument("--samples", type=int, default=512)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", help="write a JSON comparison report here")
    q.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PackageFormatError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_FORMAT
    except ToolkitError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
