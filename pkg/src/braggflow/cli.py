"""Command-line driver: simulate datasets, run workflows, compare reports,
and dump active-learning diagnostics for a saved model.

All randomness flows from --seed; every config key can also be set through
BRAGGFLOW_SECTION_KEY environment variables.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import alpolicy, nnet, orchestrator
from .config import ConfigError, PRESET_NAMES, load_config
from .lattice import sample_uniform, sweep_counts_for_total, sweep_grid
from .orchestrator import PhasePlan, RunReport, derive_seed
from .simulator import save_param_batch, save_profile_dataset, simulate_batch


def _add_config_flags(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--preset", choices=PRESET_NAMES, help="named run preset")
    p.add_argument("--seed", type=int, default=0)


def _load(args, **overrides):
    return load_config(path=args.config, preset=args.preset, seed=args.seed,
                       overrides=overrides or None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="braggflow")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a labeled profile dataset")
    _add_config_flags(p)
    p.add_argument("--kind", default="train",
                   choices=("train", "val", "test", "study", "uniform", "sweep"))
    p.add_argument("--counts", help="per-class sample counts c0,c1,c2 (kind=uniform)")
    p.add_argument("--n", type=int, help="total sample count override")
    p.add_argument("--out", required=True, help="output dataset file")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="execute a workflow for one or more seeds")
    _add_config_flags(p)
    p.add_argument("--mode", choices=("baseline", "serial", "streaming"))
    p.add_argument("--phases", type=int)
    p.add_argument("--seeds", default="1",
                   help="seed count N (runs seeds 0..N-1) or explicit list s0,s1,...")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="compare run reports (task times, metrics, speedup)")
    p.add_argument("reports", nargs="+", help="RunReport JSON files")
    p.add_argument("--out", help="write the comparison as JSON")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("al-sample", help="dump AL weights/density/samples for a checkpoint")
    _add_config_flags(p)
    p.add_argument("--model", required=True, help="model checkpoint file")
    p.add_argument("--n", type=int, default=1000, help="samples to draw")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_al_sample)

    return parser


def cmd_simulate(args) -> int:
    cfg = _load(args)
    plan = PhasePlan.from_config(cfg)
    sizes = {"train": plan.train0, "val": plan.val_size,
             "test": plan.test_size, "study": plan.study_size}

    if args.kind in ("sweep", "study"):
        n = args.n or sizes.get(args.kind, plan.study_size)
        batch, _ = sweep_grid(cfg.space, sweep_counts_for_total(n))
    else:
        if args.kind == "uniform":
            if not args.counts:
                raise ConfigError("kind=uniform needs --counts c0,c1,c2")
            counts = tuple(int(x) for x in args.counts.split(","))
        else:
            from .config import equal_class_counts
            counts = equal_class_counts(args.n or sizes[args.kind])
        if sum(counts) == 0:
            raise ConfigError("class mix is empty; nothing to simulate")
        batch = sample_uniform(cfg.space, counts, derive_seed(cfg.seed, 0))
    pairs = simulate_batch(batch, cfg.sim, derive_seed(cfg.seed, 1), space=cfg.space)
    intensities = np.stack([p.intensity for p, _ in pairs])
    save_profile_dataset(args.out, cfg.sim.grid, batch, intensities)
    print(f"wrote {len(batch)} samples to {args.out}")
    return 0


def _parse_seeds(spec: str):
    if "," in spec:
        return [int(s) for s in spec.split(",")]
    return list(range(int(spec)))


def cmd_run(args) -> int:
    overrides = {}
    if args.mode:
        overrides[("workflow", "mode")] = args.mode
    if args.phases:
        overrides[("workflow", "phases")] = str(args.phases)
    cfg = _load(args, **overrides)
    os.makedirs(args.out, exist_ok=True)

    seeds = _parse_seeds(args.seeds)
    reports, failures = [], []
    for seed in seeds:
        run_cfg = _load(args, **overrides)
        run_cfg.seed = seed
        try:
            report = orchestrator.run_workflow(run_cfg, out_dir=args.out)
        except Exception as err:  # noqa: BLE001 - collected into the aggregate
            failures.append({"seed": seed, "error": str(err)})
            print(f"seed {seed} failed: {err}", file=sys.stderr)
            continue
        stem = f"{cfg.workflow.mode}_seed{seed}"
        report.save_json(os.path.join(args.out, f"report_{stem}.json"))
        report.write_task_csv(os.path.join(args.out, f"tasks_{stem}.csv"))
        reports.append(report)
        print(f"seed {seed}: total {report.totals['total_ms']:.0f} ms, "
              f"final mse {report.totals['final_mse']:.6g}")

    agg = orchestrator.aggregate_reports(reports, failures)
    with open(os.path.join(args.out, f"aggregate_{cfg.workflow.mode}.json"), "w") as fh:
        json.dump(agg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 1 if failures else 0


def _fmt_ms(v) -> str:
    return f"{v:12.1f}" if v is not None else " " * 11 + "-"


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        if not os.path.exists(path):
            print(f"report not found: {path}", file=sys.stderr)
            return 1
        reports.append(RunReport.load_json(path))
    comp = orchestrator.compare_runs(reports)

    a, b = comp["modes"]
    print(f"{'task':8s} {a + ' (ms)':>12s} {b + ' (ms)':>12s}")
    for row in comp["tasks"]:
        print(f"{row['task']:8s} {_fmt_ms(row['a_ms'])} {_fmt_ms(row['b_ms'])}")
    print(f"{'total':8s} {_fmt_ms(comp['total_ms'][0])} {_fmt_ms(comp['total_ms'][1])}")
    print()
    print(f"{'phase':>5s} {'size':>12s} {a + ' mse':>12s} {b + ' mse':>12s} {'delta':>12s}")
    for row in comp["phases"]:
        sizes = "/".join(str(s) for s in row["train_size"])
        print(f"{row['phase']:5d} {sizes:>12s} {row['mse'][0]:12.6f} "
              f"{row['mse'][1]:12.6f} {row['mse_delta']:+12.6f}")
    print(f"\nspeed up ({a}/{b}): {comp['speedup']:.2f}")

    if args.out:
        with open(args.out, "w") as fh:
            json.dump(comp, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_al_sample(args) -> int:
    cfg = _load(args)
    model = nnet.load_model(args.model)
    plan = PhasePlan.from_config(cfg)
    study = alpolicy.StudySet.build(cfg.space, plan.study_size, cfg.sim,
                                    derive_seed(cfg.seed, 6))
    weights = alpolicy.compute_weights(model, study)
    prior = alpolicy.UniformPrior(cfg.space)
    if cfg.al.prior == "truncgauss":
        prior = alpolicy.TruncGaussianPrior(cfg.space, cfg.al.prior_center_frac,
                                            cfg.al.prior_scale_frac)
    dens = alpolicy.build_density(study, weights, prior, cfg.al.tau_scale)

    os.makedirs(args.out, exist_ok=True)
    alpolicy.write_al_diagnostics(os.path.join(args.out, "weights.csv"), dens)
    with open(os.path.join(args.out, "density.csv"), "w") as fh:
        fh.write("index,symmetry,a,c,alpha,density\n")
        for i in range(len(study)):
            cell = study.params[i]
            fh.write(f"{i},{cell.symmetry.name},{cell.a!r},{cell.c!r},{cell.alpha!r},"
                     f"{alpolicy.density(cell, dens)!r}\n")
    batch = alpolicy.sample(dens, args.n, derive_seed(cfg.seed, 9))
    save_param_batch(os.path.join(args.out, "samples.bfpb"), batch)
    print(f"wrote weights/density/{args.n} samples to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
