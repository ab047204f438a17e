"""Command-line front end.

Every subcommand reads a JSON config (see harness.ExperimentConfig), writes
its results under --out, and is deterministic for a given config, seed, and
any worker count.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import demand, harness, sim, spatial, waittime


def _global_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--workers", type=int, default=None,
                        help="override config worker count")


def _load(args) -> harness.ExperimentConfig:
    config = harness.load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.workers is not None:
        config.workers = args.workers
    os.makedirs(args.out, exist_ok=True)
    return config


def cmd_fit_demand(args) -> int:
    config = _load(args)
    grid = spatial.build_grid((config.lat_min, config.lon_min,
                               config.lat_max, config.lon_max),
                              config.cell_size_miles)
    records, span = demand.load_incidents_csv(config.incidents_csv, grid)
    model = demand.fit_poisson(records, grid, observed_minutes=span)
    out = os.path.join(args.out, "demand_model.json")
    demand.save_model(out, model)
    print(f"fitted {len(records)} incidents over {span:.0f} min -> {out}")
    return 0


def cmd_segment(args) -> int:
    config = _load(args)
    world = harness.build_world(config)
    out = os.path.join(args.out, "regions.json")
    spatial.save_regions(out, world.regions, k=config.k, seed=config.seed)
    print(f"segmented {world.grid.n_cells} cells into {len(world.regions)} regions -> {out}")
    return 0


def cmd_train_surrogate(args) -> int:
    config = _load(args)
    world = harness.build_world(config)
    forests, samples = harness.train_surrogates(world, config)
    waittime.save_samples_csv(os.path.join(args.out, "surrogate_samples.csv"), samples)
    for rid, model in sorted(forests.items()):
        waittime.save_forest(os.path.join(args.out, f"forest_region_{rid}.json"), model)
    print(f"trained {len(forests)} region forests on {len(samples)} samples -> {args.out}")
    return 0


def cmd_simulate(args) -> int:
    config = _load(args)
    world = harness.build_world(config)
    forests = None
    if config.policy == "hl_ll_forest":
        forests, _ = harness.train_surrogates(world, config)
    records, _ = harness.run_single(world, config, config.policy,
                                    config.eval_seeds[0], 0, forests=forests)
    sim.save_run_log(os.path.join(args.out, "runlog.csv"), records)
    report = harness.summarize([({"seed": config.eval_seeds[0], "chain": 0}, records)])
    harness._dump_json(args.out, "metrics.json", report.to_dict())
    print(f"{len(records)} incidents, mean response {report.mean_s:.1f} s -> {args.out}")
    return 0


def cmd_experiment(args) -> int:
    config = _load(args)
    reports = harness.run_experiment(config, out_dir=args.out)
    for policy, report in reports.items():
        print(f"{policy}: {report.count} incidents, mean {report.mean_s:.1f} s, "
              f"Q1 {report.q1_s:.0f} / Q3 {report.q3_s:.0f}")
    return 0


def cmd_compare_estimators(args) -> int:
    config = _load(args)
    table = harness.compare_estimators(config, out_dir=args.out)
    for k, row in sorted(table.items()):
        print(f"k={k}: forest MSE {row['forest_mse']:.0f}, "
              f"queue MSE {row['queue_mse']:.0f} ({row['n_samples']} samples)")
    return 0


def cmd_inject_failures(args) -> int:
    config = _load(args)
    results = harness.inject_failures(config, n_failures=args.failures,
                                      out_dir=args.out)
    for policy, by_n in results.items():
        means = ", ".join(f"n={n}: {r.mean_s:.1f}s" for n, r in sorted(by_n.items()))
        print(f"{policy}: {means}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("HIERPLAN_LOGLEVEL", "WARNING"),
                        stream=sys.stderr)
    parser = argparse.ArgumentParser(prog="hierplan",
                                     description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    commands = {
        "fit-demand": (cmd_fit_demand, "fit the per-cell arrival model"),
        "segment": (cmd_segment, "cluster incidents into planning regions"),
        "train-surrogate": (cmd_train_surrogate, "train per-region wait forests"),
        "simulate": (cmd_simulate, "run one chain under the configured policy"),
        "experiment": (cmd_experiment, "run the full seed/chain matrix"),
        "compare-estimators": (cmd_compare_estimators, "held-out MSE: forest vs queue"),
        "inject-failures": (cmd_inject_failures, "sweep simultaneous agent failures"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        _global_flags(p)
        if name == "inject-failures":
            p.add_argument("--failures", type=int, default=None,
                           help="max simultaneous failures (default config.n_failures)")
        p.set_defaults(fn=fn)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (harness.ConfigError, demand.DemandError, sim.SimError,
            spatial.SpatialError, waittime.WaitTimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
