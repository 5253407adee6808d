"""Command line entry point: ``dtnc cleanse | synth | eval``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from dtnc.netmodel import NetworkError, load_network
from dtnc.pipeline import Config, ConfigError, InputError, read_cleansed, run_stream
from dtnc.synthlab import EvalError, Scenario, deviation_report, generate, read_truth, write_raw, write_report, write_truth
from dtnc.ttdist import DistributionStore

EXIT_OK, EXIT_INPUT, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("dtnc")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtnc", description="Cellular trajectory cleansing")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("cleanse", help="cleanse a trajectory CSV against a network")
    c.add_argument("--network", required=True, type=Path)
    c.add_argument("--input", required=True, help="trajectory CSV, or - for stdin")
    c.add_argument("--output", required=True, help="output CSV, or - for stdout")
    c.add_argument("--window", type=int, default=70)
    c.add_argument("--particles", type=int, default=15)
    c.add_argument("--epsilon", type=float, default=2.0)
    c.add_argument("--delta", type=float, default=0.05)
    c.add_argument("--gamma0", type=float, default=1.0)
    c.add_argument("--vmax", type=float, default=50.0)
    c.add_argument("--policy", default="even", help="even | direction")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--init-samples", type=int, default=100)
    c.add_argument("--dist-store", type=Path, help="JSON store; loaded if present, written after the run")
    c.add_argument("--timings", type=Path, help="write per-phase timings as JSON")

    s = sub.add_parser("synth", help="generate a synthetic city with ground truth")
    s.add_argument("--spec", type=Path, help="scenario JSON (defaults used when omitted)")
    s.add_argument("--out-raw", required=True, type=Path)
    s.add_argument("--out-truth", required=True, type=Path)
    s.add_argument("--out-network", type=Path, help="also write the generated network")
    s.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="compare cleansed output with ground truth")
    e.add_argument("--cleansed", required=True, type=Path)
    e.add_argument("--truth", required=True, type=Path)
    e.add_argument("--report", required=True, type=Path)
    e.add_argument("--skip-missing", action="store_true", help="ignore records without a ground-truth position")
    return p


def _cleanse(args) -> int:
    config = Config(
        window_len=args.window,
        n_particles=args.particles,
        epsilon=args.epsilon,
        delta=args.delta,
        gamma0=args.gamma0,
        v_max=args.vmax,
        policy=args.policy,
        rng_seed=args.seed,
        init_samples=args.init_samples,
        workers=args.workers,
    )
    try:
        config.validate()
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        net = load_network(args.network, init_samples=config.init_samples, seed=config.rng_seed)
        dists = None
        if args.dist_store is not None and args.dist_store.exists():
            dists = DistributionStore.load(args.dist_store)
        source = sys.stdin if args.input == "-" else args.input
        output = sys.stdout if args.output == "-" else args.output
        summary, store = run_stream(source, net, config, output, dists=dists)
    except (InputError, NetworkError, OSError, KeyError, ValueError) as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    if summary.dropped:
        log.warning("dropped %d records with non-increasing timestamps", summary.dropped)
    if args.dist_store is not None:
        store.save(args.dist_store)
    if args.timings is not None:
        with open(args.timings, "w", encoding="utf-8") as fh:
            json.dump({"total": summary.timings, "windows": summary.per_window}, fh, indent=2)
    log.info("%d windows, %d records, %d samples", summary.windows, summary.records, summary.samples)
    return EXIT_OK


def _synth(args) -> int:
    try:
        scenario = Scenario()
        if args.spec is not None:
            with open(args.spec, encoding="utf-8") as fh:
                scenario = Scenario.from_json(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    except (TypeError, ValueError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        gen = generate(scenario, args.seed)
    except ValueError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    with open(args.out_raw, "w", encoding="utf-8") as fh:
        write_raw(fh, gen.raw)
    with open(args.out_truth, "w", encoding="utf-8") as fh:
        write_truth(fh, gen.truth)
    if args.out_network is not None:
        gen.net.write(args.out_network)
    return EXIT_OK


def _eval(args) -> int:
    try:
        cleansed = read_cleansed(args.cleansed)
        truth = read_truth(args.truth)
        report = deviation_report(cleansed, truth, skip_missing=args.skip_missing)
    except (OSError, KeyError, ValueError, EvalError) as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    write_report(report, args.report)
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"cleanse": _cleanse, "synth": _synth, "eval": _eval}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
