"""Command line entry point: ``ifssl {gen-data,run,sweep,report}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from ifssl.dataio import NoiseSpec, inject_uniform_noise, load_csv, make_gaussian_clusters, make_rings, save_csv
from ifssl.errors import ConfigurationError, InputError
from ifssl.harness import (
    FIELD_TYPES,
    ExperimentConfig,
    output_root,
    parse_config,
    report,
    run_experiment,
    sweep,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_RUN = 4


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for f in dataclasses.fields(ExperimentConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=FIELD_TYPES[f.name].upper())


def _overrides(args) -> dict:
    return {f.name: getattr(args, f.name) for f in dataclasses.fields(ExperimentConfig)}


def _load(args) -> ExperimentConfig:
    ov = _overrides(args)
    if ov.get("output_dir") is None and args.config is None:
        ov["output_dir"] = output_root()
    cfg = parse_config(args.config, ov)
    if ov.get("output_dir") is None:
        cfg = dataclasses.replace(cfg, output_dir=output_root(cfg.output_dir))
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    seed = cfg.seeds[0]
    if cfg.generator == "gaussian":
        ds = make_gaussian_clusters(cfg.m, cfg.n_per_class, cfg.d, cfg.separation, cfg.noise_sigma, seed)
    elif cfg.generator == "rings":
        ds = make_rings(cfg.m, cfg.n_per_class, cfg.radius_gap, cfg.noise_sigma, seed)
    else:
        ds = load_csv(cfg.csv_path)
    if args.noise_ratio is not None:
        ds = inject_uniform_noise(ds, NoiseSpec(cfg.noise_ratio, seed))
    save_csv(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args)
    status = EXIT_OK
    for seed in cfg.seeds:
        s = run_experiment(cfg, seed)
        print(s.to_json().replace("\n", " ").strip())
        if s.diverged:
            status = EXIT_RUN
    return status


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def cmd_sweep(args) -> int:
    cfg = _load(args)
    modes = [m.strip() for m in args.modes.split(",")] if args.modes else None
    rows = sweep(cfg, _floats(args.noise_ratios), modes=modes, jobs=args.jobs)
    print(report([cfg.output_dir]), end="")
    return EXIT_RUN if any(r["test_acc"] is None for r in rows) else EXIT_OK


def cmd_report(args) -> int:
    print(report(args.runs, args.out), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ifssl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="train one configuration for every seed")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid over modes, noise ratios and seeds")
    _add_config_flags(p)
    p.add_argument("--noise-ratios", required=True, help="comma separated, e.g. 0,0.4,0.8")
    p.add_argument("--modes", help="comma separated modes (default: the config's mode)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate finished run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", help="also write the table as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
