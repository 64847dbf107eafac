"""Command-line entry point.

Exit status: 0 on success, 1 for configuration or input errors, 2 when a
grid finished with failed trials.
"""
import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import datasets as D
from .errors import ContractError, DivergenceError
from .experiments import ConfigError, load_config, report, run_grid, train_source
from .systems import SpringParams, TclabParams

log = logging.getLogger("sekf_transfer")

EXIT_OK, EXIT_CONFIG, EXIT_FAILED_TRIALS = 0, 1, 2


def _read_params(system, spec):
    cls = SpringParams if system == "spring" else TclabParams
    if spec is None:
        return cls()
    text = spec if spec.lstrip().startswith("{") else Path(spec).read_text()
    values = json.loads(text)
    known = {f.name for f in fields(cls)}
    if set(values) - known:
        raise ConfigError(f"unknown {system} parameters: {sorted(set(values) - known)}")
    return cls(**values)


def cmd_simulate(args):
    p = _read_params(args.system, args.params_json)
    if args.system == "spring":
        ds = D.build_spring_dataset(p, args.n, args.seed,
                                    0.05 if args.noise is None else args.noise)
    else:
        ds = D.build_tclab_dataset(p, args.hours * 3600.0, args.seed,
                                   0.25 if args.noise is None else args.noise,
                                   stride=args.stride)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.write_dataset(ds, out.with_suffix(".csv"), out.with_suffix(".json"))
    print(f"wrote {len(ds)} examples to {out.with_suffix('.csv')}")
    return EXIT_OK


def cmd_train_source(args):
    cfg = load_config(args.config)
    art = train_source(cfg)
    print(json.dumps({"test_loss": art.test_loss, "val_loss": art.val_loss,
                      "convergence_time": art.convergence_time, "wall_clock": art.wall_clock,
                      "path": str(cfg.root / "source" / "source.json")}))
    return EXIT_OK


def cmd_run_grid(args):
    cfg = load_config(args.config)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    summary = run_grid(cfg, jobs=args.jobs, resume=args.resume)
    print(f"executed {summary.executed}, skipped {summary.skipped}, failed {summary.failed}; "
          f"results in {summary.results_csv}")
    return EXIT_FAILED_TRIALS if summary.failed else EXIT_OK


def cmd_report(args):
    root = Path(args.dir)
    if not (root / "results.csv").exists():
        raise ConfigError(f"no results.csv under {root}")
    if not (args.anova or args.layer_changes):
        args.anova = True
    written = report(root, anova=args.anova, layer_changes=args.layer_changes,
                     n_perm=args.n_perm, seed=args.seed)
    for name, path in written.items():
        print(f"{name}: {path}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="sekf-transfer", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="simulate a system and write a dataset")
    sp.add_argument("--system", choices=("spring", "tclab"), required=True)
    sp.add_argument("--params-json", help="JSON file (or inline object) of physical parameters")
    sp.add_argument("--out", required=True, help="output path stem (.csv and .json written)")
    sp.add_argument("--n", type=int, default=1000, help="spring: number of examples")
    sp.add_argument("--hours", type=float, default=24.0, help="tclab: run length")
    sp.add_argument("--stride", type=int, default=1, help="tclab: window stride in samples")
    sp.add_argument("--noise", type=float, help="measurement noise standard deviation")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train-source", help="train and persist the source model")
    sp.add_argument("--config", required=True)
    sp.set_defaults(func=cmd_train_source)

    sp = sub.add_parser("run-grid", help="run the transfer-learning trial grid")
    sp.add_argument("--config", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True,
                    help="skip trials with a completed record (default on)")
    sp.set_defaults(func=cmd_run_grid)

    sp = sub.add_parser("report", help="ANOVA and weight-change tables from a grid directory")
    sp.add_argument("--dir", required=True)
    sp.add_argument("--anova", action="store_true")
    sp.add_argument("--layer-changes", action="store_true")
    sp.add_argument("--n-perm", type=int, default=4999)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED_TRIALS
    except (ContractError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
