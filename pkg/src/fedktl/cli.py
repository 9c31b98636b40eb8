"""Command line entry point: ``fedktl run | gen-data | validate``."""
import argparse
import logging
import sys

from .data import make_synthetic_dataset, write_dataset_file
from .experiment import ConfigError, ExperimentConfig, run_experiment

log = logging.getLogger("fedktl")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

_GEN_KEYS = {"C": int, "d": int, "per-class": int, "spread": float, "seed": int}


def _parse_assignments(items):
    values = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or key not in _GEN_KEYS:
            raise ConfigError(f"expected KEY=VALUE with KEY in {', '.join(_GEN_KEYS)}, got {item!r}")
        try:
            values[key] = _GEN_KEYS[key](raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
    missing = {"C", "d", "per-class"} - set(values)
    if missing:
        raise ConfigError(f"missing {', '.join(sorted(missing))}")
    return values


def _cmd_run(args):
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.ablation is not None:
        changes["ablation"] = args.ablation
    if args.bridge is not None:
        changes["bridge"] = args.bridge
    cfg = cfg.replace(**changes)

    def progress(rep):
        log.info("round %d  acc %.4f  loss_A %.4f  loss_M %.4f",
                 rep.round, rep.weighted_acc, rep.mean_loss_A, rep.mean_loss_M)

    out = run_experiment(cfg, args.out, on_round=progress)
    s = out["summary"]
    print(f"weighted accuracy {s['weighted_acc_mean']:.4f} +/- {s['weighted_acc_std']:.4f} "
          f"over seeds {s['seeds']}")
    return EXIT_OK


def _cmd_gen_data(args):
    v = _parse_assignments(args.synthetic)
    ds = make_synthetic_dataset(v["C"], v["d"], v["per-class"], v.get("spread", 0.5), v.get("seed", 0))
    write_dataset_file(ds, args.out)
    print(f"wrote {ds.n} samples (C={ds.C}, d={ds.d}) to {args.out}")
    return EXIT_OK


def _cmd_validate(args):
    ExperimentConfig.load(args.config)
    print(f"{args.config}: ok")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="fedktl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
    run.add_argument("--ablation")
    run.add_argument("--out", default="out")
    run.add_argument("--bridge", help="directory for external generator exchange files")
    run.set_defaults(func=_cmd_run)

    gen = sub.add_parser("gen-data", help="write a synthetic KTLD dataset")
    gen.add_argument("--synthetic", nargs="+", required=True, metavar="KEY=VALUE",
                     help="C=.. d=.. per-class=.. [spread=..] [seed=..]")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gen_data)

    val = sub.add_parser("validate", help="check a config file against the schema")
    val.add_argument("--config", required=True)
    val.set_defaults(func=_cmd_validate)
    return parser


def _glue_ablation(argv):
    # ablation names such as "-L^MSE" look like flags to argparse
    out = []
    it = iter(argv)
    for tok in it:
        if tok == "--ablation":
            nxt = next(it, None)
            out.append(tok if nxt is None else f"--ablation={nxt}")
        else:
            out.append(tok)
    return out


def main(argv=None):
    parser = build_parser()
    argv = _glue_ablation(sys.argv[1:] if argv is None else list(argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which doubles as the config error code
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
