"""``latentmal`` command line: synth, run, report, serve, inspect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dataio import SyntheticSpec, generate_synthetic, save_binary, save_csv
from .errors import DomainError, FormatError, ParseError, PreconditionError, ShapeError
from .persist import inspect_archive
from .pipeline import CLASSIFIERS, ExperimentConfig, run_experiment, write_reports

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _csv_list(text, cast=str):
    return [cast(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentmal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic labelled dataset")
    s.add_argument("--n", type=int, default=10_000, help="number of rows")
    s.add_argument("--dim", type=int, default=512, help="feature count")
    s.add_argument("--informative", type=int, default=32, help="informative feature count")
    s.add_argument("--sep", type=float, default=2.0, help="class separation")
    s.add_argument("--balance", type=float, default=0.5, help="fraction of positives")
    s.add_argument("--density", type=float, default=0.05,
                   help="nonzero rate of uninformative columns")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out", required=True, help="output path (.lmld or .csv)")

    r = sub.add_parser("run", help="run the experiment grid from a JSON config")
    r.add_argument("--config", help="JSON config file; flags override it")
    r.add_argument("--dataset", help="dataset path (.lmld or .csv)")
    r.add_argument("--output-dir")
    r.add_argument("--splits", type=_csv_list, help="e.g. 30/30,50/30,70/30")
    r.add_argument("--seeds", type=lambda t: _csv_list(t, int), help="e.g. 42,123")
    r.add_argument("--mode", choices=["raw", "latent", "both"], dest="feature_mode")
    r.add_argument("--classifiers", type=_csv_list, help=",".join(CLASSIFIERS))
    r.add_argument("--epochs", type=int, help="VAE epochs")
    r.add_argument("--no-timing", action="store_true",
                   help="omit wall times so reruns emit identical bytes")
    r.add_argument("--quiet", action="store_true")

    rp = sub.add_parser("report", help="rebuild CSV tables from a run directory")
    rp.add_argument("run_dir")

    sv = sub.add_parser("serve", help="score NDJSON requests over TCP")
    sv.add_argument("--classifier", required=True, help="classifier archive")
    sv.add_argument("--scaler", required=True, help="scaler archive")
    sv.add_argument("--encoder", help="VAE archive; omit to serve a raw-feature classifier")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8765)

    i = sub.add_parser("inspect", help="print archive metadata as JSON")
    i.add_argument("archive")
    return p


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n_samples=args.n, feature_dim=args.dim, n_informative=args.informative,
                         class_separation=args.sep, label_balance=args.balance,
                         background_density=args.density)
    ds = generate_synthetic(spec, args.seed)
    out = Path(args.out)
    if out.suffix.lower() == ".csv":
        save_csv(ds, out)
    else:
        save_binary(ds, out)
    print(f"wrote {out}: {ds.n_samples} rows x {ds.feature_dim} features, "
          f"{int(ds.labels.sum())} positive")
    return EXIT_OK


def _config_from_args(args) -> ExperimentConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.dataset:
        base["dataset"] = {"path": args.dataset}
        base.pop("synthetic", None)
    for key in ("output_dir", "splits", "seeds", "feature_mode", "classifiers"):
        val = getattr(args, key)
        if val is not None:
            base[key] = val
    if args.epochs is not None:
        base.setdefault("vae", {})["epochs"] = args.epochs
    if args.no_timing:
        base["record_timing"] = False
    if "dataset" not in base and "synthetic" not in base:
        raise UsageError("no dataset: pass --dataset or set dataset/synthetic in the config")
    try:
        return ExperimentConfig.from_dict(base)
    except (PreconditionError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    log = (lambda m: None) if args.quiet else (lambda m: print(m, flush=True))
    res = run_experiment(cfg, log)
    for f in res["failures"]:
        print(f"failed: {f['split']} seed {f['seed']} {f['mode']} {f['classifier']} "
              f"({f['stage']}): {f['error']}", file=sys.stderr)
    print(f"{len(res['cells'])} cells, {len(res['failures'])} failures -> {cfg.output_dir}")
    return EXIT_RUNTIME if not res["cells"] else EXIT_OK


def cmd_report(args) -> int:
    for path in write_reports(args.run_dir):
        print(path)
    return EXIT_OK


def cmd_serve(args) -> int:
    from .score_service import load_scoring_model, serve

    model = load_scoring_model(args.classifier, args.scaler, args.encoder)

    def ready(addr):
        print(f"serving model {model.digest} on {addr[0]}:{addr[1]}", flush=True)

    try:
        serve(model, args.host, args.port, ready)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_inspect(args) -> int:
    print(json.dumps(inspect_archive(args.archive), indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "report": cmd_report, "serve": cmd_serve,
            "inspect": cmd_inspect}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"latentmal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, ParseError, ShapeError, DomainError, PreconditionError,
            json.JSONDecodeError) as exc:
        print(f"latentmal: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        print(f"latentmal: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
