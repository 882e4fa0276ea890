"""``glyforge`` command line.

Exit status: 0 success, 2 configuration error, 3 data error (missing or
malformed inputs), 4 numeric failure (divergence, blow-up).
"""

import argparse
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import pipeline as pl
from .linalg import MatrixExpError
from .matching import MatchingFailure
from .neural import NonFiniteLoss
from .population import PopulationFormatError
from .store import MissingArtifact

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _common(p):
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")


def build_parser():
    ap = argparse.ArgumentParser(prog="glyforge", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None,
                    help="BLAS/OpenMP threads; 1 guarantees bit reproducibility")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    _common(p)
    p.add_argument("--patients", type=int)
    p.add_argument("--days", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("population", help="virtual patient population")
    psub = p.add_subparsers(dest="action", required=True)
    g = psub.add_parser("generate")
    _common(g)
    g.add_argument("--seed", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--out")

    p = sub.add_parser("extract", help="cut QC-filtered segments")
    _common(p)
    p.add_argument("--cgm")
    p.add_argument("--insulin")
    p.add_argument("--out")
    p.add_argument("--stride", type=int)
    p.add_argument("--seed", type=int, help="patient split seed")

    p = sub.add_parser("match", help="twin matching and ODE state extraction")
    _common(p)
    p.add_argument("--segments")
    p.add_argument("--population")
    p.add_argument("--out")

    p = sub.add_parser("train", help="train a neural forecaster")
    _common(p)
    p.add_argument("--model", required=True, choices=pl.TRAINABLE)
    p.add_argument("--segments")
    p.add_argument("--matches")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("forecast", help="forecast the test split")
    _common(p)
    p.add_argument("--model", required=True,
                   help="checkpoint file, or one of: " + ", ".join(pl.FORECASTERS))
    p.add_argument("--kind", choices=pl.FORECASTERS,
                   help="forecaster kind when --model is a checkpoint path")
    p.add_argument("--segments")
    p.add_argument("--matches")
    p.add_argument("--population")
    p.add_argument("--out")

    p = sub.add_parser("evaluate", help="metrics on the shared test set")
    _common(p)
    p.add_argument("--predictions", nargs="+")
    p.add_argument("--actuals")
    p.add_argument("--out")
    p.add_argument("--worst-k", type=int)

    p = sub.add_parser("report", help="summary tables and charts")
    _common(p)
    p.add_argument("--metrics", help="evaluate output directory")
    p.add_argument("--out")

    p = sub.add_parser("pipeline", help="run stages end to end")
    _common(p)
    p.add_argument("--stages", default=",".join(pl.STAGES))
    p.add_argument("--out", help="data directory")
    return ap


def _overrides(args):
    pairs = list(args.set)
    simple = {"patients": "patients", "days": "days", "stride": "stride", "worst_k": "worst_k",
              "size": "population_size", "epochs": "max_epochs"}
    for attr, key in simple.items():
        if getattr(args, attr, None) is not None:
            pairs.append(f"{key}={getattr(args, attr)}")
    seed_key = {"synth": "seed_cohort", "population": "seed_population",
                "extract": "seed_split", "train": "seed_training"}.get(args.command)
    if seed_key and getattr(args, "seed", None) is not None:
        pairs.append(f"{seed_key}={args.seed}")
    if args.threads is not None:
        pairs.append(f"threads={args.threads}")
    if args.command == "pipeline" and args.out:
        pairs.append(f"data_dir={args.out}")
    return pairs


def _kind_of_checkpoint(path):
    with open(path) as fh:
        head = fh.readline()
        spec = fh.readline()
    if "recursive" in head:
        return "recursive"
    return json.loads(spec.split(" ", 1)[1])["name"]


def dispatch(args, cfg):
    c = args.command
    if c == "synth":
        return pl.run_synth(cfg, args.out)
    if c == "population":
        return pl.run_population(cfg, args.out)
    if c == "extract":
        return pl.run_extract(cfg, args.cgm, args.insulin, args.out)
    if c == "match":
        return pl.run_match(cfg, args.segments, args.population, args.out)
    if c == "train":
        return pl.run_train(cfg, args.model, args.segments, args.matches, args.out)
    if c == "forecast":
        if args.model in pl.FORECASTERS:
            kind, ckpt = args.model, None
        else:
            ckpt = args.model
            if not os.path.exists(ckpt):
                raise MissingArtifact(ckpt, "train")
            kind = args.kind or _kind_of_checkpoint(ckpt)
        return pl.run_forecast(cfg, kind, ckpt, args.segments, args.matches, args.population,
                               args.out)
    if c == "evaluate":
        return pl.run_evaluate(cfg, args.predictions, args.actuals, args.out, args.worst_k)
    if c == "report":
        return pl.run_report(cfg, args.metrics, args.out)
    if c == "pipeline":
        stages = [s for s in args.stages.split(",") if s]
        return pl.run_pipeline(cfg, stages)
    raise pl.ConfigError(f"unknown command {c}")


def _fail(code, stage, exc):
    report = {"status": code, "stage": stage, "error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(report, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = pl.load_config(args.config, _overrides(args))
    except pl.ConfigError as exc:
        return _fail(EXIT_CONFIG, args.command, exc)
    try:
        with threadpool_limits(limits=cfg.threads):
            out = dispatch(args, cfg)
    except pl.ConfigError as exc:
        return _fail(EXIT_CONFIG, args.command, exc)
    except (NonFiniteLoss, MatrixExpError, MatchingFailure, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, args.command, exc)
    except (MissingArtifact, PopulationFormatError, OSError, ValueError, KeyError) as exc:
        return _fail(EXIT_DATA, args.command, exc)
    if out:
        print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
