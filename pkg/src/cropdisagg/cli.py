"""Command-line entry point: ``cropdisagg synth | train | evaluate``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Every file written starts with a ``# cropdisagg <version> seed=<s>
config=<hash>`` comment line. ``DISAGG_THREADS`` sets the number of
worker processes used while tuning.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from . import pipeline as pl
from . import weaksup as ws
from .config import config_hash, read_flat_config
from .dataio import assemble_batches, load_dataset
from .errors import DisaggError, InvalidConfigError, MissingCheckpointError, UsageError
from .hierarchy import RegionHierarchy
from .synth import SynthConfig, export_world, generate_world

log = logging.getLogger("cropdisagg")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cropdisagg", description="Weakly supervised crop-yield disaggregation.")
    parser.add_argument("--version", action="version", version=f"cropdisagg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    subs = parser.subcommand_parsers = {}
    p = subs["synth"] = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--config", required=True, help="flat key = value file with SynthConfig fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")

    p = subs["train"] = sub.add_parser("train", help="tune, retrain and checkpoint one weakly supervised model")
    p.add_argument("--data", required=True, help="data directory")
    p.add_argument("--model", choices=("lstm", "cnn"), default="lstm")
    p.add_argument("--variant", choices=ws.VARIANTS, default="trend")
    p.add_argument("--out", required=True, help="output directory (must differ from --data)")
    p.add_argument("--config", help="flat key = value file with run settings")
    p.add_argument("--seed", type=int, help="override the config seed")

    p = subs["evaluate"] = sub.add_parser("evaluate", help="forecast the test years and compare models")
    p.add_argument("--data", required=True, help="data directory")
    p.add_argument("--checkpoints", nargs="*", default=[], help="checkpoint files written by train")
    p.add_argument("--baselines", default="all", help="'all', 'none' or a comma list of " + ",".join(pl.BASELINES))
    p.add_argument("--out", required=True, help="output directory (must differ from --data)")
    p.add_argument("--config", help="flat key = value file with run settings")
    p.add_argument("--seed", type=int, help="override the config seed")
    return parser


# ---------------------------------------------------------------- helpers


def _run_config(args) -> pl.RunConfig:
    values = read_flat_config(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = pl.RunConfig.from_dict(values)
    cfg.workers = pl.workers_from_env()
    return cfg


def _check_dirs(data: str, out: str) -> Path:
    d, o = Path(data).resolve(), Path(out).resolve()
    if d == o:
        raise UsageError("output directory must differ from the data directory")
    return o


def _load(data: str):
    hierarchy = RegionHierarchy.from_csv(Path(data) / "regions.csv")
    return load_dataset(data, hierarchy), hierarchy


def _baseline_list(text: str) -> tuple[str, ...]:
    if text == "all":
        return pl.BASELINES
    if text in ("none", ""):
        return ()
    names = tuple(t.strip() for t in text.split(",") if t.strip())
    unknown = [n for n in names if n not in pl.BASELINES]
    if unknown:
        raise UsageError(f"unknown baselines {unknown}; choose from {', '.join(pl.BASELINES)}")
    return names


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, parser) -> int:
    try:
        values = read_flat_config(args.config)
    except InvalidConfigError as exc:
        raise InvalidConfigError(f"{exc}\n{parser.subcommand_parsers['synth'].format_usage().strip()}") from None
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = SynthConfig.from_dict(values)
    paths = export_world(generate_world(cfg), args.out)
    for p in paths:
        log.info("wrote %s", p)
    return 0


def cmd_train(args, parser) -> int:
    out = _check_dirs(args.data, args.out)
    cfg = _run_config(args)
    dataset, hierarchy = _load(args.data)
    prep = pl.prepare(dataset, hierarchy, cfg)
    run = pl.train_ws(prep, args.model, args.variant, cfg)
    h = pl.header_line(cfg.seed, pl.run_hash(cfg, {"model": args.model, "variant": args.variant}))
    out.mkdir(parents=True, exist_ok=True)
    run.model.save(out / "checkpoint.json", extra={"meta": h})
    cols = ["epoch", "train_loss", "val_loss"]
    pl.write_csv(out / "train_log.csv", cols, run.selection.log, h)
    pl.write_csv(out / "train_log_final.csv", cols, run.final.log, h)
    tcols = list(run.tuning.table[0])
    pl.write_csv(out / "tuning.csv", tcols, run.tuning.table, h)
    pl.write_json(out / "hyperparameters.json", {
        "model": f"ws_{args.model}", "variant": args.variant, **run.model.hyper,
        "run_config": cfg.to_dict(),
    }, h)
    log.info("best lr=%g l2=%g epochs=%d", *run.tuning.best, run.model.hyper["epochs"])
    return 0


def cmd_evaluate(args, parser) -> int:
    out = _check_dirs(args.data, args.out)
    cfg = _run_config(args)
    which = _baseline_list(args.baselines)
    missing = [c for c in args.checkpoints if not Path(c).is_file()]
    if missing:
        raise MissingCheckpointError(f"checkpoint not found: {', '.join(missing)}")
    if not args.checkpoints and not which:
        raise UsageError("nothing to evaluate: give --checkpoints and/or --baselines")
    dataset, hierarchy = _load(args.data)

    records: list[ws.ForecastRecord] = []
    kinds = []
    for path in args.checkpoints:
        model = ws.WsModel.load(path)
        cutoff = int(model.hyper.get("season_cutoff") or cfg.cutoff_for(dataset.T))
        scaled = model.scaler.apply(dataset) if model.scaler else pl.prepare(dataset, hierarchy, cfg).scaled
        test_years = pl.make_temporal_split(dataset.years).test_years
        records += pl.ws_records(model, assemble_batches(scaled, hierarchy, test_years, season_cutoff=cutoff))
        kinds.append(model.kind)

    prep = pl.prepare(dataset, hierarchy, cfg)
    base, info = pl.baseline_records(prep, which, cfg)
    records += base
    reports = pl.build_reports(records, prep)
    rows, summary = pl.spatial_tables(records, prep, kinds[0]) if kinds else ([], [])
    result = pl.ExperimentResult(records, reports, rows, summary, baseline_info=info)
    extra = {"checkpoints": [config_hash({"f": Path(c).read_text(encoding="utf-8")}) for c in args.checkpoints],
             "baselines": list(which)}
    h = pl.header_line(cfg.seed, pl.run_hash(cfg, extra))
    for p in pl.write_evaluation(out, result, h):
        log.info("wrote %s", p)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, parser)
    except DisaggError as exc:
        print(f"cropdisagg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
