"""Command-line entry point: ``envlight run|translate|metrics|synth|render``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .pipeline import PipelineConfig, PipelineError


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    changes = {}
    if getattr(args, "bands", None) is not None:
        changes["sh_bands"] = args.bands
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "no_record", False):
        changes["record"] = False
    return cfg.replace(**changes) if changes else cfg


def _initial_em(args):
    return pipeline._load_em(args.em) if getattr(args, "em", None) else None


def cmd_run(args) -> int:
    result = pipeline.run_pipeline(args.dataset, _config(args), args.out, _initial_em(args))
    print(result.timings.table(), end="")
    return result.status


def cmd_render(args) -> int:
    cfg = _config(args).replace(record=False)
    result = pipeline.run_pipeline(args.dataset, cfg, args.out, pipeline._load_em(args.em))
    print(f"rendered {result.frames_rendered} frames")
    return result.status


def cmd_translate(args) -> int:
    rows = pipeline.translate_cmd(args.em_file, args.delta, args.output, args.mode, args.steps,
                                  args.truth, args.metrics)
    for step, loss, corr in rows:
        print(f"{step},{loss:.6f},{corr:.6f}")
    return 0


def cmd_metrics(args) -> int:
    loss, corr = pipeline.metrics_cmd(args.em_file, args.truth_file)
    print(f"data_loss={loss:.6f} correlation={corr:.6f}")
    return 0


def cmd_synth(args) -> int:
    root = pipeline.synth_cmd(args.out, args.config, args.seed)
    print(f"dataset written to {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="envlight", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="acquire an EM from a dataset and composite the object")
    run.add_argument("dataset", help="manifest file or dataset directory")
    run.add_argument("--config", help="pipeline config (JSON)")
    run.add_argument("--out", default="out", help="output directory")
    run.add_argument("--no-record", action="store_true", help="never write to the EM")
    run.add_argument("--bands", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--em", help="start from this EMAP file")
    run.set_defaults(func=cmd_run)

    ren = sub.add_parser("render", help="composite the object using a fixed EM")
    ren.add_argument("dataset")
    ren.add_argument("--em", required=True, help="EMAP file to light with")
    ren.add_argument("--config")
    ren.add_argument("--out", default="out")
    ren.add_argument("--bands", type=int)
    ren.add_argument("--seed", type=int)
    ren.set_defaults(func=cmd_render)

    tr = sub.add_parser("translate", help="re-project an EM to a displaced origin")
    tr.add_argument("em_file")
    tr.add_argument("--delta", type=float, nargs=3, required=True, metavar=("DX", "DY", "DZ"))
    tr.add_argument("--steps", type=int, default=1)
    tr.add_argument("--mode", choices=("permanent", "temporary"), default="temporary")
    tr.add_argument("--output", "--out", dest="output", help="translated EMAP file")
    tr.add_argument("--truth", help="scene JSON or EMAP ground truth")
    tr.add_argument("--metrics", help="CSV file for (step, data_loss, correlation)")
    tr.set_defaults(func=cmd_translate)

    me = sub.add_parser("metrics", help="data loss and correlation between two EMs")
    me.add_argument("em_file")
    me.add_argument("truth_file")
    me.set_defaults(func=cmd_metrics)

    sy = sub.add_parser("synth", help="generate a synthetic dataset")
    sy.add_argument("--config", help="scene config (JSON)")
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int)
    sy.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:  # undefined correlation, invalid geometry, ...
        print(f"error: {exc}", file=sys.stderr)
        return PipelineError.exit_code


if __name__ == "__main__":
    sys.exit(main())
