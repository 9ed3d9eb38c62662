"""Command-line entry points: gen-data, train, eval, report.

Every subcommand takes a YAML config plus optional key=value overrides.
Sweep keys in the config fan `train` out into one run per grid point,
each in its own subdirectory.  Exit codes: 0 ok, 2 config error,
3 numerical abort, 4 I/O or data-integrity error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import metrics as M
from . import report as report_mod
from . import trainer
from .config import expand_sweep, load_config_file, parse_overrides, resolve_config
from .datagen import DatasetSpec, generate_shapes_dataset, load_manifest
from .determinism import deterministic_requested, setup_determinism
from .errors import ConfigError, DataIntegrityError, NumericalAbort, VemkdError

logger = logging.getLogger(__name__)


def _resolved(args) -> dict:
    file_values = load_config_file(args.config) if args.config else {}
    return resolve_config(file_values, parse_overrides(args.override))


def cmd_gen_data(args) -> int:
    cfg = _resolved(args)
    spec = DatasetSpec(
        name=cfg["data.name"], image_size=cfg["data.image_size"],
        num_train=cfg["data.num_train"], num_val=cfg["data.num_val"],
        seed=cfg["data.seed"],
    )
    manifest_path = generate_shapes_dataset(spec, cfg["data.path"])
    print(manifest_path)
    return 0


def cmd_train(args) -> int:
    cfg = _resolved(args)
    runs = list(expand_sweep(cfg))
    if len(runs) > 1 and args.resume:
        raise ConfigError("--resume cannot be combined with a sweep")
    base_dir = cfg["output_dir"]
    for suffix, run_cfg in runs:
        if suffix:
            run_cfg["output_dir"] = str(Path(base_dir) / suffix)
            print(f"[sweep] {suffix}")
        summary = trainer.run(run_cfg, resume=args.resume)
        print(json.dumps({k: v for k, v in summary.items() if k != "final_eval"}, indent=2))
        if summary["final_eval"] is not None:
            print(json.dumps(summary["final_eval"], indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg = _resolved(args)
    setup_determinism(deterministic_requested(cfg["deterministic"]))
    manifest = load_manifest(cfg["data.path"])
    state = trainer.TrainState(cfg, manifest)
    state.load(args.ckpt)
    kwargs = {}
    if state.mode == "offline-unpaired-teacher-target":
        kwargs = {"reference": "teacher", "teacher": state.teacher}
    report = M.evaluate(state.student, manifest, state.embedder, **kwargs)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    out_path = Path(args.out) if args.out else Path(args.ckpt) / "eval.json"
    out_path.write_text(text + "\n")
    return 0


def cmd_report(args) -> int:
    result = report_mod.write_report(args.runs, args.out)
    print(result["text"])
    print(f"\nwrote {result['csv']} and {len(result['plots'])} plot(s)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vemkd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="render the synthetic shapes dataset")
    p_gen.add_argument("--config", default=None, help="YAML config file")
    p_gen.add_argument("override", nargs="*", help="key=value overrides")
    p_gen.set_defaults(func=cmd_gen_data)

    p_train = sub.add_parser("train", help="run (or sweep) training")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p_train.add_argument("override", nargs="*")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpointed student")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("override", nargs="*")
    p_eval.set_defaults(func=cmd_eval)

    p_report = sub.add_parser("report", help="compare runs: table + curve plots")
    p_report.add_argument("--runs", nargs="+", required=True)
    p_report.add_argument("--out", default="report")
    p_report.add_argument("override", nargs="*")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except (DataIntegrityError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    except VemkdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
