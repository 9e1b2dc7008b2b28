"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure or
divergence, 3 gradient check failure. Diagnostics go to stderr; machine-readable
output goes to stdout or the output directory.
"""
import argparse
import json
import logging
import os
import sys
import time

from .config import load_config
from .errors import (ArgumentError, ConfigError, DataError, FormatError, OmudaError,
                     TrainingDivergence)

log = logging.getLogger("omuda")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p):
    p.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, e.g. cam.t_f=0.7 (repeatable)")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")


def build_parser():
    parser = _Parser(prog="omuda", description="Desk-scale masked mean-teacher domain adaptation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write source, target, target_val and aux datasets")
    _common(p)
    p.add_argument("--out", required=True, help="output data directory")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", help="data directory from `generate` (default: generate in memory)")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")

    p = sub.add_parser("evaluate", help="per-class IoU of a checkpoint as JSON")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="data directory from `generate`")
    p.add_argument("--split", default="target_val", choices=("target_val", "source"))

    p = sub.add_parser("ablate", help="run an ablation grid over seeds")
    _common(p)
    p.add_argument("--grid", default="components",
                   help="preset (components, masks, cdm-modes) or path to a grid JSON file")
    p.add_argument("--data", help="data directory (default: generate in memory)")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds (at least 3)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    _common(p)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config(args):
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None and args.command == "train":
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def _datasets(config, data_dir):
    from .trainer import load_datasets, make_datasets
    if data_dir is None:
        return make_datasets(config), config
    ds, scene = load_datasets(data_dir)
    if scene.to_dict() != config.scene.to_dict():
        log.warning("using the scene stored in %s instead of the configured one", data_dir)
    import dataclasses
    return ds, dataclasses.replace(config, scene=scene)


def cmd_generate(config, out_dir):
    from .trainer import save_datasets
    counts = save_datasets(config, out_dir)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    print(json.dumps({"out": out_dir, "counts": counts}, sort_keys=True))
    return EXIT_OK


def cmd_train(config, data_dir, out_dir):
    from .trainer import run_training
    ds, config = _datasets(config, data_dir)
    t0 = time.time()
    try:
        res = run_training(config, ds, out_dir=out_dir)
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}; last good checkpoint kept in {out_dir}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("trained %d iterations in %.1f s", config.train.iterations, time.time() - t0)
    print(json.dumps({"final_mIoU": res.final_miou, "best_mIoU": res.best_miou, "out": out_dir},
                     sort_keys=True))
    return EXIT_OK


def cmd_evaluate(checkpoint, data_dir, split="target_val"):
    from .model import load_checkpoint
    from .trainer import evaluate, load_datasets
    model = load_checkpoint(checkpoint)
    ds, scene = load_datasets(data_dir)
    if model.dims[2] != scene.K:
        raise DataError(f"checkpoint has {model.dims[2]} classes, data has {scene.K}")
    images = ds.target_val if split == "target_val" else ds.source
    res = evaluate(model, images, scene.K).iou()
    out = {"split": split, "mIoU": res.miou,
           "per_class_iou": {scene.class_names[k]: res.per_class[k] for k in range(scene.K)}}
    print(json.dumps(out, indent=2))
    return EXIT_OK


def _grid(spec):
    from .eval import GRIDS, AblationGrid
    if spec in GRIDS:
        return GRIDS[spec]
    try:
        with open(spec, encoding="utf-8") as fh:
            return AblationGrid.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grid: {exc}", "--grid") from exc


def cmd_ablate(config, grid_spec, data_dir, out_dir, seeds):
    from .eval import format_table, run_ablation
    grid = _grid(grid_spec)
    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError("seeds must be integers", "--seeds") from exc
    ds, config = _datasets(config, data_dir)
    report = run_ablation(config, grid, ds, seed_list, out_dir)
    sys.stdout.write(format_table(report, list(config.scene.class_names)))
    return EXIT_OK


def cmd_gradcheck(config, seed=0):
    from .gradcheck import all_passed, check_gradients
    reports = check_gradients(seed, config=config)
    for name, r in reports.items():
        print(f"{name:8s} {r}")
    return EXIT_OK if all_passed(reports) else EXIT_GRADCHECK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = _config(args) if hasattr(args, "overrides") else None
        if getattr(args, "print_config", False):
            print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
            return EXIT_OK
        if args.command == "generate":
            return cmd_generate(config, args.out)
        if args.command == "train":
            return cmd_train(config, args.data, args.out)
        if args.command == "evaluate":
            return cmd_evaluate(args.checkpoint, args.data, args.split)
        if args.command == "ablate":
            return cmd_ablate(config, args.grid, args.data, args.out, args.seeds)
        return cmd_gradcheck(config, args.seed)
    except (ConfigError, ArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OmudaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
