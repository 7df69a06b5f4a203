"""Command-line entry point.

Every command prints a JSON object on stdout when it succeeds. On failure it
prints a JSON error object on stderr and exits nonzero (2 for configuration
and input problems, 1 otherwise).
"""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import CodiIQAError, ConfigurationError
from .harness import ExperimentConfig, export_attention, load_experiment_config, run_experiment
from .trainer import evaluate

COMMAND_KIND = {
    "train": "single",
    "cross-eval": "cross-dataset",
    "sweep": "efficiency",
    "loo-distortion": "loo-distortion",
    "ablate": "ablation",
}


def parse_stages(text):
    """'4', '1,2,4', '1-4' or '4..0' -> sorted stage indices."""
    out = set()
    for part in text.split(","):
        part = part.strip()
        sep = ".." if ".." in part else "-" if "-" in part else None
        try:
            if sep:
                a, b = (int(v) for v in part.split(sep))
                out.update(range(min(a, b), max(a, b) + 1))
            else:
                out.add(int(part))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad stage list {text!r}") from None
    if not out or min(out) < 0 or max(out) > 4:
        raise argparse.ArgumentTypeError(f"stages must lie in 0..4, got {text!r}")
    return sorted(out)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


def _add_common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="experiment YAML file")
    p.add_argument("--seed", type=int)
    p.add_argument("--strategy", choices=["A", "B", "C", "D"])
    p.add_argument("--stages", type=parse_stages, help="stage subset, e.g. 4..0, 1-4 or 2,4")
    p.add_argument("--dim-d", type=int, dest="dim_d")
    p.add_argument("--dim-r", type=int, dest="dim_r")
    p.add_argument("--fraction", type=float, help="single training fraction for sweeps")
    p.add_argument("--repeats", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="run directory (overrides out_dir)")


def build_parser():
    parser = _Parser(prog="codi-iqa", description="No-reference image quality experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train and test on one dataset, repeated over seeds",
        "cross-eval": "train on one dataset, test on others",
        "sweep": "vary the training fraction against a fixed test split",
        "loo-distortion": "hold out one distortion type at a time",
        "ablate": "train each ablation variant",
    }
    for name in COMMAND_KIND:
        _add_common(sub.add_parser(name, help=helps[name]))
    ev = sub.add_parser("eval", help="evaluate a checkpoint on the config's test datasets")
    _add_common(ev)
    ev.add_argument("--checkpoint", required=True)
    ex = sub.add_parser("export-attention", help="write an activation heatmap")
    _add_common(ex, config_required=False)
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--image", required=True)
    ex.add_argument("--selector", default="fused", help="fused, content:<i>, distortion:<i> or interaction:<i>")
    ex.add_argument("--output", default="attention.png")
    ex.add_argument("--overlay")
    return parser


def apply_overrides(cfg: ExperimentConfig, args, kind=None) -> ExperimentConfig:
    changes = {}
    if kind is not None:
        changes["kind"] = kind
    if args.seed is not None:
        changes["seed"] = args.seed
        changes["split"] = replace(cfg.split, seed=args.seed)
    train = cfg.train
    if args.strategy is not None:
        train = replace(train, strategy=args.strategy)
    if args.epochs is not None:
        train = replace(train, epochs=args.epochs)
    changes["train"] = train
    ablation = cfg.ablation
    if args.stages is not None:
        ablation = replace(ablation, stages=args.stages)
    if args.dim_d is not None:
        ablation = replace(ablation, dim=args.dim_d)
    if args.dim_r is not None:
        ablation = replace(ablation, squeeze=args.dim_r)
    changes["ablation"] = ablation
    if args.fraction is not None:
        changes["fractions"] = [args.fraction]
    if args.repeats is not None:
        changes["repeats"] = args.repeats
    if args.out is not None:
        changes["out_dir"] = args.out
    return replace(cfg, **changes)


def _run(args):
    if args.command == "export-attention":
        written, heat = export_attention(args.checkpoint, args.image, args.selector, args.output, args.overlay)
        return {"written": [str(p) for p in written], "size": list(heat.shape)}
    cfg = apply_overrides(load_experiment_config(args.config), args, COMMAND_KIND.get(args.command))
    if args.command == "eval":
        if not cfg.test_data:
            raise ConfigurationError("eval needs test datasets under data.test")
        reports = {}
        for ref in cfg.test_data:
            m = ref.load()
            reports[m.name] = evaluate(args.checkpoint, m).to_dict()
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "eval.report").write_text(json.dumps(reports, indent=2, sort_keys=True))
        return {"reports": reports}
    root = run_experiment(cfg)
    return {"run_dir": str(root), "median": json.loads((root / "median.report").read_text())}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigurationError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _run(args)
    except CodiIQAError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 2 if isinstance(exc, ValueError) else 1
    except Exception as exc:  # noqa: BLE001 - surfaced as a JSON error object
        print(json.dumps({"error": "internal", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"ok": True, "command": args.command, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
