"""Command-line entry point: ``mimscnn <subcommand> [options]``.

Exit status is 0 on success, 1 for bad arguments or an invalid
configuration, and 2 when the run itself fails (missing or corrupt files,
numerical errors).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .rtf import RTFError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# flag -> (config field, type)
_OVERRIDES = {
    "variant": str, "pool": str, "k": int, "decay": float, "optimizer": str, "lr": float,
    "backbone_lr_factor": float, "epochs": int, "batch_bags": int, "seed": int, "data": str,
}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="ExperimentConfig JSON file")
    for name, typ in _OVERRIDES.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)
    p.add_argument("--scales", type=_floats, default=None, help="MSConv scales, e.g. 0.5,0.75,1")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {n: getattr(args, n) for n in _OVERRIDES if getattr(args, n, None) is not None}
    if getattr(args, "scales", None):
        changes["scales"] = args.scales
    return cfg.replace(**changes)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mimscnn", description="Bag classification experiments with shared-kernel multi-scale convolution")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("-v", "--verbose", action="store_true")
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=400)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--stratify-scales", action="store_true")

    p = sub.add_parser("train", parents=[common], help="train one model and write a checkpoint")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="checkpoint directory")

    p = sub.add_parser("eval", parents=[common], help="test AUROC of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("compare-pools", parents=[common], help="AUROC per MIL aggregation scheme")
    _add_config_flags(p)
    p.add_argument("--schemes", default="mean,max,max-inst,k=2,k=3,k=4,k=5")
    p.add_argument("--seeds", type=_ints, default=[0])
    p.add_argument("--csv", help="also write the table as CSV")

    p = sub.add_parser("heatmap", parents=[common], help="contribution heatmaps for positive instances")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--bags", default="", help="comma-separated bag ids (default: all)")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--class", dest="target_class", type=int, choices=(0, 1), default=1)
    p.add_argument("--layer", default="stem")
    p.add_argument("--color", action="store_true", help="also write red-channel PPM overlays")

    p = sub.add_parser("feature-corr", parents=[common], help="stem feature correlation under rescaling")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--scales", type=_floats, default=[1.0, 2.0, 0.75, 0.5])
    p.add_argument("--n-images", type=int, default=100)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--precision", choices=("32", "64"), default="32")
    p.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------
# subcommands; each returns (report, human-readable text)


def _gen_data(args):
    from .synth import SyntheticSpec, write_benchmark

    if args.n_train < 1 or args.n_test < 1:
        raise ConfigError("--n-train and --n-test must be positive")
    spec = SyntheticSpec(stratify_scales=args.stratify_scales)
    d = write_benchmark(args.out, args.seed, args.n_train, args.n_test, spec)
    report = {"out": str(d), "seed": args.seed, "n_train": args.n_train, "n_test": args.n_test}
    return report, f"wrote {args.n_train} train / {args.n_test} test bags to {d}"


def _fmt_bins(bins) -> str:
    return "  ".join(f"[{lo},{hi}): {'-' if a is None else f'{a:.4f}'}"
                     for b in bins for (lo, hi), a in [(b["bin"], b["auroc"])])


def _train(args):
    from .harness import train

    cfg = _config(args)
    _, report = train(cfg, out_dir=args.out)
    lines = [f"variant {cfg.variant}  pool {cfg.pool}  seed {cfg.seed}  parameters {report['parameters']}",
             f"final train loss {report['train_loss'][-1]:.4f}" if report["train_loss"] else "no epochs run"]
    if "auroc" in report:
        lines.append(f"test AUROC {report['auroc']:.4f}")
    if "per_scale_auroc" in report:
        lines.append("per scale bin  " + _fmt_bins(report["per_scale_auroc"]))
    lines.append(f"checkpoint {args.out}")
    return report, "\n".join(lines)


def _eval(args):
    from .harness import evaluate
    from .model import load_checkpoint
    from .synth import load_dataset

    model, _ = load_checkpoint(args.checkpoint)
    bags, truth = load_dataset(Path(args.data) / args.split)
    report = evaluate(model, bags, truth)
    text = f"AUROC {report['auroc']:.4f} on {report['n_bags']} bags"
    if "per_scale_auroc" in report:
        text += "\nper scale bin  " + _fmt_bins(report["per_scale_auroc"])
    return report, text


def _compare_pools(args):
    from .harness import compare_pools

    cfg = _config(args)
    schemes = [s for s in args.schemes.split(",") if s]
    rows = compare_pools(cfg, schemes, args.seeds)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["scheme", "median_auroc", "reference_auroc"] + [f"seed_{s}" for s in args.seeds])
            for r in rows:
                wr.writerow([r["scheme"], r["median"], "" if r["reference"] is None else r["reference"]] + r["auroc"])
    lines = [f"{'scheme':<14}{'median':>8}{'ref':>8}  per seed"]
    for r in rows:
        ref = "-" if r["reference"] is None else f"{r['reference']:.3f}"
        lines.append(f"{r['scheme']:<14}{r['median']:>8.4f}{ref:>8}  "
                     + " ".join(f"{a:.4f}" for a in r["auroc"]))
    return {"rows": rows}, "\n".join(lines)


def _heatmap(args):
    from .localization import heatmap_peak, localize_bag
    from .model import load_checkpoint
    from .synth import load_dataset

    model, _ = load_checkpoint(args.checkpoint)
    bags, _ = load_dataset(Path(args.data) / args.split)
    if args.bags:
        wanted = args.bags.split(",")
        by_id = {b.id: b for b in bags}
        missing = [w for w in wanted if w not in by_id]
        if missing:
            raise ConfigError(f"unknown bag ids: {', '.join(missing)}")
        bags = [by_id[w] for w in wanted]
    if args.limit is not None:
        bags = bags[:args.limit]
    emitted = []
    for bag in bags:
        for item in localize_bag(model, bag, args.target_class, args.out, args.layer, args.color):
            emitted.append({"bag": bag.id, "instance": item["instance"],
                            "probability": item["probability"],
                            "peak": list(heatmap_peak(item["overlay"])),
                            "files": [Path(f).name for f in item["files"]]})
    lines = [f"{e['bag']} slice {e['instance']}  p={e['probability']:.3f}  peak {tuple(e['peak'])}"
             for e in emitted]
    lines.append(f"{len(emitted)} heatmaps from {len(bags)} bags written to {args.out}")
    return {"out": args.out, "emitted": emitted}, "\n".join(lines)


def _feature_corr(args):
    from .harness import feature_corr
    from .model import load_checkpoint
    from .synth import load_dataset

    model, _ = load_checkpoint(args.checkpoint)
    bags, _ = load_dataset(Path(args.data) / args.split)
    res = feature_corr(model, bags, args.scales, args.n_images)
    lines = [f"{'scale':>6}{'mean r':>9}{'ref':>8}{'images':>8}{'skipped':>9}"]
    for s, v in res.items():
        ref = "-" if v["reference"] is None else f"{v['reference']:.3f}"
        lines.append(f"{s:>6}{v['r']:>9.4f}{ref:>8}{v['n']:>8}{v['skipped']:>9}")
    return {str(k): v for k, v in res.items()}, "\n".join(lines)


def _gradcheck(args):
    from .gradsuite import run_suite

    dtype = np.float64 if args.precision == "64" else np.float32
    res = run_suite(args.instances, dtype, args.seed)
    lines = [f"{'op':<18}{'max rel err':>13}{'tolerance':>11}  result"]
    for name, r in res.items():
        lines.append(f"{name:<18}{r['max_error']:>13.3e}{r['tolerance']:>11.0e}  "
                     + ("pass" if r["passed"] else "FAIL"))
    report = {k: {**v, "max_error": float(v["max_error"]), "passed": bool(v["passed"])} for k, v in res.items()}
    if not all(r["passed"] for r in report.values()):
        raise _Failed(report, "\n".join(lines))
    return report, "\n".join(lines)


class _Failed(Exception):
    def __init__(self, report, text):
        super().__init__(text)
        self.report, self.text = report, text


COMMANDS = {
    "gen-data": _gen_data, "train": _train, "eval": _eval, "compare-pools": _compare_pools,
    "heatmap": _heatmap, "feature-corr": _feature_corr, "gradcheck": _gradcheck,
}


def _emit(report, text, as_json: bool) -> None:
    print(json.dumps(report, indent=2, sort_keys=True, default=str) if as_json else text)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        report, text = COMMANDS[args.command](args)
    except _Failed as exc:
        _emit(exc.report, exc.text, args.json)
        return 2
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, RTFError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _emit(report, text, args.json)
    return 0


if __name__ == "__main__":
    sys.exit(main())
