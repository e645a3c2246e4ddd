"""Command-line entry point: ``ganca <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data, evaluate, plotting
from .config import RunConfig, parse_assignments
from .errors import ConfigError, GancaError, ImageIOError, UsageError
from .rng import stream

log = logging.getLogger("ganca")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add(sub, name, help_text):
    return sub.add_parser(name, help=help_text, description=help_text, formatter_class=_Formatter)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ganca", description="Edge-conditioned neural cellular automata: supervised and adversarial training.", formatter_class=_Formatter)
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = _add(sub, "edges", "Compute Canny edges for a directory of RGBA PNGs and write a manifest.")
    s.add_argument("--in", dest="in_dir", required=True, help="directory of ground-truth PNGs")
    s.add_argument("--out", dest="out_dir", default=None, help="where edge PNGs and manifest.json go (default: the input directory)")
    s.add_argument("--sigma", type=float, default=data.CANNY_SIGMA, help="Gaussian blur sigma")
    s.add_argument("--low", type=float, default=data.CANNY_LOW, help="low threshold, fraction of max gradient")
    s.add_argument("--high", type=float, default=data.CANNY_HIGH, help="high threshold, fraction of max gradient")
    s.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=list(data.DEFAULT_SIZE), help="working resolution")
    s.add_argument("--val-fraction", type=float, default=0.2, help="fraction of images held out for validation")
    s.add_argument("--seed", type=int, default=0, help="split seed")
    s.add_argument("--force", action="store_true", help="recompute cached edge images")
    s.add_argument("--ood", dest="ood_dir", default=None, help="directory of extra edge PNGs (no ground truth) to add as the ood split")
    s.add_argument("--ood-perturb", type=float, default=None, metavar="STRENGTH", help="also add one perturbed copy of every edge image as ood")

    s = _add(sub, "train", "Train an NCA, supervised or adversarially (GANCA).")
    s.add_argument("--config", default=None, help="JSON run config; every key is optional")
    s.add_argument("--mode", choices=("supervised", "ganca"), default=None, help="override config mode")
    s.add_argument("--manifest", default=None, help="override config manifest")
    s.add_argument("--out", dest="out_dir", default=None, help="override config out_dir")
    s.add_argument("--steps", type=int, default=None, help="override config steps")
    s.add_argument("--batch-size", type=int, default=None, help="override config batch_size")
    s.add_argument("--seed", type=int, default=None, help="override config seed")
    s.add_argument("--loss-kind", choices=("bce_smoothed", "wgan"), default=None, help="override config loss_kind")
    s.add_argument("--set", dest="assignments", action="append", default=[], metavar="KEY=VALUE", help="override any config key (repeatable)")
    s.add_argument("--resume", default=None, help="continue from this checkpoint")
    s.add_argument("--no-figures", action="store_true", help="skip the loss-curve figure")

    s = _add(sub, "generate", "Grow an image from an edge PNG with a trained checkpoint.")
    s.add_argument("--checkpoint", required=True, help="nca or ganca checkpoint")
    s.add_argument("--edge", required=True, help="edge PNG (bright strokes are edges)")
    s.add_argument("--iters", type=int, default=evaluate.DEFAULT_EVAL_ITERS, help="NCA iterations")
    s.add_argument("--out", default="generated.png", help="output PNG")
    s.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=None, help="resample the edge image first")
    s.add_argument("--frames", action="store_true", help="also export every frame and a frame-grid figure")
    s.add_argument("--frames-dir", default=None, help="frame directory (default: <out>_frames)")

    s = _add(sub, "eval", "Score a checkpoint on every manifest entry.")
    s.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    s.add_argument("--manifest", required=True, help="dataset manifest JSON")
    s.add_argument("--iters", type=int, default=evaluate.DEFAULT_EVAL_ITERS, help="NCA iterations")
    s.add_argument("--out", default="report.json", help="report JSON; a per-entry CSV is written next to it")
    s.add_argument("--figures", default=None, metavar="DIR", help="render comparison figures into DIR")
    s.add_argument("--ganca", default=None, metavar="CKPT", help="GANCA checkpoint to compare against (writes edge|GANCA|NCA|GT sheets)")

    s = _add(sub, "perturb", "Make a synthetic out-of-distribution edge image.")
    s.add_argument("--in", dest="in_png", required=True, help="edge PNG")
    s.add_argument("--strength", type=float, default=0.5, help="perturbation strength in [0, 1]")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--out", default=None, help="output PNG (default: <in>.ood.png)")

    s = _add(sub, "faces", "Draw a synthetic set of emoji-style faces.")
    s.add_argument("--out", dest="out_dir", required=True, help="output directory")
    s.add_argument("-n", type=int, default=10, help="number of faces")
    s.add_argument("--size", type=int, default=32, help="image side length")
    s.add_argument("--seed", type=int, default=0, help="random seed")

    s = _add(sub, "report", "Plot a metrics CSV written by train.")
    s.add_argument("--metrics", required=True, help="metrics.csv")
    s.add_argument("--out", default=None, help="figure path (default: next to the CSV)")
    return p


# ---------------------------------------------------------------------------


def cmd_edges(args) -> int:
    in_dir = Path(args.in_dir)
    if not in_dir.is_dir():
        raise UsageError(f"input directory not found: {in_dir}")
    paths = data.list_images(in_dir)
    if not paths:
        raise ConfigError(f"no images found in {in_dir}")
    failures = []
    for p in paths:
        try:
            data.load_png(p)
        except ImageIOError as exc:
            failures.append(str(exc))
    if failures:
        for f in failures:
            print(f"error: {f}", file=sys.stderr)
        return 1
    out_dir = Path(args.out_dir) if args.out_dir else in_dir
    manifest = data.build_manifest(
        in_dir, args.val_fraction, args.seed, edge_dir=out_dir, size=tuple(args.size),
        sigma=args.sigma, low=args.low, high=args.high, force=args.force, ood_dir=args.ood_dir,
    )
    if args.ood_perturb is not None:
        data.add_perturbed_ood(manifest, out_dir / "ood", args.ood_perturb, args.seed)
    path = manifest.save(out_dir / "manifest.json")
    counts = {s: len(manifest.split(s)) for s in data.SPLITS}
    print(f"wrote {path} ({', '.join(f'{k}={v}' for k, v in counts.items())})")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = parse_assignments(args.assignments)
    flags = {
        "mode": args.mode, "manifest": args.manifest, "out_dir": args.out_dir, "steps": args.steps,
        "batch_size": args.batch_size, "seed": args.seed, "loss_kind": args.loss_kind,
    }
    cfg = cfg.override(**overrides).override(**flags).validate()
    manifest = data.DatasetManifest.load(cfg.manifest)
    out_dir = Path(cfg.out_dir)
    if cfg.mode == "supervised":
        from .supervised import train_supervised

        result = train_supervised(cfg.train_config(), manifest, out_dir, resume=args.resume)
    else:
        from .gan import train_ganca

        result = train_ganca(cfg.gan_config(), manifest, out_dir, resume=args.resume)
    if not args.no_figures:
        plotting.plot_metrics(result.metrics_path, out_dir / "metrics.png")
    print(f"wrote {result.final_checkpoint}")
    return 0


def cmd_generate(args) -> int:
    params = ckpt.load_nca(args.checkpoint)
    if args.iters < 0:
        raise UsageError(f"--iters must be >= 0, got {args.iters}")
    edge = data.load_edge(args.edge, tuple(args.size) if args.size else None)
    out = Path(args.out)
    if args.frames:
        frames_dir = Path(args.frames_dir) if args.frames_dir else out.with_name(out.stem + "_frames")
        paths = evaluate.export_frames(params, edge, args.iters, frames_dir)
        frames = [data.load_png(p) for p in paths]
        plotting.plot_frames(frames, frames_dir / "frames.png")
        data.save_png(frames[-1], out)
        print(f"wrote {len(paths)} frames to {frames_dir}")
    else:
        rgba = evaluate.generate(params, edge[None], args.iters)[0]
        data.save_png(rgba, out)
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    manifest = data.DatasetManifest.load(args.manifest)
    outputs: dict = {}
    report = evaluate.eval_dataset(args.checkpoint, manifest, args.iters, outputs=outputs)
    report.config["checkpoint"] = str(args.checkpoint)
    out = Path(args.out)
    report.save(out)
    report.save_csv(out.with_suffix(".csv"))
    for split, agg in report.aggregates.items():
        mean = "n/a" if agg["mean"] is None else f"{agg['mean']:.5f}"
        print(f"{split}: n={agg['count']} mean_mse={mean}")
    if args.figures or args.ganca:
        fig_dir = Path(args.figures) if args.figures else out.parent / "figures"
        gan_out: dict = {}
        if args.ganca:
            evaluate.eval_dataset(args.ganca, manifest, args.iters, outputs=gan_out)
            evaluate.export_comparison({"nca": args.checkpoint, "ganca": args.ganca}, manifest, fig_dir / "sheets", args.iters)
        for split in data.SPLITS:
            entries = manifest.split(split)
            if not entries:
                continue
            rows = []
            for e in entries:
                tiles = [evaluate.edge_tile(manifest.load_edge(e))]
                if args.ganca:
                    tiles.append(data.over_white(gan_out[e.id]))
                tiles.append(data.over_white(outputs[e.id]))
                gt = manifest.load_gt(e)
                if gt is not None:
                    tiles.append(data.over_white(gt))
                rows.append((e.id, tiles))
            titles = plotting.COLUMN_TITLES if args.ganca else ("Edge", "NCA", "GT")
            plotting.plot_comparison(rows, fig_dir / f"{split}.png", titles)
        print(f"wrote figures to {fig_dir}")
    print(f"wrote {out}")
    return 0


def cmd_perturb(args) -> int:
    edge = data.load_edge(args.in_png)
    out = Path(args.out) if args.out else Path(args.in_png).with_suffix(".ood.png")
    data.save_edge(data.perturb_edges(edge, stream(args.seed, "perturb"), args.strength), out)
    print(f"wrote {out}")
    return 0


def cmd_faces(args) -> int:
    from .faces import make_faces

    paths = make_faces(args.out_dir, args.n, args.size, args.seed)
    print(f"wrote {len(paths)} faces to {args.out_dir}")
    return 0


def cmd_report(args) -> int:
    metrics = Path(args.metrics)
    if not metrics.is_file():
        raise UsageError(f"metrics file not found: {metrics}")
    out = Path(args.out) if args.out else metrics.with_suffix(".png")
    plotting.plot_metrics(metrics, out)
    print(f"wrote {out}")
    return 0


COMMANDS = {
    "edges": cmd_edges,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "perturb": cmd_perturb,
    "faces": cmd_faces,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GancaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
