"""``mssr`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .data import DatasetManifest, ImageError, ManifestError, load_float, load_manifest, write_image
from .evaluation import TileConfig, TilingError, evaluate, infer, split_by_camera
from .models import (
    SpecError, audit_graph, build_network, count_parameters, preset, receptive_field, receptive_field_radius,
)
from .train import CheckpointError, TrainingError, load_checkpoint, load_config, train

log = logging.getLogger("mssr")

MODEL_CHOICES = ["baseline-r", "msrn", "baseline-d", "msdn"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits on its own; route through main so nothing runs on a bad flag
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _thread_limit():
    raw = os.environ.get("MSSR_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MSSR_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("MSSR_THREADS must be non-negative")
    if n == 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _tiling(args) -> TileConfig | None:
    if args.tile is None and args.overlap is None:
        return None
    defaults = TileConfig()
    return TileConfig(tile=args.tile or defaults.tile, overlap=args.overlap or defaults.overlap)


def _load_model(args):
    if not args.ckpt:
        raise UsageError("--ckpt is required")
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    if args.model:
        expected = preset(args.model)
        if (expected.block, expected.multiscale) != (model.spec.block, model.spec.multiscale):
            raise CheckpointError(f"checkpoint {args.ckpt} holds a {model.spec.kind} network, not {args.model}")
    return model


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    if not args.config:
        raise UsageError("--config is required")
    cfg = load_config(args.config)
    if args.model:
        cfg.model = args.model
    if args.seed is not None:
        cfg.seed = args.seed
    if args.loss:
        cfg.loss = args.loss
    if args.ckpt:
        cfg.ckpt_dir = args.ckpt
    if args.manifest:
        cfg.data_manifest = args.manifest
    if not cfg.data_manifest:
        raise UsageError("no training manifest: set data_manifest in the config or pass --manifest")

    def progress(rec):
        print(f"update {rec['update']} lr {rec['lr']:.3g} loss {rec['loss']:.6f} "
              f"psnr {rec['psnr']:.3f} ssim {rec['ssim']:.4f}", file=sys.stderr)

    result = train(cfg, progress=progress)
    print(json.dumps({"ckpt": str(cfg.ckpt_dir), "update": result.checkpoint.update,
                      "curve": str(Path(cfg.ckpt_dir) / "curve.csv")}))
    return 0


def cmd_infer(args) -> int:
    if not args.out:
        raise UsageError("--out is required")
    if bool(args.inp) == bool(args.manifest):
        raise UsageError("give exactly one of --in or --manifest")
    model = _load_model(args)
    tiling = _tiling(args)
    if args.inp:
        sr = infer(model, load_float(args.inp), ensemble=args.ensemble, tiling=tiling)
        write_image(sr, args.out)
        print(args.out)
        return 0
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    for entry in manifest:
        sr = infer(model, load_float(entry.lr_path), ensemble=args.ensemble, tiling=tiling)
        target = out_dir / f"{entry.id}.png"
        write_image(sr, target)
        print(target)
    return 0


def cmd_eval(args) -> int:
    if not args.manifest:
        raise UsageError("--manifest is required")
    model = _load_model(args)
    manifest = load_manifest(args.manifest, require_hr=True)
    report = evaluate(model, manifest, ensemble=args.ensemble, tiling=_tiling(args),
                      y_channel=args.y_channel, outputs=args.out)
    sys.stdout.write(report.to_text())
    if args.report:
        report.write(args.report)
    return 0


def cmd_inspect(args) -> int:
    if args.ckpt:
        model = _load_model(args)
    elif args.model:
        model = build_network(preset(args.model), seed=None)
    else:
        raise UsageError("give --model or --ckpt")
    audit = audit_graph(model)
    total, per_layer = count_parameters(model)
    print(f"model={model.spec.kind}")
    print(f"spec={json.dumps(model.spec.to_dict())}")
    print(f"parameters={total}")
    print(f"additions={audit['additions']}")
    print(f"concatenations={audit['concatenations']}")
    print(f"receptive_field={receptive_field(model)}")
    print(f"receptive_field_radius={receptive_field_radius(model):g}")
    return 0


def cmd_self_test(args) -> int:
    from . import selftest

    return 0 if selftest.run(sys.stdout) else 1


def cmd_split(args) -> int:
    if not args.manifest or not args.out:
        raise UsageError("--manifest and --out are required")
    manifest = load_manifest(args.manifest)
    first, second = split_by_camera(manifest)
    out_dir = Path(args.out)
    for name, part in (("cam1", first), ("cam2", second)):
        path = out_dir / f"{name}.tsv"
        DatasetManifest(part.entries, manifest.root).write(path)
        print(f"{path}\t{len(part)}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add(p, *flags):
    adders = {
        "model": lambda: p.add_argument("--model", choices=MODEL_CHOICES, help="network preset"),
        "config": lambda: p.add_argument("--config", metavar="PATH", help="training config (key=value lines)"),
        "ckpt": lambda: p.add_argument("--ckpt", metavar="DIR", help="checkpoint directory"),
        "manifest": lambda: p.add_argument("--manifest", metavar="PATH", help="dataset manifest (TSV)"),
        "in": lambda: p.add_argument("--in", dest="inp", metavar="PATH", help="input image"),
        "out": lambda: p.add_argument("--out", metavar="PATH", help="output image or directory"),
        "ensemble": lambda: p.add_argument("--ensemble", action=argparse.BooleanOptionalAction, default=None,
                                           help="average over the 8 flip/rotation variants"),
        "tile": lambda: p.add_argument("--tile", type=int, metavar="N", help="tile size in pixels"),
        "overlap": lambda: p.add_argument("--overlap", type=int, metavar="N", help="tile overlap in pixels"),
        "seed": lambda: p.add_argument("--seed", type=int, metavar="N", help="master seed"),
        "loss": lambda: p.add_argument("--loss", choices=["l1", "l2"], help="training loss"),
        "y-channel": lambda: p.add_argument("--y-channel", action="store_true", help="score PSNR/SSIM on luma only"),
        "report": lambda: p.add_argument("--report", metavar="PATH", help="write the metric report (.tsv or .json)"),
    }
    for flag in flags:
        adders[flag]()


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mssr", description="Multi-scale residual/dense super-resolution toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    table = [
        ("train", cmd_train, "train a network from a config file",
         ("config", "model", "ckpt", "manifest", "seed", "loss")),
        ("infer", cmd_infer, "super-resolve an image or every LR image of a manifest",
         ("model", "ckpt", "in", "out", "manifest", "ensemble", "tile", "overlap")),
        ("eval", cmd_eval, "score a checkpoint on a manifest",
         ("model", "ckpt", "manifest", "ensemble", "tile", "overlap", "y-channel", "report", "out")),
        ("inspect", cmd_inspect, "print architecture statistics",
         ("model", "ckpt")),
        ("self-test", cmd_self_test, "run the gradient and oracle checks", ()),
        ("split", cmd_split, "split a manifest by camera tag into cam1.tsv and cam2.tsv",
         ("manifest", "out")),
    ]
    for name, fn, help_text, flags in table:
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add(p, *flags)
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if getattr(args, "ensemble", None) is None and "ensemble" in vars(args):
        args.ensemble = args.command == "eval"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"mssr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ImageError, ManifestError, SpecError, CheckpointError,
            TilingError, TrainingError, FloatingPointError) as exc:
        print(f"mssr {args.command}: {exc}", file=sys.stderr)
        return 1


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
