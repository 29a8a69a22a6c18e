"""``nodekit`` command line interface.

Subcommands: build-atlas, prepare, augment, loss, postprocess, evaluate.
Every command is deterministic given identical inputs, config, and seed;
failures print machine-readable JSON on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .augment import GinConfig, RampConfig
from .config import load_config
from .errors import NodekitError
from .losses import LossConfig
from .postprocess import PostprocessConfig


def _add_config_args(p):
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker count")


def _load(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def cmd_build_atlas(args):
    manifest = pipeline.build_atlas(_load(args), jobs=args.jobs)
    print(json.dumps({"carina_mm": manifest["carina_mm"],
                      "subjects": len(manifest["subjects"])}))
    return 0


def cmd_prepare(args):
    config = _load(args)
    ids = args.case if args.case else None
    manifest = pipeline.prepare_cases(config, ids, jobs=args.jobs)
    failed = [e["id"] for e in manifest["cases"] if "error" in e]
    print(json.dumps({"prepared": len(manifest["cases"]) - len(failed), "failed": failed}))
    return 0 if len(failed) < len(manifest["cases"]) else 1


def cmd_augment(args):
    gin = GinConfig(layers=args.layers, kernel=args.kernel,
                    channels=args.channels, nonlinearity=args.slope)
    ramp = RampConfig(ramp_epochs=args.ramp_epochs, shape=args.ramp_shape)
    out = pipeline.augment_file(args.input, args.output, args.seed, args.epoch, gin, ramp)
    print(json.dumps({"written": str(out)}))
    return 0


def cmd_loss(args):
    cfg = LossConfig(lambda1=args.l1, lambda2=args.l2, lambda3=args.l3,
                     alpha=args.alpha, beta=args.beta)
    doc = pipeline.loss_report(args.pred, args.gt, args.pa, cfg)
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _parse_grid(tokens):
    grid = {"t": None, "diam": None}
    for tok in tokens:
        if "=" not in tok:
            raise ValueError(f"grid token {tok!r} must look like t=0.5,0.3")
        key, _, values = tok.partition("=")
        if key == "t":
            grid["t"] = [float(v) for v in values.split(",")]
        elif key == "diam":
            grid["diam"] = [None if v == "none" else float(v) for v in values.split(",")]
        else:
            raise ValueError(f"unknown grid key {key!r} (use t=..., diam=...)")
    if grid["t"] is None:
        grid["t"] = [0.5]
    if grid["diam"] is None:
        grid["diam"] = [None]
    return grid


def cmd_postprocess(args):
    cfg = PostprocessConfig(
        t=args.t,
        min_diameter_mm=None if args.min_diam in (None, "none") else float(args.min_diam),
        connectivity=args.connectivity,
    )
    if args.grid:
        grid = _parse_grid(args.grid)
        out_dir = Path(args.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for t in grid["t"]:
            for diam in grid["diam"]:
                run_cfg = replace(cfg, t=t, min_diameter_mm=diam)
                dtag = "none" if diam is None else f"{diam:g}"
                out = out_dir / f"mask_t{t:g}_diam{dtag}.nii.gz"
                pipeline.postprocess_files(
                    args.probs, out, run_cfg,
                    pa_path=args.pa, lungs_path=args.lungs, crop_path=args.crop,
                )
                written.append(str(out))
        print(json.dumps({"written": written}))
        return 0
    out = pipeline.postprocess_files(
        args.probs, args.output, cfg,
        pa_path=args.pa, lungs_path=args.lungs, crop_path=args.crop,
    )
    print(json.dumps({"written": [str(out)]}))
    return 0


def cmd_evaluate(args):
    result = pipeline.evaluate_dirs(
        args.pred, args.gt, args.out, jobs=args.jobs, figures=not args.no_figures
    )
    print(json.dumps({"summary": result["summary"]}, indent=2, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nodekit",
        description="Atlas-prior toolkit for mediastinal lymph node segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-atlas", help="register subjects to the atlas and build priors")
    _add_config_args(p)
    p.set_defaults(func=cmd_build_atlas)

    p = sub.add_parser("prepare", help="transfer priors to subjects and crop/normalize")
    _add_config_args(p)
    p.add_argument("--case", action="append", help="subject id (repeatable; default all)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("augment", help="apply GIN/IPA intensity augmentation")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epoch", type=int, required=True)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--slope", type=float, default=0.2)
    p.add_argument("--ramp-epochs", type=int, default=1000)
    p.add_argument("--ramp-shape", type=float, default=5.0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("loss", help="evaluate loss functionals on prediction/gt volumes")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--pa", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--l1", type=float, default=0.25)
    p.add_argument("--l2", type=float, default=0.25)
    p.add_argument("--l3", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=0.25)
    p.add_argument("--beta", type=float, default=0.75)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("postprocess", help="probability maps to final masks")
    p.add_argument("probs", nargs="+", help="model probability NIfTIs (ensembled)")
    p.add_argument("output", help="output mask path, or directory in --grid mode")
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--min-diam", default=None, help="minimum component diameter mm or 'none'")
    p.add_argument("--pa", default=None, help="occurrence prior NIfTI")
    p.add_argument("--lungs", default=None, help="lung mask NIfTI for hull masking")
    p.add_argument("--crop", default=None, help="crop record JSON to invert")
    p.add_argument("--connectivity", type=int, default=26, choices=(6, 18, 26))
    p.add_argument("--grid", nargs="*", default=None,
                   help="grid mode, e.g. --grid t=0.5,0.3,0.2 diam=none,3,5,7")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("evaluate", help="metrics report over prediction/gt directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NodekitError, ValueError, KeyError, OSError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
