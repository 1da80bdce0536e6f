"""Command line entry point: ``pgvae <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import experiments, localizer, phantom, training


def _phantom_generate(args) -> int:
    spec = (phantom.PhantomSpec.from_dict(json.loads(Path(args.spec).read_text()))
            if args.spec else phantom.default_phantom_spec())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        vol, mask = phantom.generate_phantom(dataclasses.replace(spec, seed=spec.seed + i))
        phantom.save_volume(vol, out / f"vol_{i:03d}.pgpv")
        phantom.save_volume(mask, out / f"mask_{i:03d}.pgpv")
    print(f"wrote {args.count} phantom(s) to {out}")
    return 0


def _localize(args) -> int:
    vol = phantom.load_volume(args.volume)
    mask = phantom.load_volume(args.mask)
    if not isinstance(vol, phantom.Volume) or not isinstance(mask, phantom.MaskVolume):
        raise SystemExit("--volume must hold an image and --mask a mask")
    if vol.dims != mask.dims:
        raise SystemExit(f"volume {vol.dims} and mask {mask.dims} differ in shape")
    norm = phantom.normalize_intensity(vol, args.window[0], args.window[1])
    zs = phantom.target_slices(mask) if args.slices == "target" else range(vol.dims[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.volume).stem
    n = 0
    for z in zs:
        patches = localizer.localize_slice(
            phantom.slice_axial(norm, z), phantom.slice_axial(mask, z), args.prompt, k=args.k, ps=args.ps,
            cell=args.cell, stride=args.stride, threshold=args.threshold, nms_radius=args.nms_radius,
            volume_id=stem, z=z)
        for j, p in enumerate(patches):
            localizer.save_patch(p, out / f"{stem}_z{z:03d}_{j}.pgpp")
            n += 1
    print(f"wrote {n} patch(es) to {out}")
    return 0


def _load_data(data_dir, config):
    d = Path(data_dir)
    if (d / "train").is_dir() and (d / "eval").is_dir():
        return localizer.load_patch_dir(d / "train"), localizer.load_patch_dir(d / "eval")
    patches = localizer.load_patch_dir(d)
    if not patches:
        raise SystemExit(f"no .pgpp patches in {d}")
    return training.split_holdout(patches, config.holdout_fraction)


def _train(args) -> int:
    config = training.load_config(args.config)
    train_set, eval_set = _load_data(args.data, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    training.save_config(config, out / "config.json")
    state, _ = training.train(config, train_set, eval_set or None, out_dir=out, resume=args.resume)
    print(f"trained {state.step} steps; outputs in {out}")
    return 0


def _sweep(args) -> int:
    config = training.load_config(args.config)
    ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
    if args.data:
        train_set, eval_set = _load_data(args.data, config)
    else:
        train_set = experiments.phantom_patch_dataset(args.volumes, seed=args.phantom_seed)
        eval_set = experiments.phantom_patch_dataset(
            args.eval_volumes, seed=args.phantom_seed + experiments.EVAL_SEED_OFFSET)
    experiments.ratio_sweep(config, ratios, train_set, eval_set, out_dir=args.out, keep=args.panels)
    print((Path(args.out) / "table1_reconstruction.txt").read_text())
    print((Path(args.out) / "table2_segmentation.txt").read_text())
    return 0


def _report(args) -> int:
    result = experiments.load_sweep(args.input)
    paths = experiments.render_report(result, args.out)
    print(f"wrote {len(paths)} file(s) to {args.out}")
    return 0


def _init_config(args) -> int:
    training.save_config(training.RunConfig(), args.out)
    print(f"wrote default run configuration to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pgvae", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="phantom volume tools")
    phs = ph.add_subparsers(dest="phantom_command", required=True)
    gen = phs.add_parser("generate", help="write phantom volume/mask pairs as PGPV files")
    gen.add_argument("--spec", help="phantom spec JSON (default: built-in abdomen phantom)")
    gen.add_argument("--out", required=True)
    gen.add_argument("--count", type=int, default=1)
    gen.set_defaults(func=_phantom_generate)

    loc = sub.add_parser("localize", help="prompt-guided patch extraction to PGPP files")
    loc.add_argument("--volume", required=True)
    loc.add_argument("--mask", required=True)
    loc.add_argument("--prompt", required=True)
    loc.add_argument("--k", type=int, default=4, help="ROIs per slice")
    loc.add_argument("--out", required=True)
    loc.add_argument("--ps", type=int, default=64)
    loc.add_argument("--cell", type=int, default=32)
    loc.add_argument("--stride", type=int, default=16)
    loc.add_argument("--threshold", type=float, default=-1.0)
    loc.add_argument("--nms-radius", type=float, default=16.0)
    loc.add_argument("--slices", choices=("target", "all"), default="target")
    loc.add_argument("--window", type=float, nargs=2, default=(-200.0, 300.0), metavar=("MIN", "MAX"))
    loc.set_defaults(func=_localize)

    tr = sub.add_parser("train", help="train one model")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True, help="directory of .pgpp patches (or train/ and eval/ subdirs)")
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.set_defaults(func=_train)

    sw = sub.add_parser("sweep", help="synthetic:real ratio sweep")
    sw.add_argument("--config", required=True)
    sw.add_argument("--ratios", default="0,0.25,0.5,0.75,1")
    sw.add_argument("--out", required=True)
    sw.add_argument("--data", help="patch directory; default generates phantom patches")
    sw.add_argument("--volumes", type=int, default=20)
    sw.add_argument("--eval-volumes", type=int, default=4)
    sw.add_argument("--phantom-seed", type=int, default=0)
    sw.add_argument("--panels", type=int, default=4, help="qualitative samples kept per ratio")
    sw.set_defaults(func=_sweep)

    rp = sub.add_parser("report", help="render tables and panels from a sweep directory")
    rp.add_argument("--in", dest="input", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=_report)

    ic = sub.add_parser("init-config", help="write a complete default run configuration")
    ic.add_argument("--out", required=True)
    ic.set_defaults(func=_init_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
