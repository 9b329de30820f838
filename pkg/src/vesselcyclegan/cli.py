"""Command-line entry point.

Exit codes: 0 success, 1 domain error (bad data, config, checkpoint, numerics),
2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config, validate_config, write_effective_config
from .errors import DataError, VesselCycleError
from .evaluation import (
    DIRECTIONS, binarize, evaluate_run, render_overlay, write_report, write_report_csv,
)
from .networks import vessel_map
from .training import GanData, gan_config_from_dict, pretrain_segmenter, train_gan

log = logging.getLogger("vesselcyclegan")

OUT_ENV = "VESSELCYCLE_OUT"


def _run_dir(cfg: RunConfig, args, command: str) -> Path:
    root = os.environ.get(OUT_ENV) or args.out_root or cfg.output_dir or "runs"
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = Path(root) / f"{command}-{stamp}-seed{cfg.seed}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def _resolve_config(args) -> tuple[RunConfig, dict]:
    raw = load_config(args.config) if getattr(args, "config", None) else {}
    if getattr(args, "seed", None) is not None:
        raw = {**raw, "seed": args.seed}
    return validate_config(raw), raw


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare_data(args) -> int:
    manifest = D.load_manifest(args.root, args.layout, validate_counts=not args.no_validate_counts)
    out = Path(args.out or Path(args.root) / "manifest.json")
    manifest.save(out)
    counts = manifest.split_counts()
    print(f"wrote {out}: {len(manifest.entries)} entries {counts}")
    return 0


def cmd_train_seg(args) -> int:
    cfg, raw = _resolve_config(args)
    _seed_everything(cfg.seed)
    root = args.data or cfg.data.hrf_root
    if root is None:
        raise DataError("no HRF dataset given (use --data or data.hrf_root)")
    manifest = D.load_manifest(root, "hrf", validate_counts=cfg.data.validate_counts)
    train = [D.load_entry(e, manifest.root) for e in manifest.select(split="train")]
    val = [D.load_entry(e, manifest.root) for e in manifest.select(split="val")]
    # validation uses one deterministic central patch per image
    val = [_center_patch(im, m, cfg.data.hrf_patch) for im, m in val]
    aug = dataclasses.replace(cfg.seg_augment, crop_size=cfg.data.hrf_patch)

    run_dir = _run_dir(cfg, args, "train-seg")
    write_effective_config(cfg, raw, run_dir / "config.json")
    manifest.save(run_dir / "manifest.json")
    ckpt = pretrain_segmenter(train, val, cfg.seg_train, cfg.seg_net, aug, out_dir=run_dir)
    print(f"segmenter best val Dice {ckpt.best_val_metric:.4f} at epoch {ckpt.epoch}; checkpoint {run_dir / 'best'}")
    return 0


def _center_patch(image, mask, size):
    h, w = image.pixels.shape[-2:]
    size = min(size, h, w)
    off = ((h - size) // 2, (w - size) // 2)
    return D.extract_patch(image, off, size), D.extract_patch(mask, off, size)


def _cffa_patches(manifest, split, patch_cfg):
    return {dom: D.load_patches(manifest, split, dom, patch_cfg) for dom in ("CF", "FA")}


def cmd_train_gan(args) -> int:
    cfg, raw = _resolve_config(args)
    _seed_everything(cfg.seed)
    root = args.data or cfg.data.cffa_root
    if root is None:
        raise DataError("no CF-FA dataset given (use --data or data.cffa_root)")
    seg_ckpt = load_checkpoint(args.seg_ckpt, expected_specs={"V": cfg.seg_net})
    manifest = D.load_manifest(root, "cffa", validate_counts=cfg.data.validate_counts)
    train = _cffa_patches(manifest, "train", cfg.data.patches)
    val = _cffa_patches(manifest, "val", cfg.data.patches)

    run_dir = Path(args.resume).parent if args.resume else _run_dir(cfg, args, "train-gan")
    if not args.resume:
        write_effective_config(cfg, raw, run_dir / "config.json")
        manifest.save(run_dir / "manifest.json")
    best = train_gan(
        GanData(train["CF"], train["FA"], val["CF"], val["FA"]),
        cfg.gan_train, seg_ckpt, cfg.seg_net, cfg.generator, cfg.discriminator,
        cfg.gan_augment, out_dir=run_dir, resume_from=args.resume,
    )
    print(f"GAN best val Dice {best.best_val_metric:.4f} at epoch {best.epoch}; run {run_dir}")
    return 0


def _inversion(gan_ckpt) -> dict:
    gcfg = gan_config_from_dict(gan_ckpt.config)
    return {"CF": gcfg.invert_cf, "FA": gcfg.invert_fa}


def cmd_evaluate(args) -> int:
    cfg, _ = _resolve_config(args)
    ecfg = cfg.eval
    kid = dict(ecfg.kid_embeddings)
    lpips = dict(ecfg.lpips_distances)
    for direction in DIRECTIONS:
        pair = getattr(args, f"kid_{direction}")
        if pair:
            kid[direction] = {"real": pair[0], "fake": pair[1]}
        if getattr(args, f"lpips_{direction}"):
            lpips[direction] = getattr(args, f"lpips_{direction}")
    ecfg = dataclasses.replace(ecfg, kid_embeddings=kid, lpips_distances=lpips,
                               threshold=args.threshold or ecfg.threshold)

    seg_ckpt = load_checkpoint(args.seg_ckpt)
    gan_ckpt = load_checkpoint(args.gan_ckpt, expected_specs={"V": seg_ckpt.nets["V"].spec})
    manifest = D.load_manifest(args.data, "cffa", validate_counts=cfg.data.validate_counts)
    patches = _cffa_patches(manifest, "test", cfg.data.patches)
    reports = evaluate_run(gan_ckpt, seg_ckpt, patches, ecfg, invert=_inversion(gan_ckpt),
                           model_id=args.model_id)
    write_report(args.out, reports)
    if args.csv:
        write_report_csv(args.csv, reports)
    for r in reports:
        print(f"{r.direction}: Dice {r.dice:.4f}  KID {r.kid}  LPIPS {r.lpips}  (n={r.n_images})")
    return 0


def _crop_to_multiple(t: torch.Tensor, factor: int) -> torch.Tensor:
    h, w = t.shape[-2:]
    nh, nw = h - h % factor, w - w % factor
    top, left = (h - nh) // 2, (w - nw) // 2
    return t[:, top:top + nh, left:left + nw]


def cmd_synthesize(args) -> int:
    seg_ckpt = load_checkpoint(args.seg_ckpt)
    gan_ckpt = load_checkpoint(args.gan_ckpt, expected_specs={"V": seg_ckpt.nets["V"].spec})
    src, dst = ("CF", "FA") if args.direction == "cf_to_fa" else ("FA", "CF")
    gen = gan_ckpt.nets["G_B" if dst == "FA" else "G_A"]
    seg = seg_ckpt.nets["V"]
    invert = _inversion(gan_ckpt)
    factor = 2 ** max(gen.spec.downsamplings, seg.spec.levels)
    content = _crop_to_multiple(D.read_image(args.input, channels=3), factor)
    for net in (gen, seg):
        net.eval()
    with torch.no_grad():
        v_content = vessel_map(seg, content[None], invert[src])
        fake = gen(v_content)
        v_fake = vessel_map(seg, fake, invert[dst])
    overlay = render_overlay(binarize(v_content[0], args.threshold), binarize(v_fake[0], args.threshold), fake[0])
    fake_rgb = (fake[0].clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
    D.write_image(args.out, np.concatenate([fake_rgb, overlay], axis=1))
    print(f"wrote {args.out}")
    return 0


def cmd_overlay(args) -> int:
    content = (D.read_image(args.content_mask, channels=1) > 0.5).float()
    generated = (D.read_image(args.generated_mask, channels=1) > 0.5).float()
    base = D.read_image(args.base, channels=3)
    D.write_image(args.out, render_overlay(content, generated, base))
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vesselcyclegan",
                                description="Vessel-routed CycleGAN for CF <-> FA retinal image translation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("prepare-data", help="build a dataset manifest")
    s.add_argument("--layout", choices=("cffa", "hrf"), required=True)
    s.add_argument("--root", required=True)
    s.add_argument("--out", help="manifest path (default ROOT/manifest.json)")
    s.add_argument("--no-validate-counts", action="store_true", help="skip published split-size checks")
    s.set_defaults(func=cmd_prepare_data)

    for name, func, helptext in (("train-seg", cmd_train_seg, "pretrain the vessel segmenter on HRF"),
                                 ("train-gan", cmd_train_gan, "train the GAN on CF-FA")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--seed", type=int)
        s.add_argument("--data", help="dataset root (overrides the config)")
        s.add_argument("--out-root", help=f"output root (${OUT_ENV} takes precedence)")
        if name == "train-gan":
            s.add_argument("--seg-ckpt", required=True)
            s.add_argument("--resume", help="continue from a 'last' checkpoint directory")
        s.set_defaults(func=func)

    s = sub.add_parser("synthesize", help="translate one image and render its vessel overlay")
    s.add_argument("--gan-ckpt", required=True)
    s.add_argument("--seg-ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--direction", choices=DIRECTIONS, default="cf_to_fa")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("evaluate", help="Dice/KID/LPIPS report on the CF-FA test split")
    s.add_argument("--gan-ckpt", required=True)
    s.add_argument("--seg-ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--threshold", type=float)
    s.add_argument("--model-id", default="vesselcyclegan")
    s.add_argument("--csv")
    for direction in DIRECTIONS:
        flag = direction.replace("_", "-")
        s.add_argument(f"--kid-{flag}", nargs=2, metavar=("REAL", "FAKE"), dest=f"kid_{direction}",
                       help="embedding file stems (.npy + .json)")
        s.add_argument(f"--lpips-{flag}", dest=f"lpips_{direction}", metavar="FILE",
                       help="JSON list of per-image LPIPS distances")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("overlay", help="render a red/cyan vessel difference overlay")
    s.add_argument("--content-mask", required=True)
    s.add_argument("--generated-mask", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_overlay)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VesselCycleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
