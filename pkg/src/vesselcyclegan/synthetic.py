"""Synthetic retinal-like images with analytically placed vessels.

Used for smoke training, tests and the toy experiment scripts. Vessels are
straight bands; CF renders them dark on an orange background, FA renders
them light on a dark background.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .data import ClassLabel, Domain, RetinalImage, VesselMask, write_image

CF_BACKGROUND = (0.80, 0.42, 0.20)
CF_VESSEL = (0.35, 0.10, 0.05)
FA_BACKGROUND = 0.15
FA_VESSEL = 0.90


def vessel_pattern(seed: int, h: int = 64, w: int = 64, n_vessels: int = 4, half_width: float = 1.5) -> np.ndarray:
    """Binary H x W map of ``n_vessels`` straight bands through the image centre region."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    mask = np.zeros((h, w), dtype=np.float32)
    for _ in range(n_vessels):
        angle = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(0.25, 0.75) * h, rng.uniform(0.25, 0.75) * w
        dist = np.abs(np.cos(angle) * (xx - cx) + np.sin(angle) * (yy - cy))
        mask[dist < half_width] = 1.0
    return mask


def render_cf(mask: np.ndarray, noise: float = 0.0, rng=None) -> torch.Tensor:
    m = torch.from_numpy(mask)[None]
    bg = torch.tensor(CF_BACKGROUND)[:, None, None]
    fg = torch.tensor(CF_VESSEL)[:, None, None]
    img = bg * (1 - m) + fg * m
    if noise:
        img = img + noise * torch.from_numpy(rng.standard_normal(img.shape).astype(np.float32))
    return img.clamp(0, 1)


def render_fa(mask: np.ndarray, noise: float = 0.0, rng=None) -> torch.Tensor:
    m = torch.from_numpy(mask)[None]
    img = (FA_BACKGROUND * (1 - m) + FA_VESSEL * m).expand(3, -1, -1).clone()
    if noise:
        img = img + noise * torch.from_numpy(rng.standard_normal(img.shape).astype(np.float32))
    return img.clamp(0, 1)


def toy_pair(seed: int, size: int = 64, label=ClassLabel.HEALTHY):
    """(CF image, FA image, vessel mask) sharing one vessel pattern."""
    mask = vessel_pattern(seed, size, size)
    cf = RetinalImage(render_cf(mask), Domain.CF, label, f"cf{seed}")
    fa = RetinalImage(render_fa(mask), Domain.FA, label, f"fa{seed}")
    return cf, fa, VesselMask(torch.from_numpy(mask)[None])


def toy_unpaired_sets(n: int = 4, size: int = 64, seed: int = 0):
    """``n`` CF and ``n`` FA images whose vessel patterns are all distinct."""
    cf = [toy_pair(seed + i, size)[0] for i in range(n)]
    fa = [toy_pair(seed + 1000 + i, size)[1] for i in range(n)]
    return cf, fa


def toy_segmentation_samples(n: int = 2, size: int = 64, seed: int = 0, green: bool = False):
    """(CF image, mask) pairs; with ``green`` each image also appears as its
    grey-replicated green channel, as in the HRF expansion."""
    out = []
    for i in range(n):
        cf, _, mask = toy_pair(seed + i, size)
        out.append((cf, mask))
        if green:
            g = RetinalImage(cf.pixels[1:2].expand(3, -1, -1).clone(), Domain.CF, cf.class_label, cf.source_id + "g")
            out.append((g, mask))
    return out


def write_toy_cffa(root, splits: dict, size: tuple[int, int] = (72, 90), seed: int = 0) -> Path:
    """Write a CF-FA layout. ``splits`` maps split name to number of pairs;
    classes alternate healthy/unhealthy. FA images are written single-channel."""
    root = Path(root)
    (root / "cf").mkdir(parents=True, exist_ok=True)
    (root / "fa").mkdir(parents=True, exist_ok=True)
    index, k = {}, 0
    for split, count in splits.items():
        for _ in range(count):
            pid = f"{k:03d}"
            label = ClassLabel.HEALTHY if k % 2 == 0 else ClassLabel.UNHEALTHY
            mask = vessel_pattern(seed + k, *size)
            fa_mask = mask if split == "test" else vessel_pattern(seed + 500 + k, *size)
            write_image(root / "cf" / f"{pid}.png", render_cf(mask))
            write_image(root / "fa" / f"{pid}.png", render_fa(fa_mask)[:1])
            index[pid] = {"split": split, "class": label.value}
            k += 1
    (root / "splits.json").write_text(json.dumps(index, indent=2))
    return root


def write_toy_hrf(root, splits: dict, size: int = 800, seed: int = 0) -> Path:
    """Write an HRF layout of ``size`` x ``size`` CF images with vessel masks."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    index, k = {}, 0
    for split, count in splits.items():
        for _ in range(count):
            name = f"{k:02d}_{'h' if k % 2 == 0 else 'dr'}"
            mask = vessel_pattern(seed + k, size, size, n_vessels=12, half_width=6.0)
            write_image(root / "images" / f"{name}.png", render_cf(mask))
            if split != "test":
                write_image(root / "masks" / f"{name}.png", torch.from_numpy(mask)[None])
            index[name] = {"split": split}
            k += 1
    (root / "splits.json").write_text(json.dumps(index, indent=2))
    return root


# Toy-scale recipes used by the smoke tests and scripts/toy_experiment.py.
# Larger learning rates than the full recipe: a handful of 64x64 images
# need far fewer, bolder steps.
def toy_specs():
    from .networks import DiscriminatorSpec, GeneratorSpec, SegNetSpec
    return (SegNetSpec(levels=2, base_width=8),
            GeneratorSpec(levels=2, base_width=8, vit_blocks=2, vit_embed_dim=32, vit_heads=4, token_grid=16),
            DiscriminatorSpec(layers=2, base_width=8))


def pretrain_toy_segmenter(seed: int = 0, epochs: int = 60, n: int = 4, size: int = 64):
    """Small V trained on colour and green-replicated toy CF images."""
    from .training import SegTrainConfig, pretrain_segmenter
    seg_spec = toy_specs()[0]
    samples = toy_segmentation_samples(n, size, seed=seed, green=True)
    cfg = SegTrainConfig(epochs=epochs, lr=1e-2, lr_decay_start_epoch=None, early_stop_patience=epochs, seed=seed)
    return pretrain_segmenter(samples, samples, cfg, seg_spec)
