"""Vessel Dice, KID, LPIPS aggregation, overlays and Table-style reports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import CheckpointError, ConfigError, DimensionError, MetricError
from .networks import vessel_map

DIRECTIONS = ("cf_to_fa", "fa_to_cf")
RED = (255, 0, 0)
CYAN = (0, 255, 255)
WHITE = (255, 255, 255)


@dataclass
class BinaryVesselMask:
    pixels: torch.Tensor
    threshold_used: float = 0.5

    def __post_init__(self):
        if not torch.all((self.pixels == 0) | (self.pixels == 1)):
            raise MetricError("binary vessel mask must contain only 0 and 1")


def binarize(prob_map, threshold: float = 0.5) -> BinaryVesselMask:
    """Pixel is a vessel iff its probability is strictly above ``threshold``."""
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    p = prob_map.pixels if hasattr(prob_map, "pixels") else prob_map
    return BinaryVesselMask((p > threshold).to(torch.float32), threshold)


def dice_score(a, b) -> float:
    """2|a & b| / (|a| + |b|); 1.0 when both masks are empty."""
    a = a.pixels if hasattr(a, "pixels") else a
    b = b.pixels if hasattr(b, "pixels") else b
    if a.shape != b.shape:
        raise DimensionError(f"dice_score: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    a, b = a.bool(), b.bool()
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2 * int((a & b).sum()) / total


# ---------------------------------------------------------------------------
# KID


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    extractor_id: str
    image_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise MetricError("embedding set must be an N x D matrix with N >= 2")
        if not np.isfinite(self.vectors).all():
            raise MetricError("embedding set contains non-finite values")


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """U-statistic MMD^2 for equally sized blocks; every sum skips i == j."""
    m = x.shape[0]
    if y.shape[0] != m:
        raise MetricError("unbiased block estimator needs equally sized blocks")
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    off = lambda k: (k.sum() - np.trace(k)) / (m * (m - 1))  # noqa: E731
    return float(off(kxx) + off(kyy) - 2 * off(kxy))


def kid_score(real: EmbeddingSet, fake: EmbeddingSet, subset_size: int = 50, n_subsets: int = 100,
              rng: Optional[np.random.Generator] = None) -> float:
    """Kernel inception distance averaged over random blocks.

    A set whose size equals ``subset_size`` is used whole and in order.
    """
    if real.extractor_id != fake.extractor_id:
        raise MetricError(f"extractor mismatch: {real.extractor_id!r} vs {fake.extractor_id!r}")
    if real.vectors.shape[1] != fake.vectors.shape[1]:
        raise MetricError("embedding dimensionalities differ")
    if subset_size < 2 or n_subsets < 1:
        raise ConfigError("subset_size must be >= 2 and n_subsets >= 1")
    for name, s in (("real", real), ("fake", fake)):
        if s.vectors.shape[0] < subset_size:
            raise ConfigError(f"{name} set has {s.vectors.shape[0]} rows, fewer than subset_size {subset_size}")
    rng = rng if rng is not None else np.random.default_rng(0)

    def block(s: EmbeddingSet) -> np.ndarray:
        n = s.vectors.shape[0]
        if n == subset_size:
            return s.vectors
        return s.vectors[rng.choice(n, subset_size, replace=False)]

    return float(np.mean([mmd2_unbiased(block(real), block(fake)) for _ in range(n_subsets)]))


def save_embeddings(path, emb: EmbeddingSet) -> None:
    """``<path>.npy`` (N x D float32) plus ``<path>.json`` sidecar."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), emb.vectors.astype(np.float32))
    path.with_suffix(".json").write_text(json.dumps(
        {"extractor_id": emb.extractor_id, "image_ids": list(emb.image_ids)}, indent=2))


def load_embeddings(path) -> EmbeddingSet:
    path = Path(path)
    npy, sidecar = path.with_suffix(".npy"), path.with_suffix(".json")
    for f in (npy, sidecar):
        if not f.is_file():
            raise MetricError(f"missing embedding file: {f}")
    try:
        vectors = np.load(npy, allow_pickle=False)
        meta = json.loads(sidecar.read_text())
    except (ValueError, OSError) as exc:
        raise MetricError(f"unreadable embedding file {path}: {exc}") from exc
    if vectors.dtype != np.float32:
        raise MetricError(f"{npy} must hold float32, found {vectors.dtype}")
    ids = meta.get("image_ids", [])
    if ids and len(ids) != vectors.shape[0]:
        raise MetricError(f"{sidecar} lists {len(ids)} image ids for {vectors.shape[0]} rows")
    return EmbeddingSet(vectors, meta["extractor_id"], ids)


def lpips_aggregate(distances: Sequence[float]) -> float:
    distances = [float(d) for d in distances]
    if not distances:
        raise MetricError("no LPIPS distances supplied")
    if any(not np.isfinite(d) or d < 0 for d in distances):
        raise MetricError("LPIPS distances must be finite and non-negative")
    return float(np.mean(distances))


def load_lpips_distances(path) -> list[float]:
    path = Path(path)
    if not path.is_file():
        raise MetricError(f"missing LPIPS distance file: {path}")
    doc = json.loads(path.read_text())
    return list(doc["distances"] if isinstance(doc, dict) else doc)


# ---------------------------------------------------------------------------
# overlays


def render_overlay(content_mask, generated_mask, base) -> np.ndarray:
    """H x W x 3 uint8: missed vessels red, added vessels cyan, shared white."""
    c = content_mask.pixels if hasattr(content_mask, "pixels") else content_mask
    g = generated_mask.pixels if hasattr(generated_mask, "pixels") else generated_mask
    b = base.pixels if hasattr(base, "pixels") else base
    if c.shape != g.shape or c.shape[-2:] != b.shape[-2:]:
        raise DimensionError("overlay inputs must share one spatial size")
    c, g = c.reshape(c.shape[-2:]).bool().numpy(), g.reshape(g.shape[-2:]).bool().numpy()
    rgb = b.expand(3, -1, -1) if b.shape[0] == 1 else b
    out = (rgb.detach().clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy().copy()
    out[c & ~g] = RED
    out[~c & g] = CYAN
    out[c & g] = WHITE
    return out


def overlay_counts(overlay: np.ndarray) -> dict[str, int]:
    """Red, cyan and white pixel counts of a rendered overlay."""
    return {name: int(np.all(overlay == colour, axis=-1).sum())
            for name, colour in (("red", RED), ("cyan", CYAN), ("white", WHITE))}


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    direction: str
    dice: float
    n_images: int
    model_id: str
    kid: Optional[float] = None
    lpips: Optional[float] = None
    threshold: float = 0.5
    per_image_dice: list = field(default_factory=list)

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise MetricError(f"unknown direction {self.direction!r}")
        if not 0 <= self.dice <= 1:
            raise MetricError("dice must lie in [0, 1]")
        if self.n_images < 1:
            raise MetricError("report needs at least one image")

    def row(self) -> dict:
        return {"LPIPS": self.lpips, "KID": self.kid, "Dice": self.dice}


def evaluate_direction(contents: Sequence, synthesize: Callable, vessels_content: Callable,
                       vessels_fake: Callable, threshold: float = 0.5) -> list[float]:
    """Per-image Dice between binarized vessels of each fake and its content image."""
    scores = []
    for content in contents:
        fake = synthesize(content)
        a = binarize(vessels_fake(fake), threshold)
        b = binarize(vessels_content(content), threshold)
        scores.append(dice_score(a, b))
    return scores


@dataclass
class EvalConfig:
    threshold: float = 0.5
    kid_subset_size: int = 50
    kid_subsets: int = 100
    # direction -> {"real": path, "fake": path}; paths are embedding file stems
    kid_embeddings: dict = field(default_factory=dict)
    # direction -> path of a JSON list of per-image distances
    lpips_distances: dict = field(default_factory=dict)
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if not 0 < self.threshold < 1:
            errors.append("threshold must lie in (0, 1)")
        if self.kid_subset_size < 2:
            errors.append("kid_subset_size must be >= 2")
        if self.kid_subsets < 1:
            errors.append("kid_subsets must be >= 1")
        for d in list(self.kid_embeddings) + list(self.lpips_distances):
            if d not in DIRECTIONS:
                errors.append(f"unknown direction {d!r}")
        return errors


def evaluate_run(gan_ckpt, seg_ckpt, test_patches: dict, cfg: EvalConfig,
                 invert: Optional[dict] = None, model_id: str = "vesselcyclegan") -> list[MetricReport]:
    """Reports for both translation directions.

    ``test_patches`` maps ``"CF"``/``"FA"`` to lists of content patches. The
    generator for FA synthesis is ``G_B`` and for CF synthesis ``G_A``.
    """
    invert = invert if invert is not None else {"CF": False, "FA": True}
    seg = seg_ckpt.nets["V"]
    g_a, g_b = gan_ckpt.nets["G_A"], gan_ckpt.nets["G_B"]
    if "segmenter_fingerprint" in gan_ckpt.meta and gan_ckpt.meta["segmenter_fingerprint"] != seg.fingerprint:
        raise CheckpointError("GAN checkpoint was trained with a different segmenter")
    for net in (seg, g_a, g_b):
        net.eval()

    def vessels(domain):
        def fn(img):
            with torch.no_grad():
                return vessel_map(seg, img.unsqueeze(0), invert[domain])[0]
        return fn

    def synth(gen, src_domain):
        def fn(img):
            with torch.no_grad():
                return gen(vessel_map(seg, img.unsqueeze(0), invert[src_domain]))[0]
        return fn

    plan = {"cf_to_fa": ("CF", "FA", g_b), "fa_to_cf": ("FA", "CF", g_a)}
    rng = np.random.default_rng(cfg.seed)
    reports = []
    for direction, (src, dst, gen) in plan.items():
        contents = [p.pixels if hasattr(p, "pixels") else p for p in test_patches.get(src, [])]
        if not contents:
            continue
        per_image = evaluate_direction(contents, synth(gen, src), vessels(src), vessels(dst), cfg.threshold)
        kid = None
        if direction in cfg.kid_embeddings:
            paths = cfg.kid_embeddings[direction]
            kid = kid_score(load_embeddings(paths["real"]), load_embeddings(paths["fake"]),
                            cfg.kid_subset_size, cfg.kid_subsets, rng)
        lpips = None
        if direction in cfg.lpips_distances:
            lpips = lpips_aggregate(load_lpips_distances(cfg.lpips_distances[direction]))
        reports.append(MetricReport(
            direction=direction,
            dice=float(np.mean(per_image)),
            n_images=len(per_image),
            model_id=model_id,
            kid=kid,
            lpips=lpips,
            threshold=cfg.threshold,
            per_image_dice=per_image,
        ))
    return reports


REPORT_FORMAT = "vesselcyclegan.report"


def reports_to_json(reports: Sequence[MetricReport]) -> dict:
    return {"format": REPORT_FORMAT, "version": 1, "reports": [asdict(r) for r in reports]}


def write_report(path, reports: Sequence[MetricReport]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(reports_to_json(reports), indent=2, sort_keys=True))


def write_report_csv(path, reports: Sequence[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_id", "direction", "LPIPS", "KID", "Dice", "n_images", "threshold"])
        for r in reports:
            w.writerow([r.model_id, r.direction, r.lpips, r.kid, r.dice, r.n_images, r.threshold])


def validate_report(doc: dict) -> None:
    """Raise MetricError unless ``doc`` follows the report schema."""
    if doc.get("format") != REPORT_FORMAT or doc.get("version") != 1:
        raise MetricError("not a version-1 report")
    required = {"direction", "dice", "kid", "lpips", "n_images", "model_id", "threshold", "per_image_dice"}
    for r in doc.get("reports", []):
        missing = required - set(r)
        if missing:
            raise MetricError(f"report row lacks {sorted(missing)}")
