"""Dataset ingestion, patch extraction, augmentation and unpaired sampling.

Images are held as float32 tensors of shape C x H x W with values in [0, 1].
Randomness always comes from an explicit ``numpy.random.Generator`` so that
callers control reproducibility.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image
from torchvision.transforms import InterpolationMode

from .errors import (
    ConfigError, DataError, DimensionError, IngestError, ManifestError, SamplingError,
)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")

# Pair counts of the CF-FA split and derived-entry counts of the expanded HRF split.
CFFA_SPLIT_PAIRS = {"train": 35, "val": 10, "test": 14}
HRF_SPLIT_ENTRIES = {"train": 108, "val": 36}

HRF_CENTER_CROP = 768
HRF_DOWNSCALE = 4
HRF_VARIANTS = ("color-center768", "color-down4", "green-center768", "green-down4")


class Domain(str, enum.Enum):
    CF = "CF"
    FA = "FA"


class ClassLabel(str, enum.Enum):
    HEALTHY = "healthy"
    UNHEALTHY = "unhealthy"


class MaskKind(str, enum.Enum):
    SOFT = "soft"
    BINARY = "binary"


SPLITS = ("train", "val", "test")


def _check_unit_range(pixels: torch.Tensor, what: str) -> None:
    if pixels.numel() and (pixels.min() < 0 or pixels.max() > 1):
        raise DataError(f"{what} values must lie in [0, 1]")


@dataclass
class RetinalImage:
    pixels: torch.Tensor
    domain: Domain
    class_label: ClassLabel = ClassLabel.HEALTHY
    source_id: str = ""
    aligned_pair_id: Optional[str] = None

    def __post_init__(self):
        self.domain = Domain(self.domain)
        self.class_label = ClassLabel(self.class_label)
        if self.pixels.dim() != 3 or self.pixels.shape[0] not in (1, 3):
            raise DimensionError(
                f"image pixels must be C x H x W with C in {{1, 3}}, got {tuple(self.pixels.shape)}"
            )
        _check_unit_range(self.pixels, "image")

    @property
    def shape(self):
        return tuple(self.pixels.shape)


@dataclass
class VesselMask:
    pixels: torch.Tensor
    kind: MaskKind = MaskKind.BINARY

    def __post_init__(self):
        self.kind = MaskKind(self.kind)
        if self.pixels.dim() != 3 or self.pixels.shape[0] != 1:
            raise DimensionError(f"mask pixels must be 1 x H x W, got {tuple(self.pixels.shape)}")
        _check_unit_range(self.pixels, "mask")
        if self.kind is MaskKind.BINARY and not torch.all((self.pixels == 0) | (self.pixels == 1)):
            raise DataError("binary mask contains values other than 0 and 1")


@dataclass
class ManifestEntry:
    image_path: str
    domain: Domain
    class_label: ClassLabel
    split: str
    mask_path: Optional[str] = None
    aligned_pair_id: Optional[str] = None
    variant: Optional[str] = None
    source_id: str = ""

    def __post_init__(self):
        self.domain = Domain(self.domain)
        self.class_label = ClassLabel(self.class_label)
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r} for {self.image_path}")


@dataclass
class DatasetManifest:
    layout: str
    root: str
    entries: list[ManifestEntry] = field(default_factory=list)

    FORMAT = "vesselcyclegan.manifest"
    VERSION = 1

    def select(self, split=None, domain=None) -> list[ManifestEntry]:
        out = self.entries
        if split is not None:
            out = [e for e in out if e.split == split]
        if domain is not None:
            out = [e for e in out if e.domain == Domain(domain)]
        return out

    def split_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for e in self.entries:
            counts[e.split] += 1
        return counts

    def to_json(self) -> dict:
        entries = []
        for e in self.entries:
            d = dataclasses.asdict(e)
            d["domain"] = e.domain.value
            d["class_label"] = e.class_label.value
            entries.append(d)
        return {
            "format": self.FORMAT,
            "version": self.VERSION,
            "layout": self.layout,
            "root": self.root,
            "entries": entries,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetManifest":
        if doc.get("format") != cls.FORMAT or doc.get("version") != cls.VERSION:
            raise ManifestError("not a version-1 vesselcyclegan manifest")
        return cls(
            layout=doc["layout"],
            root=doc["root"],
            entries=[ManifestEntry(**e) for e in doc["entries"]],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# ingestion


def _require_dir(path: Path) -> None:
    if not path.is_dir():
        raise IngestError(f"missing directory: {path}")


def _image_index(directory: Path) -> dict[str, Path]:
    return {
        p.stem: p
        for p in sorted(directory.iterdir())
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    }


def _read_splits(root: Path) -> dict:
    path = root / "splits.json"
    if not path.is_file():
        raise IngestError(f"missing split file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise IngestError(f"unreadable split file {path}: {exc}") from exc


def _split_and_class(key: str, info) -> tuple[str, Optional[str]]:
    if isinstance(info, str):
        return info, None
    if not isinstance(info, dict) or "split" not in info:
        raise ManifestError(f"split entry for {key!r} must name a split")
    return info["split"], info.get("class")


def load_manifest(root_path, layout: str, validate_counts: bool = True) -> DatasetManifest:
    """Enumerate a dataset directory into a manifest.

    ``layout`` is ``"cffa"`` (``cf/``, ``fa/``, ``splits.json``) or ``"hrf"``
    (``images/``, ``masks/``, ``splits.json``). With ``validate_counts`` the
    published split sizes are enforced; disable it for toy datasets.
    """
    root = Path(root_path)
    _require_dir(root)
    if layout == "cffa":
        return _load_cffa(root, validate_counts)
    if layout == "hrf":
        return _load_hrf(root, validate_counts)
    raise ManifestError(f"unknown layout {layout!r}")


def _load_cffa(root: Path, validate_counts: bool) -> DatasetManifest:
    for sub in ("cf", "fa"):
        _require_dir(root / sub)
    cf, fa = _image_index(root / "cf"), _image_index(root / "fa")
    if not cf and not fa:
        raise IngestError(f"no images found under {root}")
    splits = _read_splits(root)

    unpaired = sorted(set(cf) ^ set(fa))
    if unpaired:
        raise ManifestError(f"images without a counterpart modality: {unpaired}")
    missing = sorted(set(cf) - set(splits))
    if missing:
        raise ManifestError(f"images missing from splits.json: {missing}")
    dangling = sorted(set(splits) - set(cf))
    if dangling:
        raise ManifestError(f"splits.json names absent images: {dangling}")

    entries = []
    pair_classes: dict[str, list[str]] = {s: [] for s in SPLITS}
    for pid in sorted(cf):
        split, label = _split_and_class(pid, splits[pid])
        if label is None:
            raise ManifestError(f"cffa split entry {pid!r} needs a class")
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r} for {pid!r}")
        pair_classes[split].append(label)
        aligned = pid if split == "test" else None
        for domain, index, sub in ((Domain.CF, cf, "cf"), (Domain.FA, fa, "fa")):
            entries.append(ManifestEntry(
                image_path=f"{sub}/{index[pid].name}",
                domain=domain,
                class_label=label,
                split=split,
                aligned_pair_id=aligned,
                source_id=pid,
            ))

    if validate_counts:
        counts = {s: len(v) for s, v in pair_classes.items()}
        if counts != CFFA_SPLIT_PAIRS:
            raise ManifestError(f"pair counts {counts} differ from expected {CFFA_SPLIT_PAIRS}")
        for split, labels in pair_classes.items():
            n_healthy = labels.count(ClassLabel.HEALTHY.value)
            if abs(2 * n_healthy - len(labels)) > 1:
                raise ManifestError(
                    f"split {split} is not class balanced: "
                    f"{n_healthy} healthy of {len(labels)}"
                )
    return DatasetManifest(layout="cffa", root=str(root), entries=entries)


def _hrf_class(name: str) -> str:
    return ClassLabel.HEALTHY.value if name.lower().endswith("_h") else ClassLabel.UNHEALTHY.value


def _load_hrf(root: Path, validate_counts: bool) -> DatasetManifest:
    _require_dir(root / "images")
    images = _image_index(root / "images")
    if not images:
        raise IngestError(f"no images found under {root / 'images'}")
    masks = _image_index(root / "masks") if (root / "masks").is_dir() else {}
    splits = _read_splits(root)
    missing = sorted(set(images) - set(splits))
    if missing:
        raise ManifestError(f"images missing from splits.json: {missing}")

    entries = []
    for name in sorted(images):
        split, label = _split_and_class(name, splits[name])
        label = label or _hrf_class(name)
        image_path = f"images/{images[name].name}"
        if split == "test":
            entries.append(ManifestEntry(image_path, Domain.CF, label, split, source_id=name))
            continue
        if name not in masks:
            raise ManifestError(f"{split} image {name!r} has no vessel mask")
        for variant in HRF_VARIANTS:
            entries.append(ManifestEntry(
                image_path=image_path,
                domain=Domain.CF,
                class_label=label,
                split=split,
                mask_path=f"masks/{masks[name].name}",
                variant=variant,
                source_id=name,
            ))

    manifest = DatasetManifest(layout="hrf", root=str(root), entries=entries)
    if validate_counts:
        counts = manifest.split_counts()
        got = {s: counts[s] for s in HRF_SPLIT_ENTRIES}
        if got != HRF_SPLIT_ENTRIES:
            raise ManifestError(f"derived entry counts {got} differ from expected {HRF_SPLIT_ENTRIES}")
    return manifest


def read_image(path, channels: Optional[int] = None) -> torch.Tensor:
    """Decode an image file to a float C x H x W tensor in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"missing image: {path}")
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float32) / 65535.0
        else:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    t = torch.from_numpy(np.ascontiguousarray(arr))
    t = t.unsqueeze(0) if t.dim() == 2 else t.permute(2, 0, 1)
    if channels == 3 and t.shape[0] == 1:
        t = t.expand(3, -1, -1)
    elif channels == 1 and t.shape[0] == 3:
        t = t.mean(0, keepdim=True)
    return t.contiguous().clamp_(0, 1)


def write_image(path, pixels) -> None:
    """Write a C x H x W float tensor in [0, 1] or an H x W x 3 uint8 array as PNG."""
    if isinstance(pixels, torch.Tensor):
        arr = (pixels.detach().clamp(0, 1) * 255).round().to(torch.uint8)
        arr = arr.permute(1, 2, 0).numpy()
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
    else:
        arr = np.asarray(pixels)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _center_crop(t: torch.Tensor, size: int) -> torch.Tensor:
    h, w = t.shape[-2:]
    if size > min(h, w):
        raise DimensionError(f"center crop {size} exceeds image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return t[..., top:top + size, left:left + size]


def _area_downscale(t: torch.Tensor, factor: int) -> torch.Tensor:
    h, w = t.shape[-2:]
    t = t[..., : h - h % factor, : w - w % factor]
    return F.avg_pool2d(t.unsqueeze(0), factor).squeeze(0)


def load_entry(entry: ManifestEntry, root=None, channels: int = 3):
    """Materialize one manifest entry as ``(RetinalImage, VesselMask or None)``.

    HRF variants are applied here: ``green-*`` keeps only the green channel
    (replicated to ``channels``), ``*-center768`` takes the central 768 x 768
    region and ``*-down4`` area-averages by four. Downscaled masks are
    re-binarized at 0.5.
    """
    root = Path(root if root is not None else ".")
    pixels = read_image(root / entry.image_path, channels=3)
    mask = None
    if entry.mask_path is not None:
        mask = (read_image(root / entry.mask_path, channels=1) > 0.5).float()

    if entry.variant is not None:
        colour, resolution = entry.variant.split("-")
        if colour == "green":
            pixels = pixels[1:2].expand(3, -1, -1)
        if resolution == "center768":
            pixels = _center_crop(pixels, HRF_CENTER_CROP)
            mask = _center_crop(mask, HRF_CENTER_CROP) if mask is not None else None
        elif resolution == "down4":
            pixels = _area_downscale(pixels, HRF_DOWNSCALE)
            mask = (_area_downscale(mask, HRF_DOWNSCALE) >= 0.5).float() if mask is not None else None
        else:
            raise ManifestError(f"unknown variant {entry.variant!r}")

    if channels == 1:
        pixels = pixels.mean(0, keepdim=True)
    image = RetinalImage(
        pixels=pixels.contiguous().clone(),
        domain=entry.domain,
        class_label=entry.class_label,
        source_id=entry.source_id + (f":{entry.variant}" if entry.variant else ""),
        aligned_pair_id=entry.aligned_pair_id,
    )
    return image, (VesselMask(mask.contiguous(), MaskKind.BINARY) if mask is not None else None)


# ---------------------------------------------------------------------------
# patches


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    offsets: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.offsets)


def _even_offsets(extent: int, size: int, count: int) -> list[int]:
    if count == 1:
        return [0]
    step = (extent - size) / (count - 1)
    return sorted({int(math.floor(i * step + 0.5)) for i in range(count)})


def make_patch_grid(image_h: int, image_w: int, patch_size: int, rows: int, cols: int) -> PatchGrid:
    """Evenly spaced ``rows x cols`` grid of square patch offsets.

    Offsets collapse (and the grid shrinks) only when the image is too
    small to hold distinct positions along an axis.
    """
    if rows < 1 or cols < 1:
        raise DimensionError("rows and cols must be >= 1")
    if patch_size < 1 or patch_size > min(image_h, image_w):
        raise DimensionError(f"patch {patch_size} does not fit image {image_h}x{image_w}")
    row_offsets = _even_offsets(image_h, patch_size, rows)
    col_offsets = _even_offsets(image_w, patch_size, cols)
    return PatchGrid(patch_size, tuple((r, c) for r in row_offsets for c in col_offsets))


def extract_patch(image, offset: tuple[int, int], size: int):
    """Crop a ``size x size`` patch at ``offset`` from a RetinalImage or VesselMask."""
    r, c = offset
    h, w = image.pixels.shape[-2:]
    if r < 0 or c < 0 or r + size > h or c + size > w:
        raise DimensionError(f"patch at {offset} of size {size} exceeds image {h}x{w}")
    return dataclasses.replace(image, pixels=image.pixels[:, r:r + size, c:c + size].clone())


def extract_grid_patches(image, grid: PatchGrid) -> list:
    return [extract_patch(image, off, grid.patch_size) for off in grid.offsets]


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    rotation_deg: float = 15.0
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    crop_size: Optional[int] = None
    interpolation: str = "bilinear"

    def validate(self) -> list[str]:
        errors = []
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0")
        if not 0 <= self.rotation_deg <= 180:
            errors.append("rotation_deg must lie in [0, 180]")
        if not 0 <= self.hflip_prob <= 1:
            errors.append("hflip_prob must lie in [0, 1]")
        if self.crop_size is not None and self.crop_size < 1:
            errors.append("crop_size must be >= 1")
        if self.interpolation not in ("bilinear", "nearest"):
            errors.append("interpolation must be 'bilinear' or 'nearest'")
        return errors

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(hflip_prob=0.0, rotation_deg=0.0, brightness=0.0, contrast=0.0, saturation=0.0)


def _jitter_factor(rng: np.random.Generator, magnitude: float) -> float:
    # Always consume one draw so the stream does not depend on the config.
    u = rng.random()
    if magnitude == 0:
        return 1.0
    lo = max(0.0, 1.0 - magnitude)
    return lo + u * (1.0 + magnitude - lo)


def augment(image: RetinalImage, mask: Optional[VesselMask], cfg: AugmentConfig,
            rng: np.random.Generator):
    """Flip, rotate, crop (shared by image and mask), then colour-jitter the image."""
    errors = cfg.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    x = image.pixels
    m = mask.pixels if mask is not None else None
    h, w = x.shape[-2:]
    if cfg.crop_size is not None and cfg.crop_size > min(h, w):
        raise DimensionError(f"crop {cfg.crop_size} exceeds image {h}x{w}")
    if m is not None and m.shape[-2:] != x.shape[-2:]:
        raise DimensionError("mask and image sizes differ")

    flip = rng.random() < cfg.hflip_prob
    angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)) if cfg.rotation_deg > 0 else 0.0
    if cfg.crop_size is not None:
        top = int(rng.integers(0, h - cfg.crop_size + 1))
        left = int(rng.integers(0, w - cfg.crop_size + 1))
    factors = [_jitter_factor(rng, cfg.brightness), _jitter_factor(rng, cfg.contrast),
               _jitter_factor(rng, cfg.saturation)]

    if flip:
        x = x.flip(-1)
        m = m.flip(-1) if m is not None else None
    if angle != 0.0:
        mode = InterpolationMode.BILINEAR if cfg.interpolation == "bilinear" else InterpolationMode.NEAREST
        x = TF.rotate(x, angle, interpolation=mode, fill=0.0)
        if m is not None:
            m = TF.rotate(m, angle, interpolation=InterpolationMode.NEAREST, fill=0.0)
    if cfg.crop_size is not None:
        s = cfg.crop_size
        x = x[:, top:top + s, left:left + s]
        m = m[:, top:top + s, left:left + s] if m is not None else None

    brightness, contrast, saturation = factors
    if brightness != 1.0:
        x = TF.adjust_brightness(x, brightness)
    if contrast != 1.0:
        x = TF.adjust_contrast(x, contrast)
    if saturation != 1.0 and x.shape[0] == 3:
        x = TF.adjust_saturation(x, saturation)

    out_image = dataclasses.replace(image, pixels=x.clamp(0, 1).contiguous())
    out_mask = dataclasses.replace(mask, pixels=m.contiguous()) if mask is not None else None
    return out_image, out_mask


# ---------------------------------------------------------------------------
# unpaired sampling


@dataclass
class UnpairedBatch:
    image_a: RetinalImage
    image_b: RetinalImage

    def __post_init__(self):
        if self.image_a.domain is not Domain.CF or self.image_b.domain is not Domain.FA:
            raise SamplingError("unpaired batch needs a CF image_a and an FA image_b")
        if self.image_a.class_label != self.image_b.class_label:
            raise SamplingError("unpaired batch mixes classes")

    @property
    def class_label(self) -> ClassLabel:
        return self.image_a.class_label


def sample_unpaired(train_a: Sequence[RetinalImage], train_b: Sequence[RetinalImage],
                    rng: np.random.Generator) -> UnpairedBatch:
    """Draw a CF patch uniformly among those whose class occurs in ``train_b``,
    then an FA patch uniformly from the same class."""
    if not train_a or not train_b:
        raise SamplingError("both patch lists must be nonempty")
    b_by_class: dict[ClassLabel, list[RetinalImage]] = {}
    for img in train_b:
        b_by_class.setdefault(img.class_label, []).append(img)
    eligible = [img for img in train_a if img.class_label in b_by_class]
    if not eligible:
        raise SamplingError("no class shared between the two patch lists")
    a = eligible[int(rng.integers(len(eligible)))]
    pool = b_by_class[a.class_label]
    b = pool[int(rng.integers(len(pool)))]
    return UnpairedBatch(a, b)


def worker_rng(global_seed: int, worker_index: int, epoch: int) -> np.random.Generator:
    """Independent generator for one loader worker in one epoch."""
    return np.random.default_rng(np.random.SeedSequence([global_seed, worker_index, epoch]))


# ---------------------------------------------------------------------------
# patch sets used by training and evaluation


@dataclass
class PatchConfig:
    train_patch: int = 512
    eval_patch: int = 448
    grid_rows: int = 3
    grid_cols: int = 3

    def validate(self) -> list[str]:
        errors = []
        for name in ("train_patch", "eval_patch", "grid_rows", "grid_cols"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        return errors


def load_patches(manifest: DatasetManifest, split: str, domain, patch_cfg: PatchConfig) -> list[RetinalImage]:
    """Grid patches for every image of one split and domain."""
    size = patch_cfg.train_patch if split == "train" else patch_cfg.eval_patch
    patches = []
    for entry in manifest.select(split=split, domain=domain):
        image, _ = load_entry(entry, manifest.root)
        h, w = image.pixels.shape[-2:]
        grid = make_patch_grid(h, w, size, patch_cfg.grid_rows, patch_cfg.grid_cols)
        for k, patch in enumerate(extract_grid_patches(image, grid)):
            patch.source_id = f"{image.source_id}#{k}"
            patches.append(patch)
    return patches
