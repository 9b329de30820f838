import itertools
import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from vesselcyclegan.data import (
    AugmentConfig, ClassLabel, DatasetManifest, Domain, PatchConfig, RetinalImage, UnpairedBatch,
    VesselMask, augment, extract_grid_patches, extract_patch, load_entry, load_manifest, load_patches,
    make_patch_grid, read_image, sample_unpaired, worker_rng, write_image,
)
from vesselcyclegan.errors import (
    ConfigError, DataError, DimensionError, IngestError, ManifestError, SamplingError,
)
from vesselcyclegan.synthetic import render_fa, vessel_pattern, write_toy_cffa, write_toy_hrf


def _img(h=576, w=720, seed=0, domain="CF", label="healthy"):
    g = torch.Generator().manual_seed(seed)
    return RetinalImage(torch.rand(3, h, w, generator=g), domain, label, f"s{seed}")


def _brute_feasible_grid(h, w, p, rows, cols):
    # Independent oracle: among all feasible offsets pick those nearest to
    # the evenly spaced real-valued positions.
    def axis(extent, n):
        feasible = range(extent - p + 1)
        if n == 1:
            return [0]
        targets = [i * (extent - p) / (n - 1) for i in range(n)]
        return sorted({min(feasible, key=lambda o: (abs(o - t), -o)) for t in targets})
    return [(r, c) for r in axis(h, rows) for c in axis(w, cols)]


# --- patch grid -------------------------------------------------------------

def test_grid_512_offsets():
    grid = make_patch_grid(576, 720, 512, 3, 3)
    assert set(grid.offsets) == set(itertools.product([0, 32, 64], [0, 104, 208]))
    assert len(grid) == 9


def test_grid_448_offsets():
    grid = make_patch_grid(576, 720, 448, 3, 3)
    assert set(grid.offsets) == set(itertools.product([0, 64, 128], [0, 136, 272]))


def test_grid_single_patch():
    assert make_patch_grid(512, 512, 512, 1, 1).offsets == ((0, 0),)


def test_grid_errors():
    with pytest.raises(DimensionError):
        make_patch_grid(500, 720, 512, 3, 3)
    with pytest.raises(DimensionError):
        make_patch_grid(576, 720, 512, 0, 3)


@given(h=st.integers(16, 90), w=st.integers(16, 90), p=st.integers(4, 16),
       rows=st.integers(1, 4), cols=st.integers(1, 4))
def test_grid_matches_brute_force_and_covers(h, w, p, rows, cols):
    grid = make_patch_grid(h, w, p, rows, cols)
    assert list(grid.offsets) == _brute_feasible_grid(h, w, p, rows, cols)
    if rows > 1 and cols > 1:
        cover = np.zeros((h, w), bool)
        for r, c in grid.offsets:
            cover[r:r + p, c:c + p] = True
        # coverage is complete whenever consecutive patches overlap or touch
        if (h - p) / (rows - 1) <= p and (w - p) / (cols - 1) <= p:
            assert cover.all()


def test_extract_patch_matches_slicing():
    image = _img()
    patch = extract_patch(image, (64, 208), 512)
    assert torch.equal(patch.pixels, image.pixels[:, 64:576, 208:720])
    assert (patch.domain, patch.class_label, patch.source_id) == (image.domain, image.class_label, image.source_id)
    assert torch.equal(extract_patch(image, (0, 0), 512).pixels, image.pixels[:, :512, :512])
    with pytest.raises(DimensionError):
        extract_patch(image, (200, 300), 512)


def test_extract_patch_works_on_masks():
    mask = VesselMask(torch.from_numpy(vessel_pattern(3, 40, 50))[None])
    patch = extract_patch(mask, (5, 7), 20)
    assert torch.equal(patch.pixels, mask.pixels[:, 5:25, 7:27])


def test_grid_patches_cover_image():
    image = _img(seed=2)
    grid = make_patch_grid(576, 720, 512, 3, 3)
    painted = torch.zeros(576, 720)
    for off, patch in zip(grid.offsets, extract_grid_patches(image, grid)):
        r, c = off
        assert torch.equal(patch.pixels, image.pixels[:, r:r + 512, c:c + 512])
        painted[r:r + 512, c:c + 512] = 1
    assert painted.all()


# --- types ------------------------------------------------------------------

def test_image_validation():
    with pytest.raises(DimensionError):
        RetinalImage(torch.zeros(2, 4, 4), "CF")
    with pytest.raises(DataError):
        RetinalImage(torch.full((3, 4, 4), 1.5), "CF")
    with pytest.raises(DataError):
        VesselMask(torch.full((1, 4, 4), 0.5))
    VesselMask(torch.full((1, 4, 4), 0.5), kind="soft")


# --- augmentation -----------------------------------------------------------

def test_augment_identity_config():
    image = _img(64, 64)
    mask = VesselMask(torch.from_numpy(vessel_pattern(0))[None])
    cfg = AugmentConfig.identity()
    out, m = augment(image, mask, cfg, np.random.default_rng(0))
    assert torch.equal(out.pixels, image.pixels)
    assert torch.equal(m.pixels, mask.pixels)


def test_flip_twice_is_identity():
    image = _img(32, 48)
    cfg = AugmentConfig(hflip_prob=1.0, rotation_deg=0, brightness=0, contrast=0, saturation=0)
    once, _ = augment(image, None, cfg, np.random.default_rng(0))
    twice, _ = augment(once, None, cfg, np.random.default_rng(0))
    assert not torch.equal(once.pixels, image.pixels)
    assert torch.equal(twice.pixels, image.pixels)


def test_augment_deterministic():
    image = _img(64, 64)
    mask = VesselMask(torch.from_numpy(vessel_pattern(1))[None])
    cfg = AugmentConfig(crop_size=48)
    a = augment(image, mask, cfg, np.random.default_rng(5))
    b = augment(image, mask, cfg, np.random.default_rng(5))
    assert torch.equal(a[0].pixels, b[0].pixels) and torch.equal(a[1].pixels, b[1].pixels)
    assert a[0].pixels.shape == (3, 48, 48)
    assert 0 <= float(a[0].pixels.min()) and float(a[0].pixels.max()) <= 1
    assert set(a[1].pixels.unique().tolist()) <= {0.0, 1.0}


@given(seed=st.integers(0, 10_000))
def test_geometric_augment_keeps_mask_consistent(seed):
    mask_np = vessel_pattern(seed, 48, 48)
    image = RetinalImage(render_fa(mask_np), "FA")
    mask = VesselMask(torch.from_numpy(mask_np)[None])
    cfg = AugmentConfig(hflip_prob=0.5, rotation_deg=30, brightness=0, contrast=0, saturation=0,
                        crop_size=40, interpolation="nearest")
    out, out_mask = augment(image, mask, cfg, np.random.default_rng(seed))
    recovered = (out.pixels[:1] > 0.5).float()
    assert torch.equal(recovered, out_mask.pixels)


def test_augment_errors():
    image = _img(32, 32)
    with pytest.raises(DimensionError):
        augment(image, None, AugmentConfig(crop_size=64), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        augment(image, None, AugmentConfig(brightness=-1), np.random.default_rng(0))


# --- unpaired sampling ------------------------------------------------------

def _tiny(domain, label, sid):
    return RetinalImage(torch.zeros(3, 4, 4), domain, label, sid)


def test_sample_single_feasible_pair():
    a = [_tiny("CF", "healthy", "h1")]
    b = [_tiny("FA", "healthy", "h2"), _tiny("FA", "unhealthy", "u1")]
    rng = np.random.default_rng(0)
    for _ in range(50):
        batch = sample_unpaired(a, b, rng)
        assert (batch.image_a.source_id, batch.image_b.source_id) == ("h1", "h2")


def test_sample_no_overlap():
    with pytest.raises(SamplingError):
        sample_unpaired([_tiny("CF", "healthy", "a")], [_tiny("FA", "unhealthy", "b")], np.random.default_rng(0))
    with pytest.raises(SamplingError):
        UnpairedBatch(_tiny("CF", "healthy", "a"), _tiny("FA", "unhealthy", "b"))


def test_sample_class_balance_and_purity():
    a = [_tiny("CF", lab, f"a{i}") for i, lab in enumerate(["healthy", "unhealthy"] * 5)]
    b = [_tiny("FA", lab, f"b{i}") for i, lab in enumerate(["healthy", "unhealthy"] * 5)]
    rng = np.random.default_rng(0)
    healthy = 0
    for _ in range(10_000):
        batch = sample_unpaired(a, b, rng)
        assert batch.image_a.class_label == batch.image_b.class_label
        healthy += batch.class_label is ClassLabel.HEALTHY
    assert abs(healthy / 10_000 - 0.5) < 0.05


def test_worker_rng_independent_streams():
    a = worker_rng(0, 0, 0).random(4)
    assert np.array_equal(a, worker_rng(0, 0, 0).random(4))
    assert not np.array_equal(a, worker_rng(0, 1, 0).random(4))
    assert not np.array_equal(a, worker_rng(0, 0, 1).random(4))


# --- ingestion --------------------------------------------------------------

def test_cffa_full_counts(tmp_path):
    write_toy_cffa(tmp_path, {"train": 35, "val": 10, "test": 14}, size=(24, 30))
    manifest = load_manifest(tmp_path, "cffa")
    assert len(manifest.entries) == 118
    assert manifest.split_counts() == {"train": 70, "val": 20, "test": 28}
    test_cf = manifest.select("test", "CF")
    assert all(e.aligned_pair_id for e in test_cf)


def test_cffa_count_mismatch(tmp_path):
    write_toy_cffa(tmp_path, {"train": 4, "val": 2, "test": 2}, size=(24, 30))
    with pytest.raises(ManifestError):
        load_manifest(tmp_path, "cffa")
    assert len(load_manifest(tmp_path, "cffa", validate_counts=False).entries) == 16


def test_empty_or_missing_root(tmp_path):
    with pytest.raises(IngestError):
        load_manifest(tmp_path, "cffa")
    with pytest.raises(IngestError):
        load_manifest(tmp_path / "nope", "hrf")


def test_cffa_missing_counterpart(tmp_path):
    write_toy_cffa(tmp_path, {"train": 2, "val": 2, "test": 2}, size=(24, 30))
    (tmp_path / "fa" / "000.png").unlink()
    with pytest.raises((IngestError, ManifestError)):
        load_manifest(tmp_path, "cffa", validate_counts=False)


def test_hrf_expansion_and_variants(tmp_path):
    write_toy_hrf(tmp_path, {"train": 2, "val": 1, "test": 1}, size=800)
    manifest = load_manifest(tmp_path, "hrf", validate_counts=False)
    assert manifest.split_counts() == {"train": 8, "val": 4, "test": 1}
    with pytest.raises(ManifestError):
        load_manifest(tmp_path, "hrf")
    shapes = {}
    for entry in manifest.select("train"):
        image, mask = load_entry(entry, manifest.root)
        shapes[entry.variant] = image.pixels.shape
        assert mask.pixels.shape[-2:] == image.pixels.shape[-2:]
        assert set(mask.pixels.unique().tolist()) <= {0.0, 1.0}
        if entry.variant.startswith("green"):
            assert torch.equal(image.pixels[0], image.pixels[1])
    assert shapes["color-center768"] == (3, 768, 768)
    assert shapes["color-down4"] == (3, 200, 200)


def test_manifest_json_roundtrip(tmp_path):
    write_toy_cffa(tmp_path / "d", {"train": 2, "val": 2, "test": 2}, size=(24, 30))
    manifest = load_manifest(tmp_path / "d", "cffa", validate_counts=False)
    manifest.save(tmp_path / "m.json")
    again = DatasetManifest.load(tmp_path / "m.json")
    assert again.to_json() == manifest.to_json()
    doc = json.loads((tmp_path / "m.json").read_text())
    doc["version"] = 99
    with pytest.raises(ManifestError):
        DatasetManifest.from_json(doc)


def test_load_patches_grid(tmp_path):
    write_toy_cffa(tmp_path, {"train": 2, "val": 2, "test": 2}, size=(72, 90))
    manifest = load_manifest(tmp_path, "cffa", validate_counts=False)
    patches = load_patches(manifest, "test", Domain.FA, PatchConfig(train_patch=64, eval_patch=56))
    assert len(patches) == 2 * 9
    assert all(p.pixels.shape == (3, 56, 56) and p.domain is Domain.FA for p in patches)
    assert len({p.source_id for p in patches}) == 18


def test_image_io_roundtrip(tmp_path):
    x = torch.from_numpy(np.random.default_rng(0).integers(0, 256, (3, 9, 11)).astype(np.float32) / 255)
    write_image(tmp_path / "x.png", x)
    assert torch.allclose(read_image(tmp_path / "x.png"), x, atol=1e-6)
    assert read_image(tmp_path / "x.png", channels=1).shape == (1, 9, 11)
