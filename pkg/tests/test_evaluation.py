import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vesselcyclegan.errors import ConfigError, DimensionError, MetricError
from vesselcyclegan.evaluation import (
    EmbeddingSet, MetricReport, binarize, dice_score, evaluate_direction, kid_score, load_embeddings,
    lpips_aggregate, mmd2_unbiased, overlay_counts, render_overlay, reports_to_json, save_embeddings,
    validate_report,
)

masks = arrays(np.bool_, (6, 6))


def naive_mmd2(x, y):
    # Loop form of the unbiased estimator with k(a, b) = (a.b / D + 1)^3.
    m, d = len(x), x.shape[1]
    k = lambda a, b: (float(a @ b) / d + 1) ** 3  # noqa: E731
    sxx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j)
    syy = sum(k(y[i], y[j]) for i in range(m) for j in range(m) if i != j)
    sxy = sum(k(x[i], y[j]) for i in range(m) for j in range(m) if i != j)
    return (sxx + syy - 2 * sxy) / (m * (m - 1))


def test_binarize_rules():
    assert torch.equal(binarize(torch.full((1, 2, 2), 0.9)).pixels, torch.ones(1, 2, 2))
    assert torch.equal(binarize(torch.full((1, 2, 2), 0.5)).pixels, torch.zeros(1, 2, 2))
    mixed = torch.tensor([[[0.4, 0.6], [0.5, 0.9]]])
    assert binarize(mixed, 0.5).pixels.flatten().tolist() == [0, 1, 0, 1]
    for t in (0.0, 1.0, 1.5):
        with pytest.raises(ConfigError):
            binarize(mixed, t)


def test_dice_edge_cases():
    a = torch.zeros(1, 4, 4)
    a[0, :2] = 1
    assert dice_score(a, a) == 1.0
    assert dice_score(a, 1 - a) == 0.0
    assert dice_score(torch.zeros(1, 4, 4), torch.zeros(1, 4, 4)) == 1.0
    with pytest.raises(DimensionError):
        dice_score(a, torch.zeros(1, 3, 3))


@given(a=masks, b=masks)
def test_dice_symmetry_and_self(a, b):
    ta, tb = torch.from_numpy(a).float(), torch.from_numpy(b).float()
    assert dice_score(ta, tb) == dice_score(tb, ta)
    if a.any():
        assert dice_score(ta, ta) == 1.0


def test_mmd_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(7, 3)), rng.normal(size=(7, 3)) + 0.3
    assert abs(mmd2_unbiased(x, y) - naive_mmd2(x, y)) < 1e-10


def test_kid_identical_sets_is_zero():
    x = np.random.default_rng(1).normal(size=(50, 16))
    assert abs(kid_score(EmbeddingSet(x, "e"), EmbeddingSet(x.copy(), "e"), 50, 3)) < 1e-6


def test_kid_joint_permutation_invariance():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(40, 8)), rng.normal(size=(40, 8)) + 0.5
    perm = rng.permutation(40)
    a = kid_score(EmbeddingSet(x, "e"), EmbeddingSet(y, "e"), 40, 1)
    b = kid_score(EmbeddingSet(x[perm], "e"), EmbeddingSet(y[perm], "e"), 40, 1)
    assert abs(a - b) < 1e-9


def test_kid_separates_distributions():
    rng = np.random.default_rng(3)
    same = kid_score(EmbeddingSet(rng.normal(size=(200, 8)), "e"), EmbeddingSet(rng.normal(size=(200, 8)), "e"),
                     50, 50, np.random.default_rng(0))
    shifted = kid_score(EmbeddingSet(rng.normal(size=(200, 8)), "e"),
                        EmbeddingSet(rng.normal(size=(200, 8)) + 1.0, "e"), 50, 50, np.random.default_rng(0))
    assert abs(same) < 0.05 and shifted > 0.1


def test_kid_errors():
    x = np.zeros((10, 4))
    with pytest.raises(MetricError):
        kid_score(EmbeddingSet(x, "a"), EmbeddingSet(x, "b"), 5)
    with pytest.raises(ConfigError):
        kid_score(EmbeddingSet(x, "a"), EmbeddingSet(x, "a"), 20)
    with pytest.raises(MetricError):
        EmbeddingSet(np.full((3, 2), np.nan), "a")


def test_embedding_roundtrip(tmp_path):
    emb = EmbeddingSet(np.random.default_rng(0).normal(size=(5, 4)).astype(np.float32), "inception-v3",
                       [f"img{i}" for i in range(5)])
    save_embeddings(tmp_path / "real", emb)
    back = load_embeddings(tmp_path / "real")
    assert np.array_equal(back.vectors, emb.vectors) and back.image_ids == emb.image_ids
    with pytest.raises(MetricError, match="fake"):
        load_embeddings(tmp_path / "fake")


def test_lpips_aggregate():
    assert abs(lpips_aggregate([0.3, 0.5]) - 0.4) < 1e-12
    assert lpips_aggregate([0.7]) == 0.7
    with pytest.raises(MetricError):
        lpips_aggregate([])


def test_overlay_cases():
    content = torch.zeros(1, 5, 5)
    content[0, 1] = 1
    base = torch.full((3, 5, 5), 0.2)
    same = overlay_counts(render_overlay(content, content, base))
    assert same["red"] == 0 and same["cyan"] == 0 and same["white"] == 5
    miss = overlay_counts(render_overlay(content, torch.zeros(1, 5, 5), base))
    assert miss["red"] == 5
    ov = render_overlay(content, torch.zeros(1, 5, 5), base)
    assert tuple(ov[0, 0]) == (51, 51, 51)
    with pytest.raises(DimensionError):
        render_overlay(content, torch.zeros(1, 4, 4), base)


@given(c=masks, g=masks)
def test_overlay_conservation(c, g):
    ov = render_overlay(torch.from_numpy(c)[None].float(), torch.from_numpy(g)[None].float(), torch.zeros(3, 6, 6))
    counts = overlay_counts(ov)
    assert counts["red"] + counts["cyan"] + counts["white"] == int((c | g).sum())


def test_identity_stub_gives_perfect_dice():
    images = [torch.rand(1, 8, 8) for _ in range(4)]
    per_image = evaluate_direction(images, lambda x: x, lambda x: x, lambda x: x)
    assert per_image == [1.0] * 4


def test_report_schema():
    per = [0.9, 0.8, 1.0]
    rep = MetricReport("cf_to_fa", float(np.mean(per)), 3, "m", kid=0.01, lpips=0.2, per_image_dice=per)
    assert set(rep.row()) == {"LPIPS", "KID", "Dice"}
    doc = json.loads(json.dumps(reports_to_json([rep])))
    validate_report(doc)
    assert abs(np.mean(doc["reports"][0]["per_image_dice"]) - doc["reports"][0]["dice"]) < 1e-9
    del doc["reports"][0]["kid"]
    with pytest.raises(MetricError):
        validate_report(doc)
    with pytest.raises(MetricError):
        MetricReport("sideways", 0.5, 1, "m")
