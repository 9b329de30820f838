"""Acceptance criteria 1-11.

Each criterion returns (passed, detail). Under pytest every criterion is one
test and its PASS/FAIL line is echoed in the terminal summary; run this file
directly to print the lines without pytest.
"""

from __future__ import annotations

import copy
import math
import sys
import time

import numpy as np
import pytest
import torch

from vesselcyclegan.data import UnpairedBatch, make_patch_grid
from vesselcyclegan.evaluation import EmbeddingSet, dice_score, kid_score, overlay_counts, render_overlay
from vesselcyclegan.losses import (
    GENERATOR_TERMS, adversarial_loss, bce_loss, cycle_loss, identity_loss, soft_dice_loss,
)
from vesselcyclegan.networks import (
    DiscriminatorSpec, GeneratorSpec, SegNetSpec, ViTBlock, build_discriminator, build_generator,
    build_segmenter, parameter_digest,
)
from vesselcyclegan.synthetic import pretrain_toy_segmenter, toy_segmentation_samples, toy_specs, toy_unpaired_sets
from vesselcyclegan.training import GanTrainConfig, GanTrainer, SegTrainConfig, pretrain_segmenter

RESULTS: list[str] = []

# runtime budgets in seconds
BUDGET = {1: 1, 2: 10, 3: 30, 4: 1, 5: 30, 6: 300, 7: 600, 8: 60, 9: 120, 10: 120, 11: 5}
TITLE = {
    1: "loss oracles", 2: "gradient checks", 3: "architecture arithmetic", 4: "patch protocol",
    5: "dice and KID", 6: "segmenter toy overfit", 7: "GAN toy overfit", 8: "ablation switch",
    9: "frozen V and D/G isolation", 10: "determinism and resume", 11: "overlay counts",
}


def _close(a, b, tol=1e-6):
    return abs(float(a) - float(b)) <= tol


# --- 1 ----------------------------------------------------------------------

def criterion_1():
    real2, recon2 = torch.zeros(1, 2, 2), torch.tensor([[[1.0, 0.0], [0.0, 0.0]]])
    ones, zeros = torch.ones(1, 4, 4), torch.zeros(1, 4, 4)
    half = torch.full((1, 4, 4), 0.5)
    target = (torch.arange(16).reshape(1, 4, 4) % 3 == 0).float()
    checks = {
        "cycle 2x2 lambda=100": (cycle_loss(real2, recon2, 100.0), 25.0),
        "cycle identical": (cycle_loss(recon2, recon2, 100.0), 0.0),
        "identity 2x2 lambda=100 idt=1": (identity_loss(real2, recon2, 100.0, 1.0), 25.0),
        "identity idt=2": (identity_loss(real2, recon2, 100.0, 2.0), 50.0),
        "dice ones/ones": (soft_dice_loss(ones, ones), 0.0),
        "dice zeros/ones": (soft_dice_loss(zeros, ones), 1 - 1 / 17),
        "dice zeros/zeros": (soft_dice_loss(zeros, zeros), 0.0),
        "bce ones/ones": (bce_loss(ones, ones), 0.0),
        "bce half": (bce_loss(half, target), math.log(2)),
        "adv ones real": (adversarial_loss(ones, True), 0.0),
        "adv zeros real": (adversarial_loss(zeros, True), 1.0),
        "adv half real": (adversarial_loss(half, True), 0.25),
        "adv half fake": (adversarial_loss(half, False), 0.25),
    }
    bad = [k for k, (got, want) in checks.items() if not _close(got, want)]
    worst = max(abs(float(g) - w) for g, w in checks.values())
    return not bad, f"{len(checks)} fixtures, max abs error {worst:.1e}" + (f"; failed {bad}" if bad else "")


# --- 2 ----------------------------------------------------------------------

def _fd_grad(f, x, h=1e-4):
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(f(x))
        flat[i] = old - h
        down = float(f(x))
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def criterion_2():
    gen = torch.Generator().manual_seed(2024)
    worst = {}
    for name in ("soft_dice_loss", "bce_loss", "cycle_loss"):
        errs = []
        for _ in range(20):
            t = torch.rand(1, 4, 4, generator=gen, dtype=torch.float64)
            x = 0.02 + 0.96 * torch.rand(1, 4, 4, generator=gen, dtype=torch.float64)
            if name == "soft_dice_loss":
                f = lambda p, t=t: soft_dice_loss(p, t)  # noqa: E731
            elif name == "bce_loss":
                f = lambda p, t=t: bce_loss(p, (t > 0.5).double())  # noqa: E731
            else:
                f = lambda p, t=t: cycle_loss(t, p, 100.0)  # noqa: E731
            xg = x.clone().requires_grad_(True)
            f(xg).backward()
            num = _fd_grad(f, x.clone())
            errs.append(float((xg.grad - num).norm() / num.norm().clamp_min(1e-12)))
        worst[name] = max(errs)
    ok = all(v < 1e-3 for v in worst.values())
    return ok, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())


# --- 3 ----------------------------------------------------------------------

def _conv(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def criterion_3():
    x448 = torch.rand(1, 3, 448, 448)
    seg = build_segmenter(SegNetSpec())
    gen = build_generator(GeneratorSpec())
    disc = build_discriminator(DiscriminatorSpec())

    # U-Nets: 4 halvings then 4 doublings give back the input size
    n = 448
    for _ in range(4):
        n = _conv(n, 2, 2, 0)
    bottleneck_side = n
    for _ in range(4):
        n = (n - 1) * 2 + 2
    expected_unet = n

    tokens = {}

    def count_tokens(module, inp, out):
        tokens["n"] = inp[0].shape[-1] * inp[0].shape[-2]

    hook = gen.body.bottleneck.register_forward_hook(count_tokens)
    with torch.no_grad():
        s_out = seg.eval()(x448)
        g_out = gen.eval()(torch.rand(1, 1, 448, 448))
        d448 = disc(x448)
        d256 = disc(torch.rand(1, 3, 256, 256))
    hook.remove()
    blocks = sum(isinstance(m, ViTBlock) for m in gen.modules())

    def patchgan(n):
        for _ in range(3):
            n = _conv(n, 4, 2, 1)
        return _conv(_conv(n, 4, 1, 1), 4, 1, 1)

    checks = {
        "segmenter 3x448 -> 1x448": tuple(s_out.shape[1:]) == (1, expected_unet, expected_unet) == (1, 448, 448),
        "generator 1x448 -> 3x448": tuple(g_out.shape[1:]) == (3, expected_unet, expected_unet),
        "bottleneck tokens 784": tokens.get("n") == bottleneck_side ** 2 == 784,
        "transformer blocks 12": blocks == 12,
        "discriminator 448 -> 54": tuple(d448.shape[1:]) == (1, patchgan(448), patchgan(448)) == (1, 54, 54),
        "discriminator 256 -> 30": tuple(d256.shape[1:]) == (1, patchgan(256), patchgan(256)) == (1, 30, 30),
    }
    bad = [k for k, v in checks.items() if not v]
    return not bad, f"tokens {tokens.get('n')}, blocks {blocks}, D maps {d448.shape[-1]}/{d256.shape[-1]}" + (
        f"; failed {bad}" if bad else "")


# --- 4 ----------------------------------------------------------------------

def criterion_4():
    grid = make_patch_grid(576, 720, 512, 3, 3)
    expected = {(r, c) for r in (0, 32, 64) for c in (0, 104, 208)}
    cover = np.zeros((576, 720), dtype=bool)
    for r, c in grid.offsets:
        cover[r:r + 512, c:c + 512] = True
    ok = set(grid.offsets) == expected and len(grid.offsets) == 9 and cover.all()
    return ok, f"{len(grid.offsets)} offsets, coverage {cover.mean():.3f}"


# --- 5 ----------------------------------------------------------------------

def _dice_oracle(a, b):
    inter = sa = sb = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            sa += int(a[i, j])
            sb += int(b[i, j])
            inter += int(a[i, j] and b[i, j])
    return 1.0 if sa + sb == 0 else 2 * inter / (sa + sb)


def criterion_5():
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        density = rng.uniform(0, 1)
        a, b = rng.random((8, 8)) < density, rng.random((8, 8)) < rng.uniform(0, 1)
        if dice_score(torch.from_numpy(a)[None].float(), torch.from_numpy(b)[None].float()) != _dice_oracle(a, b):
            mismatches += 1
    x = rng.normal(size=(100, 64))
    kid_same = kid_score(EmbeddingSet(x, "e"), EmbeddingSet(x.copy(), "e"), subset_size=100, n_subsets=1)
    p = rng.normal(size=(500, 64))
    q = rng.normal(size=(500, 64))
    kid_draws = kid_score(EmbeddingSet(p, "e"), EmbeddingSet(q, "e"), subset_size=500, n_subsets=1)
    ok = mismatches == 0 and abs(kid_same) < 1e-6 and abs(kid_draws) < 0.01
    return ok, f"dice mismatches {mismatches}/1000, KID(X,X) {kid_same:.1e}, KID(P,Q) {kid_draws:.1e}"


# --- 6 ----------------------------------------------------------------------

def criterion_6():
    samples = toy_segmentation_samples(2, 64)
    cfg = SegTrainConfig(epochs=200, lr=3e-3, lr_decay_start_epoch=None, early_stop_patience=200, seed=0)
    ckpt = pretrain_segmenter(samples, samples, cfg, SegNetSpec())
    losses = ckpt.meta["train_loss"]
    ratio = losses[-1] / losses[0]
    final_dice = ckpt.meta["val_metric"][-1]
    ok = len(losses) == 200 and ratio < 0.1 and final_dice > 0.9
    return ok, f"loss {losses[0]:.3f} -> {losses[-1]:.4f} (ratio {ratio:.3f}), val Dice {final_dice:.3f}"


# --- shared GAN fixtures ----------------------------------------------------

_TOY = {}


def _toy_v():
    if "v" not in _TOY:
        _TOY["v"] = pretrain_toy_segmenter(seed=0).nets["V"]
    return _TOY["v"]


def _trainer(seed=0, **overrides):
    _, gen_spec, disc_spec = toy_specs()
    cfg = GanTrainConfig(lr=1e-3, seed=seed, **overrides)
    return GanTrainer(cfg, copy.deepcopy(_toy_v()), gen_spec, disc_spec)


def _batches(n, seed=0):
    a, b = toy_unpaired_sets(4, 64)
    rng = np.random.default_rng(seed)
    return [UnpairedBatch(a[rng.integers(4)], b[rng.integers(4)]) for _ in range(n)]


# --- 7 ----------------------------------------------------------------------

def criterion_7():
    trainer = _trainer()
    records = [trainer.step(batch) for batch in _batches(200)]
    finite = all(math.isfinite(v) for r in records for v in r.terms().values())
    totals = [r.total_g for r in records]
    start, end = float(np.mean(totals[:10])), float(np.mean(totals[-10:]))
    decrease = 1 - end / start
    return finite and decrease >= 0.5, f"total_g {start:.2f} -> {end:.2f} ({decrease:.0%} decrease), finite={finite}"


# --- 8 ----------------------------------------------------------------------

def criterion_8():
    batch = _batches(1)[0]
    on = _trainer(seed=3).step(batch)
    off = _trainer(seed=3, seg_loss_enabled=False).step(batch)
    others = [k for k in GENERATOR_TERMS + ("adv_d_a", "adv_d_b") if not k.startswith("seg")]
    differing = [k for k in others if getattr(on, k) != getattr(off, k)]
    ok = off.seg_a == 0.0 and off.seg_b == 0.0 and on.seg_a > 0 and not differing
    return ok, f"disabled seg terms ({off.seg_a}, {off.seg_b}); {len(others) - len(differing)}/{len(others)} other terms bit-identical"


# --- 9 ----------------------------------------------------------------------

def criterion_9():
    trainer = _trainer(seed=1)
    groups = {"G": ("G_A", "G_B"), "D": ("D_A", "D_B")}
    digest = lambda names: {n: parameter_digest(getattr(trainer, n)) for n in names}  # noqa: E731
    v_before = parameter_digest(trainer.V)
    violations = []
    for step, batch in enumerate(_batches(50, seed=1)):
        before = digest(groups["G"] + groups["D"])
        snap = {}

        def on_substep(stage):
            snap[stage] = digest(groups["G"] + groups["D"])

        trainer.step(batch, on_substep)
        g, da, db = snap["G"], snap["D_A"], snap["D_B"]
        if any(g[n] != before[n] for n in groups["D"]):
            violations.append((step, "D changed during G update"))
        if any(g[n] == before[n] for n in groups["G"]):
            violations.append((step, "G not updated"))
        if any(da[n] != g[n] for n in groups["G"]) or any(db[n] != g[n] for n in groups["G"]):
            violations.append((step, "G changed during D update"))
        if da["D_B"] != g["D_B"] or db["D_A"] != da["D_A"]:
            violations.append((step, "D update leaked across domains"))
    v_same = parameter_digest(trainer.V) == v_before
    ok = v_same and not violations
    return ok, f"V unchanged over 50 steps={v_same}, isolation violations {len(violations)}"


# --- 10 ---------------------------------------------------------------------

def criterion_10(tmp_dir=None):
    import tempfile
    from vesselcyclegan.checkpoint import load_checkpoint, save_checkpoint

    batches = _batches(20, seed=2)
    run_a = [r.to_json() for r in map(_trainer(seed=2).step, batches)]
    run_b = [r.to_json() for r in map(_trainer(seed=2).step, batches)]
    same_runs = run_a == run_b

    trainer = _trainer(seed=2)
    for batch in batches[:10]:
        trainer.step(batch)
    with tempfile.TemporaryDirectory(dir=tmp_dir) as d:
        save_checkpoint(trainer.to_checkpoint(epoch=0), f"{d}/mid")
        resumed = GanTrainer.from_checkpoint(load_checkpoint(f"{d}/mid"))
    continued = [resumed.step(b).to_json() for b in batches[10:15]]
    same_resume = continued == run_a[10:15]
    return same_runs and same_resume, (
        f"20-step logs identical={same_runs}; resume at step 10 identical for {len(continued)} steps={same_resume}")


# --- 11 ---------------------------------------------------------------------

def criterion_11():
    rng = np.random.default_rng(11)
    bad = 0
    for _ in range(100):
        h, w = rng.integers(4, 40, size=2)
        c = rng.random((h, w)) < rng.uniform(0, 1)
        g = rng.random((h, w)) < rng.uniform(0, 1)
        base = torch.from_numpy(rng.uniform(0.1, 0.9, (3, h, w))).float()
        counts = overlay_counts(render_overlay(torch.from_numpy(c)[None], torch.from_numpy(g)[None], base))
        red = sum(1 for i in range(h) for j in range(w) if c[i, j] and not g[i, j])
        cyan = sum(1 for i in range(h) for j in range(w) if g[i, j] and not c[i, j])
        white = sum(1 for i in range(h) for j in range(w) if c[i, j] and g[i, j])
        bad += counts != {"red": red, "cyan": cyan, "white": white}
    return bad == 0, f"{100 - bad}/100 mask pairs exact"


# --- harness ----------------------------------------------------------------

CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 12)}


def evaluate(i: int) -> tuple[bool, str]:
    t0 = time.perf_counter()
    ok, detail = CRITERIA[i]()
    elapsed = time.perf_counter() - t0
    in_budget = elapsed < BUDGET[i]
    passed = ok and in_budget
    line = (f"[{'PASS' if passed else 'FAIL'}] criterion {i:2d} {TITLE[i]}: {detail}; "
            f"{elapsed:.1f}s (budget {BUDGET[i]}s{'' if in_budget else ', EXCEEDED'})")
    RESULTS.append(line)
    print(line)
    return passed, line


@pytest.mark.parametrize("i", range(1, 12))
def test_criterion(i):
    passed, line = evaluate(i)
    assert passed, line


if __name__ == "__main__":
    torch.set_num_threads(1)
    outcomes = [evaluate(i)[0] for i in CRITERIA]
    sys.exit(0 if all(outcomes) else 1)
