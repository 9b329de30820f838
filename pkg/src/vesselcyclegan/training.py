"""Segmenter pretraining and vessel-routed CycleGAN training.

The GAN pipeline per step, for a CF batch ``a`` and FA batch ``b``::

    fake_b = G_B(V(a))          fake_a = G_A(V(b))
    rec_a  = G_A(V(fake_b))     rec_b  = G_B(V(fake_a))
    idt_a  = G_A(V(a))          idt_b  = G_B(V(b))

FA inputs to V are intensity-inverted by default (see ``GanTrainConfig``).
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import AugmentConfig, RetinalImage, UnpairedBatch, VesselMask, augment, sample_unpaired, worker_rng
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .evaluation import binarize, dice_score
from .losses import (
    DISCRIMINATOR_TERMS, GENERATOR_TERMS, LossRecord, LossWeights, adversarial_loss, check_finite,
    cycle_loss, discriminator_loss, identity_loss, seg_consistency_loss, segmentation_loss,
)
from .networks import (
    DiscriminatorSpec, GeneratorSpec, SegNetSpec, build_discriminator, build_generator, build_segmenter,
    spec_fingerprint, vessel_map,
)

log = logging.getLogger(__name__)


@dataclass
class SegTrainConfig:
    epochs: int = 800
    lr: float = 2e-4
    lr_decay_start_epoch: Optional[int] = 50
    batch_size: int = 2
    early_stop_patience: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.epochs < 1:
            errors.append("epochs must be >= 1")
        if not self.lr > 0:
            errors.append("lr must be > 0")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.early_stop_patience < 1:
            errors.append("early_stop_patience must be >= 1")
        if self.lr_decay_start_epoch is not None and self.lr_decay_start_epoch < 0:
            errors.append("lr_decay_start_epoch must be >= 0")
        return errors


@dataclass
class GanTrainConfig:
    epochs: int = 600
    lr: float = 2e-4
    # None keeps the learning rate constant
    lr_decay_start_epoch: Optional[int] = None
    batch_size: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    pool_size: int = 50
    seg_loss_enabled: bool = True
    freeze_segmenter: bool = True
    invert_cf: bool = False
    invert_fa: bool = True
    early_stop_patience: int = 50
    steps_per_epoch: Optional[int] = None
    beta1: float = 0.5
    beta2: float = 0.999
    threshold: float = 0.5
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.epochs < 1:
            errors.append("epochs must be >= 1")
        if not self.lr > 0:
            errors.append("lr must be > 0")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.pool_size < 0:
            errors.append("pool_size must be >= 0")
        if self.early_stop_patience < 1:
            errors.append("early_stop_patience must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            errors.append("steps_per_epoch must be >= 1")
        return errors

    def invert(self, domain: str) -> bool:
        return self.invert_fa if domain == "FA" else self.invert_cf


def _check(cfg) -> None:
    errors = cfg.validate()
    if hasattr(cfg, "weights"):
        errors += [f"weights.{e}" for e in cfg.weights.validate()]
    if errors:
        raise ConfigError(f"invalid {type(cfg).__name__}: " + "; ".join(errors))


def lr_at_epoch(epoch: int, cfg) -> float:
    """Constant until ``lr_decay_start_epoch``, then linear decay toward 0 at ``epochs``."""
    _check(cfg)
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    start = cfg.lr_decay_start_epoch
    if start is None or epoch < start or start >= cfg.epochs:
        return cfg.lr
    return cfg.lr * (1 - (epoch - start) / (cfg.epochs - start))


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


class NdjsonLog:
    """Append-only newline-delimited JSON log."""

    def __init__(self, path=None, truncate: bool = True):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if truncate:
                self.path.write_text("")

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# image pool


class ImagePool:
    """History buffer of generated images for discriminator updates."""

    def __init__(self, capacity: int, rng: Optional[np.random.Generator] = None):
        if capacity < 0:
            raise ConfigError("pool capacity must be >= 0")
        self.capacity = capacity
        self.buffer: list[torch.Tensor] = []
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def query_one(self, fake: torch.Tensor) -> torch.Tensor:
        if self.capacity == 0:
            return fake
        if len(self.buffer) < self.capacity:
            self.buffer.append(fake.detach().clone())
            return fake
        if self.rng.random() < 0.5:
            return fake
        idx = int(self.rng.integers(self.capacity))
        old = self.buffer[idx]
        self.buffer[idx] = fake.detach().clone()
        return old

    def query(self, fakes: torch.Tensor) -> torch.Tensor:
        """Per-image pool query over a B x C x H x W batch."""
        return torch.stack([self.query_one(f) for f in fakes])

    def state(self) -> dict:
        return {"capacity": self.capacity, "buffer": [t.clone() for t in self.buffer]}

    def load_state(self, state: dict, rng_state: dict) -> None:
        self.capacity = state["capacity"]
        self.buffer = [t.clone() for t in state["buffer"]]
        self.rng = _rng_from_state(rng_state)


def pool_query(pool: ImagePool, fake):
    """Pool query for one image (RetinalImage or C x H x W tensor)."""
    if isinstance(fake, RetinalImage):
        return dataclasses.replace(fake, pixels=pool.query_one(fake.pixels))
    return pool.query_one(fake)


# ---------------------------------------------------------------------------
# segmenter pretraining


def mean_vessel_dice(net, images: Sequence[torch.Tensor], targets: Sequence[torch.Tensor],
                     threshold: float = 0.5) -> float:
    net.eval()
    scores = []
    with torch.no_grad():
        for x, t in zip(images, targets):
            pred = net(x.unsqueeze(0))[0]
            scores.append(dice_score(binarize(pred, threshold), binarize(t, threshold)))
    return float(np.mean(scores))


def pretrain_segmenter(train: Sequence[tuple[RetinalImage, VesselMask]],
                       val: Sequence[tuple[RetinalImage, VesselMask]],
                       cfg: SegTrainConfig,
                       spec: SegNetSpec = SegNetSpec(),
                       augment_cfg: Optional[AugmentConfig] = None,
                       out_dir=None,
                       val_metric_fn: Optional[Callable] = None) -> Checkpoint:
    """Train V on (image, mask) pairs with 0.5 BCE + 0.5 soft Dice.

    Returns the checkpoint of the epoch with the best validation Dice; with
    ``out_dir`` it is also written to ``out_dir/best`` and a per-epoch log to
    ``out_dir/seg_log.ndjson``. ``val_metric_fn(net, epoch)`` overrides the
    validation metric.
    """
    _check(cfg)
    if not train:
        raise DataError("no training samples")
    for image, mask in list(train) + list(val):
        if mask is None:
            raise DataError(f"sample {image.source_id!r} has no vessel mask")

    net = build_segmenter(spec, cfg.seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    augment_cfg = augment_cfg or AugmentConfig.identity()
    out_dir = Path(out_dir) if out_dir else None
    logger = NdjsonLog(out_dir / "seg_log.ndjson" if out_dir else None)

    val_set = list(val) if val else list(train)
    val_images = [im.pixels for im, _ in val_set]
    val_masks = [m.pixels for _, m in val_set]

    best_metric, best_state, best_epoch, bad_epochs = -math.inf, None, -1, 0
    history = {"train_loss": [], "val_metric": []}
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        _set_lr(optimizer, lr)
        rng = worker_rng(cfg.seed, 0, epoch)
        order = rng.permutation(len(train))
        net.train()
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            pairs = [augment(*train[i], augment_cfg, rng) for i in order[start:start + cfg.batch_size]]
            x = torch.stack([im.pixels for im, _ in pairs])
            t = torch.stack([m.pixels for _, m in pairs])
            loss = segmentation_loss(net(x), t)
            if not torch.isfinite(loss):
                raise NumericError(f"segmentation loss is not finite at epoch {epoch}", term="seg_pretrain")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        train_loss = float(np.mean(losses))
        metric = (val_metric_fn(net, epoch) if val_metric_fn
                  else mean_vessel_dice(net, val_images, val_masks))
        history["train_loss"].append(train_loss)
        history["val_metric"].append(metric)
        logger.write({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_dice": metric})

        if metric > best_metric:
            best_metric, best_epoch, bad_epochs = metric, epoch, 0
            best_state = (copy.deepcopy(net.state_dict()), copy.deepcopy(optimizer.state_dict()))
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.early_stop_patience:
                log.info("segmenter early stop after epoch %d", epoch)
                break

    net.load_state_dict(best_state[0])
    net.eval()
    ckpt = Checkpoint(
        kind="segmenter",
        nets={"V": net},
        optimizers={"V": best_state[1]},
        epoch=best_epoch,
        best_val_metric=best_metric,
        config=dataclasses.asdict(cfg),
        meta={"epochs_run": len(history["train_loss"]), **history},
    )
    if out_dir:
        save_checkpoint(ckpt, out_dir / "best")
    return ckpt


# ---------------------------------------------------------------------------
# GAN training


def _stack(images: Sequence) -> torch.Tensor:
    return torch.stack([im.pixels if hasattr(im, "pixels") else im for im in images])


def _as_rgb(x: torch.Tensor) -> torch.Tensor:
    return x.expand(-1, 3, -1, -1) if x.shape[1] == 1 else x


class GanTrainer:
    """Owns G_A, G_B, D_A, D_B, the segmenter V, their optimizers and pools.

    G_A synthesizes CF (domain A) and G_B synthesizes FA (domain B); D_A and
    D_B judge images of their own domain.
    """

    def __init__(self, cfg: GanTrainConfig, segmenter, gen_spec: GeneratorSpec = GeneratorSpec(),
                 disc_spec: DiscriminatorSpec = DiscriminatorSpec()):
        _check(cfg)
        self.cfg = cfg
        seed = cfg.seed
        self.V = segmenter
        self.G_A = build_generator(gen_spec, seed + 1)
        self.G_B = build_generator(gen_spec, seed + 2)
        self.D_A = build_discriminator(disc_spec, seed + 3)
        self.D_B = build_discriminator(disc_spec, seed + 4)
        # V keeps inference-mode normalization either way; freezing also stops its gradients.
        self.V.eval()
        self.V.requires_grad_(not cfg.freeze_segmenter)
        g_params = list(self.G_A.parameters()) + list(self.G_B.parameters())
        if not cfg.freeze_segmenter:
            g_params += list(self.V.parameters())
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(g_params, lr=cfg.lr, betas=betas)
        self.opt_d_a = torch.optim.Adam(self.D_A.parameters(), lr=cfg.lr, betas=betas)
        self.opt_d_b = torch.optim.Adam(self.D_B.parameters(), lr=cfg.lr, betas=betas)
        self.pool_a = ImagePool(cfg.pool_size, np.random.default_rng([seed, 101]))
        self.pool_b = ImagePool(cfg.pool_size, np.random.default_rng([seed, 102]))
        self.step_count = 0

    @property
    def nets(self) -> dict:
        return {"G_A": self.G_A, "G_B": self.G_B, "D_A": self.D_A, "D_B": self.D_B, "V": self.V}

    @property
    def optimizers(self) -> dict:
        return {"G": self.opt_g, "D_A": self.opt_d_a, "D_B": self.opt_d_b}

    def set_lr(self, lr: float) -> None:
        for opt in self.optimizers.values():
            _set_lr(opt, lr)

    def vessels(self, images: torch.Tensor, domain: str) -> torch.Tensor:
        return vessel_map(self.V, _as_rgb(images), self.cfg.invert(domain))

    def generator_update(self, real_a: torch.Tensor, real_b: torch.Tensor):
        cfg, w = self.cfg, self.cfg.weights
        self.G_A.train()
        self.G_B.train()
        self.D_A.requires_grad_(False)
        self.D_B.requires_grad_(False)
        try:
            v_real_a = self.vessels(real_a, "CF")
            v_real_b = self.vessels(real_b, "FA")
            fake_b = self.G_B(v_real_a)
            fake_a = self.G_A(v_real_b)
            v_fake_b = self.vessels(fake_b, "FA")
            v_fake_a = self.vessels(fake_a, "CF")
            rec_a = self.G_A(v_fake_b)
            rec_b = self.G_B(v_fake_a)
            idt_a = self.G_A(v_real_a)
            idt_b = self.G_B(v_real_b)

            terms = {
                "adv_g_a": adversarial_loss(self.D_A(fake_a), True),
                "adv_g_b": adversarial_loss(self.D_B(fake_b), True),
                "cyc_a": cycle_loss(real_a, rec_a, w.lambda_a),
                "cyc_b": cycle_loss(real_b, rec_b, w.lambda_b),
                "idt_a": identity_loss(real_a, idt_a, w.lambda_a, w.lambda_idt),
                "idt_b": identity_loss(real_b, idt_b, w.lambda_b, w.lambda_idt),
            }
            if cfg.seg_loss_enabled:
                terms["seg_a"] = seg_consistency_loss(v_fake_b, v_real_a, w.lambda_seg)
                terms["seg_b"] = seg_consistency_loss(v_fake_a, v_real_b, w.lambda_seg)
            else:
                terms["seg_a"] = terms["seg_b"] = torch.zeros(())
            check_finite(terms)
            total = sum(terms[k] for k in GENERATOR_TERMS)
            check_finite({"total_g": total})
            self.opt_g.zero_grad(set_to_none=True)
            total.backward()
            self.opt_g.step()
        finally:
            self.D_A.requires_grad_(True)
            self.D_B.requires_grad_(True)
        values = {k: float(v.detach()) for k, v in terms.items()}
        values["total_g"] = float(total.detach())
        return values, fake_a.detach(), fake_b.detach()

    def _discriminator_update(self, disc, opt, pool, real, fake, term):
        disc.train()
        loss = discriminator_loss(disc(real), disc(pool.query(fake)))
        check_finite({term: loss})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        return float(loss.detach())

    def discriminator_update_a(self, real_a, fake_a) -> float:
        return self._discriminator_update(self.D_A, self.opt_d_a, self.pool_a, real_a, fake_a, "adv_d_a")

    def discriminator_update_b(self, real_b, fake_b) -> float:
        return self._discriminator_update(self.D_B, self.opt_d_b, self.pool_b, real_b, fake_b, "adv_d_b")

    def step(self, batch, on_substep: Optional[Callable[[str], None]] = None) -> LossRecord:
        """One update of both generators, then D_A, then D_B."""
        batches = batch if isinstance(batch, (list, tuple)) else [batch]
        real_a = _as_rgb(_stack([b.image_a for b in batches]))
        real_b = _as_rgb(_stack([b.image_b for b in batches]))
        values, fake_a, fake_b = self.generator_update(real_a, real_b)
        if on_substep:
            on_substep("G")
        values["adv_d_a"] = self.discriminator_update_a(real_a, fake_a)
        if on_substep:
            on_substep("D_A")
        values["adv_d_b"] = self.discriminator_update_b(real_b, fake_b)
        if on_substep:
            on_substep("D_B")
        values["total_d"] = values["adv_d_a"] + values["adv_d_b"]
        self.step_count += 1
        return LossRecord(step=self.step_count, **{k: values[k] for k in GENERATOR_TERMS + DISCRIMINATOR_TERMS
                                                    + ("total_g", "total_d")})

    # -- state ------------------------------------------------------------

    def to_checkpoint(self, epoch: int = 0, best_val_metric: float = -math.inf,
                      rng: Optional[np.random.Generator] = None, meta: Optional[dict] = None) -> Checkpoint:
        rng_states = {"pool_a": _rng_state(self.pool_a.rng), "pool_b": _rng_state(self.pool_b.rng)}
        if rng is not None:
            rng_states["data"] = _rng_state(rng)
        return Checkpoint(
            kind="gan",
            nets=self.nets,
            optimizers={k: copy.deepcopy(o.state_dict()) for k, o in self.optimizers.items()},
            epoch=epoch,
            step=self.step_count,
            best_val_metric=best_val_metric,
            config=gan_config_to_dict(self.cfg),
            rng_states=rng_states,
            pools={"pool_a": self.pool_a.state(), "pool_b": self.pool_b.state()},
            meta={"segmenter_fingerprint": self.V.fingerprint, **(meta or {})},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: Optional[GanTrainConfig] = None) -> "GanTrainer":
        if ckpt.kind != "gan":
            raise CheckpointError(f"expected a GAN checkpoint, got {ckpt.kind!r}")
        cfg = cfg or gan_config_from_dict(ckpt.config)
        trainer = cls(cfg, ckpt.nets["V"], ckpt.nets["G_A"].spec, ckpt.nets["D_A"].spec)
        for name, net in ckpt.nets.items():
            getattr(trainer, name).load_state_dict(net.state_dict())
        for name, opt in trainer.optimizers.items():
            opt.load_state_dict(ckpt.optimizers[name])
        trainer.pool_a.load_state(ckpt.pools["pool_a"], ckpt.rng_states["pool_a"])
        trainer.pool_b.load_state(ckpt.pools["pool_b"], ckpt.rng_states["pool_b"])
        trainer.step_count = ckpt.step
        return trainer


def gan_train_step(trainer: GanTrainer, batch) -> LossRecord:
    return trainer.step(batch)


def gan_config_to_dict(cfg: GanTrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def gan_config_from_dict(doc: dict) -> GanTrainConfig:
    doc = dict(doc)
    doc["weights"] = LossWeights(**doc.get("weights", {}))
    return GanTrainConfig(**doc)


@dataclass
class GanData:
    train_a: list
    train_b: list
    val_a: list = field(default_factory=list)
    val_b: list = field(default_factory=list)


def validation_dice(trainer: GanTrainer, val_a: Sequence, val_b: Sequence, threshold: float = 0.5) -> float:
    """Mean binarized Dice between V(fake) and V(content) over both directions."""
    scores = []
    for net in (trainer.G_A, trainer.G_B):
        net.eval()
    with torch.no_grad():
        for images, src, dst, gen in ((val_a, "CF", "FA", trainer.G_B), (val_b, "FA", "CF", trainer.G_A)):
            for im in images:
                x = _as_rgb(_stack([im]))
                v_content = trainer.vessels(x, src)
                v_fake = trainer.vessels(gen(v_content), dst)
                scores.append(dice_score(binarize(v_fake[0], threshold), binarize(v_content[0], threshold)))
    return float(np.mean(scores)) if scores else -math.inf


def train_gan(data: GanData, cfg: GanTrainConfig, segmenter_ckpt: Checkpoint,
              seg_spec: Optional[SegNetSpec] = None,
              gen_spec: GeneratorSpec = GeneratorSpec(),
              disc_spec: DiscriminatorSpec = DiscriminatorSpec(),
              augment_cfg: Optional[AugmentConfig] = None,
              out_dir=None, resume_from=None, max_epochs: Optional[int] = None) -> Checkpoint:
    """Adversarial training over class-matched unpaired samples.

    Writes ``train_log.ndjson`` (one LossRecord per step plus per-epoch
    validation rows) and the ``best``/``last`` checkpoints into ``out_dir``.
    ``max_epochs`` stops early regardless of the configured epoch count,
    leaving a resumable ``last`` checkpoint.
    """
    _check(cfg)
    seg = segmenter_ckpt.nets["V"]
    if seg_spec is not None and spec_fingerprint(seg_spec) != seg.fingerprint:
        raise CheckpointError("segmenter checkpoint does not match the configured segmenter spec")
    augment_cfg = augment_cfg or AugmentConfig.identity()
    out_dir = Path(out_dir) if out_dir else None
    if not data.train_a or not data.train_b:
        raise DataError("GAN training needs patches from both domains")

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expected_specs={"V": seg.spec, "G_A": gen_spec, "D_A": disc_spec})
        if ckpt.meta.get("segmenter_fingerprint") != seg.fingerprint:
            raise CheckpointError("resumed run was trained with a different segmenter")
        trainer = GanTrainer.from_checkpoint(ckpt, cfg)
        start_epoch = ckpt.epoch + 1
        best_metric = ckpt.best_val_metric
        bad_epochs = ckpt.meta.get("bad_epochs", 0)
        logger = NdjsonLog(out_dir / "train_log.ndjson" if out_dir else None, truncate=False)
    else:
        trainer = GanTrainer(cfg, copy.deepcopy(seg), gen_spec, disc_spec)
        start_epoch, best_metric, bad_epochs = 0, -math.inf, 0
        logger = NdjsonLog(out_dir / "train_log.ndjson" if out_dir else None)

    steps = cfg.steps_per_epoch or len(data.train_a)
    best_ckpt = None
    stop_epoch = cfg.epochs if max_epochs is None else min(cfg.epochs, start_epoch + max_epochs)
    for epoch in range(start_epoch, stop_epoch):
        trainer.set_lr(lr_at_epoch(epoch, cfg))
        rng = worker_rng(cfg.seed, 0, epoch)
        for _ in range(steps):
            batch = []
            for _ in range(cfg.batch_size):
                pair = sample_unpaired(data.train_a, data.train_b, rng)
                a, _ = augment(pair.image_a, None, augment_cfg, rng)
                b, _ = augment(pair.image_b, None, augment_cfg, rng)
                batch.append(UnpairedBatch(a, b))
            record = trainer.step(batch)
            logger.write({"epoch": epoch, **record.to_json()})

        metric = validation_dice(trainer, data.val_a, data.val_b, cfg.threshold)
        improved = metric > best_metric
        if improved:
            best_metric, bad_epochs = metric, 0
        else:
            bad_epochs += 1
        logger.write({"epoch": epoch, "val_dice": metric, "best_val_dice": best_metric, "improved": improved})
        ckpt = trainer.to_checkpoint(epoch, best_metric, meta={"bad_epochs": bad_epochs})
        if out_dir:
            save_checkpoint(ckpt, out_dir / "last")
            if improved:
                save_checkpoint(ckpt, out_dir / "best")
        if improved and not out_dir:
            best_ckpt = copy.deepcopy(ckpt)
        if bad_epochs >= cfg.early_stop_patience:
            log.info("GAN early stop after epoch %d", epoch)
            break

    if out_dir and (out_dir / "best").exists():
        return load_checkpoint(out_dir / "best")
    return best_ckpt if best_ckpt is not None else trainer.to_checkpoint(stop_epoch - 1, best_metric)
