"""Segmentation UNet, UNet-ViT / ResNet9 generators and PatchGAN discriminator.

Each network is built from a small frozen dataclass spec. The spec's
fingerprint travels with the parameters so checkpoints can refuse to load
into a mismatched architecture.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError

INIT_STD = 0.02


@dataclass(frozen=True)
class SegNetSpec:
    levels: int = 4
    base_width: int = 16
    in_channels: int = 3
    out_channels: int = 1

    def validate(self) -> list[str]:
        errors = []
        if self.levels < 1:
            errors.append("levels must be >= 1")
        if self.base_width < 1:
            errors.append("base_width must be >= 1")
        if self.in_channels not in (1, 3):
            errors.append("in_channels must be 1 or 3")
        if self.out_channels != 1:
            errors.append("out_channels must be 1")
        return errors


@dataclass(frozen=True)
class GeneratorSpec:
    backend: str = "unet_vit"
    levels: int = 4
    base_width: int = 48
    vit_blocks: int = 12
    vit_embed_dim: int = 384
    vit_heads: int = 6
    vit_mlp_ratio: float = 4.0
    # positional-embedding grid; resampled when the bottleneck grid differs
    token_grid: int = 28
    resnet_blocks: int = 9
    in_channels: int = 1
    out_channels: int = 3

    def validate(self) -> list[str]:
        errors = []
        if self.backend not in ("unet_vit", "resnet9"):
            errors.append(f"unknown backend {self.backend!r}")
        if self.levels < 1:
            errors.append("levels must be >= 1")
        if self.base_width < 1:
            errors.append("base_width must be >= 1")
        if self.backend == "unet_vit":
            if self.vit_blocks < 1:
                errors.append("unet_vit backend needs vit_blocks >= 1")
            if self.vit_heads < 1 or self.vit_embed_dim % self.vit_heads:
                errors.append("vit_embed_dim must be divisible by vit_heads")
            if self.token_grid < 1:
                errors.append("token_grid must be >= 1")
        if self.resnet_blocks < 1:
            errors.append("resnet_blocks must be >= 1")
        if self.in_channels != 1:
            errors.append("generators consume 1-channel vessel maps")
        if self.out_channels not in (1, 3):
            errors.append("out_channels must be 1 or 3")
        return errors

    @property
    def downsamplings(self) -> int:
        return self.levels if self.backend == "unet_vit" else 2

    @classmethod
    def resnet9(cls, base_width: int = 64) -> "GeneratorSpec":
        return cls(backend="resnet9", base_width=base_width)


@dataclass(frozen=True)
class DiscriminatorSpec:
    layers: int = 3
    base_width: int = 64
    in_channels: int = 3

    def validate(self) -> list[str]:
        errors = []
        if self.layers < 1:
            errors.append("layers must be >= 1")
        if self.base_width < 1:
            errors.append("base_width must be >= 1")
        if self.in_channels not in (1, 3):
            errors.append("in_channels must be 1 or 3")
        return errors

    @property
    def receptive_field(self) -> int:
        # two stride-1 k4 convs after the stride-2 stages
        rf = 1
        for stride in reversed([2] * self.layers + [1, 1]):
            rf = rf * stride + (4 - stride)
        return rf


def spec_to_dict(spec) -> dict:
    return {"type": type(spec).__name__, **dataclasses.asdict(spec)}


SPEC_TYPES = {c.__name__: c for c in (SegNetSpec, GeneratorSpec, DiscriminatorSpec)}


def spec_from_dict(doc: dict):
    doc = dict(doc)
    kind = doc.pop("type", None)
    if kind not in SPEC_TYPES:
        raise ConfigError(f"unknown network spec type {kind!r}")
    return SPEC_TYPES[kind](**doc)


def spec_fingerprint(spec) -> str:
    blob = json.dumps(spec_to_dict(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _check_spec(spec) -> None:
    errors = spec.validate()
    if errors:
        raise ConfigError(f"invalid {type(spec).__name__}: " + "; ".join(errors))


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """N(0, 0.02) conv/linear weights, zero biases; norm layers get unit scale."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, INIT_STD, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.MultiheadAttention):
            with torch.no_grad():
                m.in_proj_weight.normal_(0.0, INIT_STD, generator=generator)
                m.in_proj_bias.zero_()
        elif isinstance(m, PixelViTBottleneck):
            with torch.no_grad():
                m.pos.normal_(0.0, INIT_STD, generator=generator)
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d, nn.LayerNorm)):
            if getattr(m, "weight", None) is not None:
                with torch.no_grad():
                    m.weight.fill_(1.0)
                    m.bias.zero_()


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() != 4:
        raise DimensionError(f"expected C x H x W or B x C x H x W, got {tuple(x.shape)}")
    return x, False


def _check_divisible(x: torch.Tensor, factor: int, what: str) -> None:
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise DimensionError(f"{what} input {h}x{w} must be divisible by {factor}")


# ---------------------------------------------------------------------------
# segmentation UNet


def _double_conv(cin, cout, norm):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), norm(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), norm(cout), nn.ReLU(inplace=True),
    )


class SegmentationUNet(nn.Module):
    """Vessel segmenter: UNet with batch norm and a sigmoid head."""

    def __init__(self, spec: SegNetSpec):
        super().__init__()
        self.spec = spec
        widths = [spec.base_width * 2 ** i for i in range(spec.levels)]
        self.encoder = nn.ModuleList()
        cin = spec.in_channels
        for w in widths:
            self.encoder.append(_double_conv(cin, w, nn.BatchNorm2d))
            cin = w
        self.bottleneck = _double_conv(cin, cin * 2, nn.BatchNorm2d)
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        cin = cin * 2
        for w in reversed(widths):
            self.up.append(nn.ConvTranspose2d(cin, w, 2, stride=2))
            self.decoder.append(_double_conv(2 * w, w, nn.BatchNorm2d))
            cin = w
        self.head = nn.Conv2d(cin, spec.out_channels, 1)

    @property
    def encoder_widths(self) -> list[int]:
        return [block[0].out_channels for block in self.encoder]

    def forward(self, x):
        x, squeeze = _as_batch(x)
        if x.shape[1] != self.spec.in_channels:
            raise DimensionError(f"segmenter expects {self.spec.in_channels} channels, got {x.shape[1]}")
        _check_divisible(x, 2 ** self.spec.levels, "segmenter")
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, block, skip in zip(self.up, self.decoder, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1))
        y = torch.sigmoid(self.head(x))
        return y.squeeze(0) if squeeze else y


# ---------------------------------------------------------------------------
# generators


class ViTBlock(nn.Module):
    """Pre-norm transformer encoder block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class PixelViTBottleneck(nn.Module):
    """Transformer over bottleneck pixels: one token per spatial position."""

    def __init__(self, channels: int, spec: GeneratorSpec):
        super().__init__()
        d = spec.vit_embed_dim
        self.token_grid = spec.token_grid
        self.embed = nn.Linear(channels, d)
        self.pos = nn.Parameter(torch.zeros(1, spec.token_grid ** 2, d))
        self.blocks = nn.ModuleList(
            ViTBlock(d, spec.vit_heads, spec.vit_mlp_ratio) for _ in range(spec.vit_blocks)
        )
        self.norm = nn.LayerNorm(d)
        self.unembed = nn.Linear(d, channels)

    def position_embedding(self, h: int, w: int) -> torch.Tensor:
        g = self.token_grid
        if (h, w) == (g, g):
            return self.pos
        grid = self.pos.reshape(1, g, g, -1).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=False)
        return grid.permute(0, 2, 3, 1).reshape(1, h * w, -1)

    def forward(self, x):
        b, c, h, w = x.shape
        tokens = self.embed(x.flatten(2).transpose(1, 2)) + self.position_embedding(h, w)
        for block in self.blocks:
            tokens = block(tokens)
        out = self.unembed(self.norm(tokens))
        return x + out.transpose(1, 2).reshape(b, c, h, w)


def _in_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.InstanceNorm2d(cout, affine=True), nn.LeakyReLU(0.2, inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.InstanceNorm2d(cout, affine=True), nn.LeakyReLU(0.2, inplace=True),
    )


class UNetViTGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        widths = [spec.base_width * 2 ** i for i in range(spec.levels)]
        self.encoder = nn.ModuleList()
        self.down = nn.ModuleList()
        cin = spec.in_channels
        for w in widths:
            self.encoder.append(_in_block(cin, w))
            self.down.append(nn.Conv2d(w, w, 2, stride=2))
            cin = w
        self.bottleneck = PixelViTBottleneck(cin, spec)
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for w in reversed(widths):
            self.up.append(nn.ConvTranspose2d(cin, w, 2, stride=2))
            self.decoder.append(_in_block(2 * w, w))
            cin = w
        self.head = nn.Conv2d(cin, spec.out_channels, 1)

    def forward(self, x):
        skips = []
        for block, down in zip(self.encoder, self.down):
            x = block(x)
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x)
        for up, block, skip in zip(self.up, self.decoder, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1))
        return self.head(x)


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class ResNetGenerator(nn.Module):
    """c7s1-w, d2w, d4w, residual blocks, u2w, uw, c7s1-out."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(spec.in_channels, w, 7), nn.InstanceNorm2d(w), nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * w), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.InstanceNorm2d(4 * w), nn.ReLU(inplace=True),
        )
        self.blocks = nn.ModuleList(ResidualBlock(4 * w) for _ in range(spec.resnet_blocks))
        self.tail = nn.Sequential(
            nn.ConvTranspose2d(4 * w, 2 * w, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * w), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * w, w, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(w), nn.ReLU(inplace=True),
            nn.ReflectionPad2d(3), nn.Conv2d(w, spec.out_channels, 7),
        )

    def forward(self, x):
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        return self.tail(x)


class VesselGenerator(nn.Module):
    """Maps a 1-channel vessel probability map to an image in [0, 1]."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        self.body = UNetViTGenerator(spec) if spec.backend == "unet_vit" else ResNetGenerator(spec)

    def forward(self, vessels):
        x, squeeze = _as_batch(vessels)
        if x.shape[1] != self.spec.in_channels:
            raise DimensionError(f"generator expects a {self.spec.in_channels}-channel vessel map, got {x.shape[1]}")
        _check_divisible(x, 2 ** self.spec.downsamplings, "generator")
        y = (torch.tanh(self.body(x)) + 1) / 2
        return y.squeeze(0) if squeeze else y

    def bottleneck_tokens(self, h: int, w: int) -> int:
        f = 2 ** self.spec.downsamplings
        return (h // f) * (w // f)

    @property
    def transformer_blocks(self) -> int:
        if self.spec.backend != "unet_vit":
            return 0
        return len(self.body.bottleneck.blocks)


# ---------------------------------------------------------------------------
# discriminator


class PatchDiscriminator(nn.Module):
    """PatchGAN: stride-2 k4 stages, one stride-1 stage, k4 conv to a logit map."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers = [nn.Conv2d(spec.in_channels, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        cin = w
        for i in range(1, spec.layers):
            cout = w * 2 ** min(i, 3)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.InstanceNorm2d(cout, affine=True),
                       nn.LeakyReLU(0.2, inplace=True)]
            cin = cout
        cout = w * 2 ** min(spec.layers, 3)
        layers += [nn.Conv2d(cin, cout, 4, stride=1, padding=1), nn.InstanceNorm2d(cout, affine=True),
                   nn.LeakyReLU(0.2, inplace=True), nn.Conv2d(cout, 1, 4, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)

    def forward(self, image):
        x, squeeze = _as_batch(image)
        if x.shape[1] != self.spec.in_channels:
            raise DimensionError(f"discriminator expects {self.spec.in_channels} channels, got {x.shape[1]}")
        rf = self.spec.receptive_field
        if min(x.shape[-2:]) < rf:
            raise DimensionError(f"input {tuple(x.shape[-2:])} smaller than receptive field {rf}")
        y = self.model(x)
        return y.squeeze(0) if squeeze else y


def discriminator_output_size(size: int, layers: int) -> int:
    for _ in range(layers):
        size = (size + 2 - 4) // 2 + 1
    return size - 2


# ---------------------------------------------------------------------------
# construction and forward helpers


def _build(cls, spec, seed):
    _check_spec(spec)
    gen = torch.Generator().manual_seed(int(seed))
    net = cls(spec)
    init_weights(net, gen)
    net.fingerprint = spec_fingerprint(spec)
    return net


def build_segmenter(spec: SegNetSpec = SegNetSpec(), seed: int = 0) -> SegmentationUNet:
    return _build(SegmentationUNet, spec, seed)


def build_generator(spec: GeneratorSpec = GeneratorSpec(), seed: int = 0) -> VesselGenerator:
    return _build(VesselGenerator, spec, seed)


def build_discriminator(spec: DiscriminatorSpec = DiscriminatorSpec(), seed: int = 0) -> PatchDiscriminator:
    return _build(PatchDiscriminator, spec, seed)


def build_network(spec, seed: int = 0) -> nn.Module:
    builders = {SegNetSpec: build_segmenter, GeneratorSpec: build_generator,
                DiscriminatorSpec: build_discriminator}
    return builders[type(spec)](spec, seed)


def _pixels(x):
    return x.pixels if hasattr(x, "pixels") else x


def vessel_map(net: SegmentationUNet, images: torch.Tensor, invert: bool = False) -> torch.Tensor:
    """Differentiable V(x), optionally on intensity-inverted input.

    Inversion lets light-vessel FA images pass through a segmenter trained
    on dark-vessel CF images.
    """
    return net(1 - images if invert else images)


def segment(net: SegmentationUNet, image) -> torch.Tensor:
    """Vessel probabilities for a RetinalImage or tensor, in inference mode."""
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            return net(_pixels(image))
    finally:
        net.train(was_training)


def translate(net: VesselGenerator, vessels) -> torch.Tensor:
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            return net(_pixels(vessels))
    finally:
        net.train(was_training)


def discriminate(net: PatchDiscriminator, image) -> torch.Tensor:
    with torch.no_grad():
        return net(_pixels(image))


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def parameter_digest(net: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, keyed by name."""
    h = hashlib.sha256()
    for name, t in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
