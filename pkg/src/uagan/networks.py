"""Two-stream U-net generator with cross-stream attentional fusion, plus the
conditional patch discriminator.

Feature levels are indexed ``0..levels-1`` from shallow to deep; the block
below the deepest level is the bottleneck, which both encoders can share.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .phantom_data import expand_and_concat

STREAMS = ("trans", "seg")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 4
    base_channels: int = 16
    n_modalities: int = 3
    shared_depth: int = 1  # number of deepest encoder blocks common to both streams
    out_channels_trans: int = 1
    out_channels_seg: int = 2
    d_base_channels: int = 16
    d_layers: int = 4

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigurationError("levels must be >= 1")
        if self.base_channels < 1 or self.n_modalities < 0:
            raise ConfigurationError("base_channels must be >= 1 and n_modalities >= 0")
        if not 0 <= self.shared_depth <= self.levels:
            # block 0 differs in input channels between streams, so at most the
            # bottleneck plus levels 1..L-1 can be shared
            raise ConfigurationError(f"shared_depth must lie in [0, {self.levels}]")

    @property
    def in_channels_trans(self) -> int:
        return 1 + self.n_modalities

    @property
    def in_channels_seg(self) -> int:
        return 1

    def channels(self, level: int) -> int:
        """Feature channels at ``level``; ``level == levels`` is the bottleneck."""
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class VariantSpec:
    name: str = "uagan"
    attention_enabled: bool = True
    fusion_enabled: bool = True
    aux_task: str = "translation"  # translation | reconstruction | none
    bottleneck_shared: bool = True
    per_modality: bool = False  # Individual baseline: one network per modality

    def __post_init__(self):
        if self.aux_task not in ("translation", "reconstruction", "none"):
            raise ConfigurationError(f"unknown aux_task {self.aux_task!r}")
        if self.attention_enabled and not self.fusion_enabled:
            raise ConfigurationError("attention requires fusion")
        if self.aux_task == "none" and (self.fusion_enabled or self.bottleneck_shared):
            raise ConfigurationError("segmentation-only variants cannot fuse or share")

    @property
    def has_trans_stream(self) -> bool:
        return self.aux_task != "none"

    @property
    def adversarial(self) -> bool:
        return self.aux_task == "translation"

    @property
    def backward_phase(self) -> bool:
        return self.aux_task == "translation"

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: Dict[str, VariantSpec] = {
    "uagan": VariantSpec("uagan", True, True, "translation", True),
    "uagan-atten": VariantSpec("uagan-atten", False, True, "translation", True),
    "uagan-fuse": VariantSpec("uagan-fuse", False, False, "translation", True),
    "uagan-trans": VariantSpec("uagan-trans", True, True, "reconstruction", True),
    "joint": VariantSpec("joint", False, False, "none", False),
    "individual": VariantSpec("individual", False, False, "none", False, per_modality=True),
}


def get_preset(name: str) -> VariantSpec:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigurationError(
            f"unknown variant {name!r}; valid presets: {', '.join(PRESETS)}"
        ) from None


class ConvBlock(nn.Sequential):
    """Two (3x3 conv -> instance norm -> leaky ReLU 0.2) layers."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.LeakyReLU(0.2),
        )


@dataclass
class FeaturePyramid:
    stream: str
    features: List[torch.Tensor]  # F_{i,e}, shallow to deep
    bottleneck: torch.Tensor

    @property
    def levels(self) -> int:
        return len(self.features)


class Encoder(nn.Module):
    def __init__(self, in_channels: int, cfg: UNetConfig, shared: Optional[nn.ModuleList] = None):
        super().__init__()
        self.in_channels = in_channels
        n_blocks = cfg.levels + 1
        n_shared = len(shared) if shared is not None else 0
        own = []
        for i in range(n_blocks - n_shared):
            cin = in_channels if i == 0 else cfg.channels(i - 1)
            own.append(ConvBlock(cin, cfg.channels(i)))
        self.own_blocks = nn.ModuleList(own)
        # held outside the module tree so parameters() does not count them twice;
        # the owning generator registers them once
        self._shared = list(shared) if shared is not None else []

    @property
    def blocks(self) -> List[nn.Module]:
        return list(self.own_blocks) + self._shared

    def forward(self, x: torch.Tensor, stream: str) -> FeaturePyramid:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"{stream} encoder expects {self.in_channels} input channels, got shape {tuple(x.shape)}"
            )
        blocks = self.blocks
        n = len(blocks) - 1
        if x.shape[-1] % 2 ** n or x.shape[-2] % 2 ** n:
            raise ConfigurationError(f"spatial size {tuple(x.shape[-2:])} not divisible by {2 ** n}")
        feats = []
        h = x
        for block in blocks[:-1]:
            h = block(h)
            feats.append(h)
            h = F.max_pool2d(h, 2)
        return FeaturePyramid(stream, feats, blocks[-1](h))


class AttentionFusion(nn.Module):
    """Gate features from the other stream and add them to this stream's.

    ``M = sigmoid(mask_conv(F_other))`` is a single-channel map broadcast over
    channels; the output is ``F_own + M * align_conv(F_other)``. With
    ``gated=False`` there is no mask conv and the aligned features are added
    as they are.
    """

    def __init__(self, channels: int, gated: bool = True):
        super().__init__()
        self.mask_conv = nn.Conv2d(channels, 1, 1) if gated else None
        self.align_conv = nn.Conv2d(channels, channels, 1)

    def attention_map(self, f_other: torch.Tensor) -> torch.Tensor:
        if self.mask_conv is None:
            raise ConfigurationError("ungated fusion has no attention map")
        if f_other.shape[-3] != self.mask_conv.in_channels:
            raise ConfigurationError(
                f"mask_conv expects {self.mask_conv.in_channels} channels, got {f_other.shape[-3]}"
            )
        return torch.sigmoid(self.mask_conv(f_other))

    def forward(self, f_own: torch.Tensor, f_other: torch.Tensor) -> torch.Tensor:
        if f_own.shape != f_other.shape:
            raise ConfigurationError(f"fusion shape mismatch {tuple(f_own.shape)} vs {tuple(f_other.shape)}")
        if self.mask_conv is None:
            return f_own + self.align_conv(f_other)
        return f_own + self.attention_map(f_other) * self.align_conv(f_other)


def attention_map(f_other: torch.Tensor, params: AttentionFusion) -> torch.Tensor:
    return params.attention_map(f_other)


def attentional_fuse(f_own: torch.Tensor, f_other: torch.Tensor,
                     params: Optional[AttentionFusion], variant: VariantSpec) -> torch.Tensor:
    """Fuse one level's features according to the variant's ablation switches.

    Without attention and without ``params`` this is plain addition.
    """
    if not variant.fusion_enabled:
        return f_own
    if params is None:
        if variant.attention_enabled:
            raise ConfigurationError("attention enabled but no fusion parameters given")
        if f_own.shape != f_other.shape:
            raise ConfigurationError("fusion shape mismatch")
        return f_own + f_other
    return params(f_own, f_other)


class Decoder(nn.Module):
    def __init__(self, cfg: UNetConfig, out_channels: int, variant: VariantSpec):
        super().__init__()
        self.levels = cfg.levels
        self.blocks = nn.ModuleList(
            [ConvBlock(cfg.channels(i) + cfg.channels(i + 1), cfg.channels(i)) for i in range(cfg.levels)]
        )
        if variant.fusion_enabled:
            self.fusions = nn.ModuleList(
                [AttentionFusion(cfg.channels(i), gated=variant.attention_enabled) for i in range(cfg.levels)]
            )
        else:
            self.fusions = None
        self.head = nn.Conv2d(cfg.channels(0), out_channels, 1)

    def forward(self, own: FeaturePyramid, other: Optional[FeaturePyramid], variant: VariantSpec,
                return_fused: bool = False):
        if own.levels != self.levels or (other is not None and other.levels != self.levels):
            raise ConfigurationError("pyramid level mismatch")
        if variant.fusion_enabled and other is None:
            raise ConfigurationError("fusion enabled but no other-stream pyramid supplied")
        d = own.bottleneck
        fused = [None] * self.levels
        for i in reversed(range(self.levels)):
            up = F.interpolate(d, scale_factor=2, mode="nearest")
            f_other = other.features[i] if other is not None else None
            o = attentional_fuse(own.features[i], f_other,
                                 self.fusions[i] if self.fusions is not None else None, variant)
            fused[i] = o
            d = self.blocks[i](torch.cat([o, up], dim=1))
        out = self.head(d)
        return (out, fused) if return_fused else out


class TwoStreamGenerator(nn.Module):
    """Translation and segmentation U-nets with shared deepest encoder blocks.

    Segmentation-only variants (Joint, Individual) build just the seg stream.
    """

    def __init__(self, cfg: UNetConfig, variant: VariantSpec):
        super().__init__()
        self.cfg = cfg
        self.variant = variant
        n_shared = cfg.shared_depth if (variant.bottleneck_shared and variant.has_trans_stream) else 0
        if n_shared:
            first = cfg.levels + 1 - n_shared
            self.shared = nn.ModuleList(
                [ConvBlock(cfg.channels(i - 1), cfg.channels(i)) for i in range(first, cfg.levels + 1)]
            )
        else:
            self.shared = None
        self.enc_seg = Encoder(cfg.in_channels_seg, cfg, self.shared)
        self.dec_seg = Decoder(cfg, cfg.out_channels_seg, variant)
        if variant.has_trans_stream:
            self.enc_trans = Encoder(cfg.in_channels_trans, cfg, self.shared)
            self.dec_trans = Decoder(cfg, cfg.out_channels_trans, variant)
        else:
            self.enc_trans = None
            self.dec_trans = None

    def _trans_input(self, x: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        return expand_and_concat(x, label)

    def encode(self, stream: str, inp: torch.Tensor) -> FeaturePyramid:
        if stream == "trans":
            if self.enc_trans is None:
                raise ConfigurationError("variant has no translation stream")
            return self.enc_trans(inp, "trans")
        if stream == "seg":
            return self.enc_seg(inp, "seg")
        raise ConfigurationError(f"unknown stream {stream!r}")

    def decode(self, stream: str, own: FeaturePyramid, other: Optional[FeaturePyramid]) -> torch.Tensor:
        dec = self.dec_trans if stream == "trans" else self.dec_seg
        if dec is None:
            raise ConfigurationError("variant has no translation stream")
        return dec(own, other, self.variant)

    def forward(self, x_trans: torch.Tensor, label: Optional[torch.Tensor], x_seg: torch.Tensor):
        """Run both streams; returns ``(translated, seg_logits)``.

        ``x_trans`` is translated under one-hot ``label``; ``x_seg`` is
        segmented. Segmentation-only variants return ``(None, seg_logits)``.
        """
        p_seg = self.encode("seg", x_seg)
        if self.enc_trans is None:
            return None, self.decode("seg", p_seg, None)
        p_trans = self.encode("trans", self._trans_input(x_trans, label))
        return self.decode("trans", p_trans, p_seg), self.decode("seg", p_seg, p_trans)

    def translate(self, x: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        p_trans = self.encode("trans", self._trans_input(x, label))
        p_seg = self.encode("seg", x) if self.variant.fusion_enabled else None
        return self.decode("trans", p_trans, p_seg)

    def segment(self, x: torch.Tensor, label: Optional[torch.Tensor] = None) -> torch.Tensor:
        """2-channel logits for ``x``; fused variants need the source modality label."""
        p_seg = self.encode("seg", x)
        if not self.variant.fusion_enabled:
            return self.decode("seg", p_seg, None)
        if label is None:
            raise ConfigurationError("fused variants need the image's modality label to segment")
        p_trans = self.encode("trans", self._trans_input(x, label))
        return self.decode("seg", p_seg, p_trans)


class Discriminator(nn.Module):
    """Strided-conv patch critic with a global-pooled modality classifier."""

    def __init__(self, cfg: UNetConfig, in_channels: int = 1):
        super().__init__()
        layers = []
        ch = in_channels
        for i in range(cfg.d_layers):
            nxt = cfg.d_base_channels * 2 ** i
            layers += [nn.Conv2d(ch, nxt, 4, stride=2, padding=1), nn.LeakyReLU(0.01)]
            ch = nxt
        self.body = nn.Sequential(*layers)
        self.src = nn.Conv2d(ch, 1, 3, padding=1)
        self.cls = nn.Linear(ch, cfg.n_modalities)

    def forward(self, x: torch.Tensor):
        h = self.body(x)
        return self.src(h), self.cls(h.mean(dim=(2, 3)))


def count_parameters(module: Optional[nn.Module]) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())


def describe(generator: TwoStreamGenerator, discriminator: Optional[Discriminator] = None) -> Dict[str, int]:
    """Parameter counts per submodule."""
    out = {}
    for name, child in generator.named_children():
        out[f"G.{name}"] = count_parameters(child)
    out["G.total"] = count_parameters(generator)
    if discriminator is not None:
        out["D.total"] = count_parameters(discriminator)
    return out


def build_models(cfg: UNetConfig, variant: VariantSpec, seed: Optional[int] = None):
    if seed is not None:
        torch.manual_seed(seed)
    g = TwoStreamGenerator(cfg, variant)
    d = Discriminator(cfg) if variant.adversarial else None
    return g, d
