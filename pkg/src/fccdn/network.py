"""FCS, DED and FCCDN assemblies."""
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import DFM, NLFPN, PYRAMID_STRIDES, CatFuse, CatFusion, ConvBNReLU, SEResStage
from .exceptions import ConfigurationError, ShapeError

BASE_WIDTHS = (32, 64, 128, 256)


@dataclass
class NetworkConfig:
    backbone: str = "ded"  # "fcs" or "ded"
    width_multiplier: float = 1.0
    use_nl_fpn: bool = True
    use_dfm: bool = True
    use_ssl_heads: bool = True
    num_seg_classes: int = 1
    input_channels: int = 3
    base_widths: Tuple[int, ...] = BASE_WIDTHS
    stage_depths: Tuple[int, ...] = (3, 4, 6, 7)
    se_reduction: int = 16
    dfm_depth: int = 3
    nl_strides: Tuple[int, ...] = (8, 16)
    nl_max_positions: int = 4096

    def __post_init__(self):
        self.base_widths = tuple(int(w) for w in self.base_widths)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.nl_strides = tuple(int(s) for s in self.nl_strides)
        self.validate()

    @property
    def widths(self) -> List[int]:
        return [max(int(round(w * self.width_multiplier)), 1) for w in self.base_widths]

    def validate(self) -> None:
        if self.backbone not in ("fcs", "ded"):
            raise ConfigurationError(f"unknown backbone {self.backbone!r}")
        if self.width_multiplier <= 0:
            raise ConfigurationError("width_multiplier must be positive")
        if self.backbone == "fcs" and self.use_ssl_heads:
            raise ConfigurationError("segmentation heads need the dual decoder of the DED backbone")
        if self.num_seg_classes < 1 or self.input_channels < 1:
            raise ConfigurationError("num_seg_classes and input_channels must be positive")
        if len(self.base_widths) != 4 or len(self.stage_depths) != 4:
            raise ConfigurationError("four encoder stages are required")
        for w, raw in zip(self.widths, self.base_widths):
            if abs(raw * self.width_multiplier - w) > 1e-9:
                raise ConfigurationError(
                    f"width_multiplier {self.width_multiplier} gives non-integer width for {raw}"
                )
        widths = self.widths
        if any(b < a for a, b in zip(widths, widths[1:])):
            raise ConfigurationError("channel widths must be non-decreasing with stride")
        if not set(self.nl_strides) <= set(PYRAMID_STRIDES):
            raise ConfigurationError(f"nl_strides must be a subset of {PYRAMID_STRIDES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("base_widths", "stage_depths", "nl_strides"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    @classmethod
    def fccdn(cls, **overrides) -> "NetworkConfig":
        return cls(**{"backbone": "ded", "use_nl_fpn": True, "use_dfm": True,
                      "use_ssl_heads": True, **overrides})


@dataclass
class ModelOutputs:
    """Score maps at input resolution.

    ``change`` is ``(B, 1, H, W)`` in [0, 1]. ``seg1``/``seg2`` are ``(B, 1, H, W)``
    sigmoid scores, or ``(B, K, H, W)`` per-pixel class distributions.
    """

    change: torch.Tensor
    seg1: Optional[torch.Tensor] = None
    seg2: Optional[torch.Tensor] = None

    @property
    def has_seg(self) -> bool:
        return self.seg1 is not None and self.seg2 is not None

    def detach(self) -> "ModelOutputs":
        return ModelOutputs(*(None if t is None else t.detach() for t in (self.change, self.seg1, self.seg2)))


class Encoder(nn.Module):
    def __init__(self, in_ch: int, widths: Sequence[int], depths: Sequence[int], se_reduction: int):
        super().__init__()
        chans = [in_ch, *widths]
        self.stages = nn.ModuleList(
            [SEResStage(chans[i], chans[i + 1], depths[i], se_reduction) for i in range(4)]
        )

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels


class Decoder(nn.Module):
    """Top-down decoder rebuilding a pyramid of the same shapes as its input."""

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        self.center = ConvBNReLU(widths[3], widths[3])
        self.blocks = nn.ModuleList(
            [CatFuse(widths[i + 1], widths[i], widths[i], upsample_a=True) for i in range(3)]
        )

    def forward(self, levels: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        out: List[torch.Tensor] = [None] * 4  # type: ignore[list-item]
        out[3] = self.center(levels[3])
        for i in (2, 1, 0):
            out[i] = self.blocks[i](out[i + 1], levels[i])
        return out


class ChangeDecoder(nn.Module):
    def __init__(self, widths: Sequence[int]):
        super().__init__()
        self.blocks = nn.ModuleList(
            [CatFuse(widths[i + 1], widths[i], widths[i], upsample_a=True) for i in range(3)]
        )

    def forward(self, change_feats: Sequence[torch.Tensor]) -> torch.Tensor:
        x = change_feats[3]
        for i in (2, 1, 0):
            x = self.blocks[i](x, change_feats[i])
        return x


class SegHead(nn.Module):
    """1x1 conv to the class count, 2x bilinear upsampling, sigmoid or softmax."""

    def __init__(self, in_ch: int, num_classes: int = 1):
        super().__init__()
        self.num_classes = num_classes
        self.proj = nn.Conv2d(in_ch, num_classes, 1)

    def forward(self, x: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        logits = F.interpolate(self.proj(x), size=size, mode="bilinear", align_corners=False)
        if self.num_classes == 1:
            return torch.sigmoid(logits)
        return torch.softmax(logits, dim=1)


class ChangeDetectionNet(nn.Module):
    """Siamese change detection network covering the FCS/DED/FCCDN ablation lattice.

    * ``fcs``: shared encoder, per-level fusion of encoder features, change decoder.
    * ``ded``: shared encoder and shared decoder; fusion uses decoder features;
      optional shared segmentation head on each decoder stream.

    ``use_nl_fpn`` inserts the weight-shared NL-FPN on each encoder pyramid and
    ``use_dfm`` swaps concat fusion for DFM at every level.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.encoder = Encoder(cfg.input_channels, w, cfg.stage_depths, cfg.se_reduction)
        self.nl_fpn = NLFPN(w, cfg.nl_strides, cfg.nl_max_positions) if cfg.use_nl_fpn else None
        self.decoder = Decoder(w) if cfg.backbone == "ded" else None
        if cfg.use_dfm:
            self.fusion = nn.ModuleList([DFM(c, depth=cfg.dfm_depth) for c in w])
        else:
            self.fusion = nn.ModuleList([CatFusion(c) for c in w])
        self.change_decoder = ChangeDecoder(w)
        self.change_head = SegHead(w[0], 1)
        self.seg_head = SegHead(w[0], cfg.num_seg_classes) if cfg.use_ssl_heads else None

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Per-temporal pyramid used for fusion (decoder output for DED)."""
        levels = self.encoder(x)
        if self.nl_fpn is not None:
            levels = self.nl_fpn(levels)
        if self.decoder is not None:
            levels = self.decoder(levels)
        return levels

    def forward(self, t1: torch.Tensor, t2: torch.Tensor) -> ModelOutputs:
        check_input(t1, t2, self.cfg.input_channels)
        size = tuple(t1.shape[-2:])
        p1 = self.features(t1)
        p2 = self.features(t2)
        change_feats = [fuse(a, b) for fuse, a, b in zip(self.fusion, p1, p2)]
        change = self.change_head(self.change_decoder(change_feats), size)
        if self.seg_head is None:
            return ModelOutputs(change)
        return ModelOutputs(change, self.seg_head(p1[0], size), self.seg_head(p2[0], size))


def check_input(t1: torch.Tensor, t2: torch.Tensor, channels: int) -> None:
    if t1.dim() != 4 or t1.shape != t2.shape:
        raise ShapeError(f"expected two equal (B, C, H, W) tensors, got {tuple(t1.shape)} and {tuple(t2.shape)}")
    if t1.shape[1] != channels:
        raise ShapeError(f"expected {channels} input channels, got {t1.shape[1]}")
    h, w = t1.shape[-2:]
    if h % 16 or w % 16:
        raise ShapeError(f"input size {h}x{w} is not divisible by 16")


def init_weights(model: nn.Module, seed: Optional[int] = None) -> nn.Module:
    gen = None
    if seed is not None:
        gen = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return model


def build_model(cfg: NetworkConfig, seed: Optional[int] = 0) -> ChangeDetectionNet:
    return init_weights(ChangeDetectionNet(cfg), seed)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
