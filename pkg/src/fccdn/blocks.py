"""Building blocks: SE, SE-ResNet, concat fusion, non-local attention, NL-FPN, DFM.

All blocks are ``torch.nn.Module`` instances operating on ``(B, C, H, W)`` tensors.
Weight sharing between the two temporal streams is obtained by calling the same
module instance on both inputs.
"""
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, ShapeError

PYRAMID_STRIDES = (2, 4, 8, 16)


def conv3x3(in_ch: int, out_ch: int, stride: int = 1, bias: bool = False) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=bias)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="nearest")


def se_bottleneck(channels: int, reduction: int = 16, min_units: int = 4) -> int:
    """Hidden width of the SE excitation MLP.

    The ratio is shrunk so the bottleneck keeps at least ``min_units`` units
    (or all channels when there are fewer than that).
    """
    if channels < 1 or reduction < 1:
        raise ConfigurationError(f"invalid SE setup: channels={channels}, reduction={reduction}")
    ratio = min(reduction, max(channels // min_units, 1))
    if channels % ratio:
        raise ConfigurationError(
            f"SE block: {channels} channels not divisible by reduction ratio {ratio}"
        )
    return channels // ratio


class SEBlock(nn.Module):
    """Squeeze-and-excitation channel gate: GAP -> FC -> ReLU -> FC -> sigmoid."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = se_bottleneck(channels, reduction)
        self.channels = channels
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        squeezed = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(squeezed))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"SE block expects {self.channels} channels, got {x.shape[1]}")
        return x * self.gate(x)[:, :, None, None]


class SEResBlock(nn.Module):
    """Residual block with an SE gate on the residual branch.

    With ``downsample`` the first convolution has stride 2 and the identity
    path is projected by a strided 1x1 convolution.
    """

    def __init__(self, in_ch: int, out_ch: int, downsample: bool = False, se_reduction: int = 16):
        super().__init__()
        stride = 2 if downsample else 1
        self.downsample = downsample
        self.conv1 = conv3x3(in_ch, out_ch, stride)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = conv3x3(out_ch, out_ch)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.se = SEBlock(out_ch, se_reduction)
        if downsample or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.downsample and (x.shape[-2] % 2 or x.shape[-1] % 2):
            raise ShapeError(f"cannot halve odd spatial size {tuple(x.shape[-2:])}")
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.se(self.bn2(self.conv2(out)))
        return F.relu(out + self.shortcut(x))


class SEResStage(nn.Sequential):
    """``depth`` SE-ResNet blocks; the first one halves the resolution."""

    def __init__(self, in_ch: int, out_ch: int, depth: int = 1, se_reduction: int = 16):
        if depth < 1:
            raise ConfigurationError("stage depth must be >= 1")
        blocks = [SEResBlock(in_ch, out_ch, downsample=True, se_reduction=se_reduction)]
        blocks += [SEResBlock(out_ch, out_ch, se_reduction=se_reduction) for _ in range(depth - 1)]
        super().__init__(*blocks)


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel_size, padding=kernel_size // 2, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=False),
        )


class CatFuse(nn.Module):
    """Optional 2x upsample of ``a``, channel concat with ``b``, conv3x3-BN-ReLU.

    Used both as the bitemporal fusion block and as decoder block.
    """

    def __init__(self, a_ch: int, b_ch: int, out_ch: int, upsample_a: bool = False):
        super().__init__()
        self.upsample_a = upsample_a
        self.body = ConvBNReLU(a_ch + b_ch, out_ch)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if self.upsample_a:
            a = upsample2x(a)
        if a.shape[-2:] != b.shape[-2:]:
            raise ShapeError(
                f"cat fusion spatial mismatch: {tuple(a.shape[-2:])} vs {tuple(b.shape[-2:])}"
            )
        return self.body(torch.cat([a, b], dim=1))


def similarity_matrix(x: torch.Tensor) -> torch.Tensor:
    """Row-softmaxed self-similarity of unit-normalised pixel features, ``(B, HW, HW)``."""
    flat = F.normalize(x.flatten(2), dim=1)  # (B, C, HW)
    return torch.softmax(flat.transpose(1, 2) @ flat, dim=-1)


class NLBlock(nn.Module):
    """Non-local block without query/key projections.

    The similarity between positions is the dot product of the (unit length)
    features themselves. A 1x1 value projection is aggregated with it and a
    final 1x1 convolution gives a weight map that multiplies the input.
    """

    def __init__(self, channels: int, max_positions: int = 4096):
        super().__init__()
        inner = max(channels // 2, 1)
        self.max_positions = max_positions
        self.value = nn.Conv2d(channels, inner, 1)
        self.weight = nn.Conv2d(inner, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        if h * w > self.max_positions:
            raise ConfigurationError(
                f"NL-block on {h}x{w} needs a {h * w}x{h * w} similarity matrix "
                f"(cap {self.max_positions} positions); apply NL-blocks only at the "
                "stride-16 level or tile the input"
            )
        sim = similarity_matrix(x)
        v = self.value(x).flatten(2).transpose(1, 2)  # (B, HW, C')
        agg = (sim @ v).transpose(1, 2).reshape(b, -1, h, w)
        return self.weight(agg) * x


class NLFPN(nn.Module):
    """FPN top-down path with non-local enhancement, residual output.

    Six 3x3 convolutions make up the upsampling stage: for each of the three
    top-down steps one convolution after upsampling and one producing the
    enhancement of the level. Output level ``k`` is ``x_k + enhancement_k``.
    """

    def __init__(
        self,
        channels: Sequence[int],
        nl_strides: Sequence[int] = (8, 16),
        max_positions: int = 4096,
    ):
        super().__init__()
        if len(channels) != 4:
            raise ConfigurationError("NL-FPN needs four pyramid levels")
        self.channels = list(channels)
        self.nl_strides = tuple(nl_strides)
        self.nl = nn.ModuleDict(
            {
                str(s): NLBlock(channels[i], max_positions)
                for i, s in enumerate(PYRAMID_STRIDES)
                if s in self.nl_strides
            }
        )
        # index i produces level i (0..2) from level i+1
        self.up_convs = nn.ModuleList(
            [nn.Sequential(conv3x3(channels[i + 1], channels[i]), nn.BatchNorm2d(channels[i]), nn.ReLU())
             for i in range(3)]
        )
        self.out_convs = nn.ModuleList(
            [nn.Sequential(conv3x3(channels[i], channels[i]), nn.BatchNorm2d(channels[i]))
             for i in range(3)]
        )

    def _nl(self, level: int, x: torch.Tensor) -> Optional[torch.Tensor]:
        block = self.nl[str(PYRAMID_STRIDES[level])] if str(PYRAMID_STRIDES[level]) in self.nl else None
        return None if block is None else block(x)

    def forward(self, pyramid: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        if len(pyramid) != 4:
            raise ShapeError(f"NL-FPN expects a four-level pyramid, got {len(pyramid)} levels")
        for x, ch in zip(pyramid, self.channels):
            if x.shape[1] != ch:
                raise ShapeError(f"NL-FPN level has {x.shape[1]} channels, expected {ch}")
        out: List[Optional[torch.Tensor]] = [None] * 4
        top = pyramid[3]
        enh = self._nl(3, top)
        out[3] = top if enh is None else top + enh
        for i in (2, 1, 0):
            merged = pyramid[i] + self.up_convs[i](upsample2x(out[i + 1]))
            enh = self._nl(i, merged)
            if enh is not None:
                merged = merged + enh
            out[i] = pyramid[i] + self.out_convs[i](merged)
        return out  # type: ignore[return-value]


class DenseStream(nn.Module):
    """Densely connected 3x3 convolutions without normalisation.

    Each convolution sees the concatenation of the input and all previous
    outputs. Returns the list of produced features.
    """

    def __init__(self, channels: int, depth: int = 3):
        super().__init__()
        self.convs = nn.ModuleList(
            [nn.Conv2d(channels * (i + 1), channels, 3, padding=1) for i in range(depth)]
        )

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = [x]
        for conv in self.convs:
            feats.append(F.relu(conv(torch.cat(feats, dim=1))))
        return feats[1:]


class DFM(nn.Module):
    """Dense fusion module with a sum branch and an absolute-difference branch.

    Each branch runs one weight-shared dense stream on both inputs; the stream
    features are summed (sum branch) or absolutely differenced (difference
    branch) and accumulated. A single conv3x3-BN-ReLU fuses both branches.
    The output is exactly symmetric in its two inputs.
    """

    def __init__(self, channels: int, out_ch: Optional[int] = None, depth: int = 3):
        super().__init__()
        self.sum_stream = DenseStream(channels, depth)
        self.diff_stream = DenseStream(channels, depth)
        self.fuse = ConvBNReLU(2 * channels, out_ch or channels)

    def branches(self, f1: torch.Tensor, f2: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if f1.shape != f2.shape:
            raise ShapeError(f"DFM inputs differ in shape: {tuple(f1.shape)} vs {tuple(f2.shape)}")
        s1, s2 = self.sum_stream(f1), self.sum_stream(f2)
        d1, d2 = self.diff_stream(f1), self.diff_stream(f2)
        summed = sum(a + b for a, b in zip(s1, s2))
        diffed = sum(torch.abs(a - b) for a, b in zip(d1, d2))
        return summed, diffed

    def forward(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        summed, diffed = self.branches(f1, f2)
        return self.fuse(torch.cat([summed, diffed], dim=1))


class CatFusion(nn.Module):
    """Bitemporal fusion by concatenation (the FCS/DED default)."""

    def __init__(self, channels: int, out_ch: Optional[int] = None):
        super().__init__()
        self.block = CatFuse(channels, channels, out_ch or channels)

    def forward(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        return self.block(f1, f2)
