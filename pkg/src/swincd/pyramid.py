"""Intra- and inter-layer multi-scale feature modules.

Per-level units (selective-kernel conv, hierarchical grouped conv), the
top-down grounding transformer between adjacent pyramid levels, CBAM gates,
and the plug-and-play mixed pyramid wrapper that combines them while
preserving every level's shape.
"""

from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError


class ChannelAttention(nn.Module):
    """Channel gate: avg+max pooled descriptors through a shared MLP."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if channels < reduction:
            raise ConfigurationError(
                f"channels {channels} below reduction ratio {reduction}"
            )
        self.fc = nn.Sequential(
            nn.Conv2d(channels, channels // reduction, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels // reduction, channels, 1, bias=False),
        )

    def forward(self, x):
        avg = self.fc(F.adaptive_avg_pool2d(x, 1))
        mx = self.fc(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    """Spatial gate: channelwise avg+max maps through a 7x7 conv."""

    def __init__(self, kernel: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel, padding=kernel // 2, bias=False)

    def forward(self, x):
        avg = x.mean(dim=1, keepdim=True)
        mx = x.max(dim=1, keepdim=True).values
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


class CBAM(nn.Module):
    """Sequential channel-then-spatial multiplicative attention."""

    def __init__(self, channels: int, reduction: int = 4, spatial_kernel: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(spatial_kernel)

    def forward(self, x):
        x = x * self.channel(x)
        x = x * self.spatial(x)
        return x


class SKConv(nn.Module):
    """Selective-kernel convolution mixing a 3x3 and a 5x5 branch.

    A joint squeeze over the branch sum produces per-channel selection
    weights, softmaxed across the two branches, so the output is a convex
    per-channel combination of the branch features.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if channels < 2 * reduction:
            raise ConfigurationError(
                f"channels {channels} below twice the reduction ratio {reduction}"
            )
        self.branch3 = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )
        self.branch5 = nn.Sequential(
            nn.Conv2d(channels, channels, 5, padding=2, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )
        self.squeeze = nn.Sequential(
            nn.Linear(channels, channels // reduction),
            nn.ReLU(inplace=True),
        )
        self.select3 = nn.Linear(channels // reduction, channels)
        self.select5 = nn.Linear(channels // reduction, channels)

    def forward(self, x):
        u = self.branch3(x)
        v = self.branch5(x)
        z = self.squeeze((u + v).mean(dim=(2, 3)))  # B, C/r
        logits = torch.stack([self.select3(z), self.select5(z)], dim=1)  # B, 2, C
        weights = logits.softmax(dim=1)[..., None, None]  # B, 2, C, 1, 1
        return weights[:, 0] * u + weights[:, 1] * v

    def selection_weights(self, x):
        """The 2-way per-channel branch distribution, shape (B, 2, C)."""
        u = self.branch3(x)
        v = self.branch5(x)
        z = self.squeeze((u + v).mean(dim=(2, 3)))
        return torch.stack([self.select3(z), self.select5(z)], dim=1).softmax(dim=1)


class Res2NetConv(nn.Module):
    """Hierarchical 4-group convolution building multi-scale receptive fields.

    After a pointwise conv the channels split into four equal groups; group 1
    passes through untouched, each later group is convolved together with its
    predecessor's output, and the groups are re-concatenated and mixed by a
    final pointwise conv.
    """

    GROUPS = 4

    def __init__(self, channels: int):
        super().__init__()
        if channels % self.GROUPS != 0:
            raise ConfigurationError(
                f"channels {channels} not divisible by {self.GROUPS} groups"
            )
        width = channels // self.GROUPS
        self.conv_in = nn.Conv2d(channels, channels, 1)
        self.group_convs = nn.ModuleList(
            nn.Conv2d(width, width, 3, padding=1) for _ in range(self.GROUPS - 1)
        )
        self.conv_out = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        x = self.conv_in(x)
        parts = torch.chunk(x, self.GROUPS, dim=1)
        outs = [parts[0]]  # group 1 is an exact passthrough
        y = self.group_convs[0](parts[1])
        outs.append(y)
        for z in range(2, self.GROUPS):
            y = self.group_convs[z - 1](parts[z] + y)
            outs.append(y)
        return self.conv_out(torch.cat(outs, dim=1))


class GroundingTransformer(nn.Module):
    """Top-down cross-level attention grounding coarse semantics into a fine map.

    The coarse level (exactly half the fine extent) is projected, normalized
    and upsampled, concatenated with the projected fine level, and the result
    drives a full token-to-token attention evaluated at the fine resolution.
    """

    def __init__(self, coarse_channels: int, fine_channels: int):
        super().__init__()
        self.proj_coarse = nn.Sequential(
            nn.Conv2d(coarse_channels, fine_channels, 1),
            nn.BatchNorm2d(fine_channels),
        )
        self.proj_fine = nn.Sequential(
            nn.Conv2d(fine_channels, fine_channels, 1),
            nn.BatchNorm2d(fine_channels),
        )
        def projection():
            return nn.Sequential(
                nn.Conv2d(2 * fine_channels, fine_channels, 1),
                nn.BatchNorm2d(fine_channels),
                nn.ReLU(inplace=True),
            )
        self.to_q = projection()
        self.to_k = projection()
        self.to_v = projection()

    def forward(self, coarse, fine):
        _, _, hc, wc = coarse.shape
        b, _, hf, wf = fine.shape
        if hf != 2 * hc or wf != 2 * wc:
            raise DimensionError(
                f"coarse {hc}x{wc} is not exactly half of fine {hf}x{wf}"
            )
        up = F.interpolate(self.proj_coarse(coarse), scale_factor=2, mode="bilinear",
                           align_corners=False)
        cat = torch.cat([up, self.proj_fine(fine)], dim=1)
        q = self.to_q(cat).flatten(2).transpose(1, 2)  # B, N, C
        k = self.to_k(cat).flatten(2).transpose(1, 2)
        v = self.to_v(cat).flatten(2).transpose(1, 2)
        attn = (q @ k.transpose(1, 2)).softmax(dim=-1)  # B, N, N
        out = attn @ v  # B, N, C
        return out.transpose(1, 2).reshape(b, -1, hf, wf)


def seeded_dropout(x, p: float, training: bool,
                   generator: Optional[torch.Generator] = None):
    """Inverted dropout driven by an explicit generator when provided."""
    if not training or p <= 0.0:
        return x
    keep = 1.0 - p
    noise = torch.rand(x.shape, generator=generator, device=x.device, dtype=x.dtype)
    return x * (noise < keep).to(x.dtype) / keep


def validate_pyramid(levels: Sequence[torch.Tensor]) -> None:
    """Check the >= 2 levels and strict 2x spatial ratio invariants."""
    if len(levels) < 2:
        raise ConfigurationError(f"pyramid needs >= 2 levels, got {len(levels)}")
    for idx in range(len(levels) - 1):
        _, _, h0, w0 = levels[idx].shape
        _, _, h1, w1 = levels[idx + 1].shape
        if h0 != 2 * h1 or w0 != 2 * w1:
            raise DimensionError(
                f"level {idx + 1} extent {h1}x{w1} is not half of level "
                f"{idx} extent {h0}x{w0}"
            )


class MixedFeaturePyramid(nn.Module):
    """Plug-and-play 3-level multi-scale wrapper.

    Each level is enriched by a selective-kernel branch, a hierarchical
    grouped-conv branch, and (when a coarser level exists among the three) a
    grounding-transformer branch; the branches are concatenated at the
    level's own resolution, fused by a conv, added to the identity skip,
    gated by CBAM, and dropout-regularized.  Every output level keeps the
    exact shape of its input level.

    Args:
        channels: per-level channel counts, finest first (length 3).
        reduction: squeeze ratio shared by SK and CBAM.
        dropout: dropout probability applied after CBAM.
    """

    LEVELS = 3

    def __init__(self, channels: Sequence[int], reduction: int = 4,
                 dropout: float = 0.1):
        super().__init__()
        channels = tuple(channels)
        if len(channels) != self.LEVELS:
            raise ConfigurationError(
                f"expected {self.LEVELS} pyramid levels, got {len(channels)}"
            )
        self.channels = channels
        self.dropout = dropout
        self.sk = nn.ModuleList(SKConv(c, reduction) for c in channels)
        self.res2 = nn.ModuleList(Res2NetConv(c) for c in channels)
        # top-down interaction for adjacent pairs only; the deepest level has
        # no coarser input among the three
        self.gt = nn.ModuleList(
            GroundingTransformer(channels[i + 1], channels[i])
            for i in range(self.LEVELS - 1)
        )
        self.fuse = nn.ModuleList()
        for i, c in enumerate(channels):
            n_branches = 3 if i < self.LEVELS - 1 else 2
            self.fuse.append(nn.Sequential(
                nn.Conv2d(n_branches * c, c, 3, padding=1, bias=False),
                nn.BatchNorm2d(c),
                nn.ReLU(inplace=True),
            ))
        self.cbam = nn.ModuleList(CBAM(c, reduction) for c in channels)

    @classmethod
    def for_levels(cls, levels: Sequence[torch.Tensor], reduction: int = 4,
                   dropout: float = 0.1) -> "MixedFeaturePyramid":
        """Build a wrapper matching an existing pyramid's channel layout."""
        validate_pyramid(levels)
        if len(levels) != cls.LEVELS:
            raise ConfigurationError(
                f"expected {cls.LEVELS} pyramid levels, got {len(levels)}"
            )
        return cls([lvl.shape[1] for lvl in levels], reduction, dropout)

    def forward(self, levels: Sequence[torch.Tensor],
                generator: Optional[torch.Generator] = None) -> List[torch.Tensor]:
        if len(levels) != self.LEVELS:
            raise ConfigurationError(
                f"expected {self.LEVELS} pyramid levels, got {len(levels)}"
            )
        validate_pyramid(levels)
        for i, (lvl, c) in enumerate(zip(levels, self.channels)):
            if lvl.shape[1] != c:
                raise DimensionError(
                    f"level {i} has {lvl.shape[1]} channels, module expects {c}"
                )
        outputs = []
        for i, x in enumerate(levels):
            branches = [self.sk[i](x), self.res2[i](x)]
            if i < self.LEVELS - 1:
                branches.append(self.gt[i](levels[i + 1], x))
            fused = self.fuse[i](torch.cat(branches, dim=1)) + x
            fused = self.cbam[i](fused)
            outputs.append(
                seeded_dropout(fused, self.dropout, self.training, generator)
            )
        return outputs


def mfp_forward(module: MixedFeaturePyramid, levels: Sequence[torch.Tensor],
                generator: Optional[torch.Generator] = None) -> List[torch.Tensor]:
    """Adapter entry point for bolting the wrapper onto third-party pyramids."""
    return module(levels, generator=generator)
