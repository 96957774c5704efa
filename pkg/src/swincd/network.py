"""The compounded dense change-detection network.

A six-channel early fusion of the image pair feeds a conv stem and a
four-stage Swin V2 backbone column; the mixed pyramid refines the first
three backbone levels; a dense triangular grid of Swin nodes and feature
fusion nodes sweeps column by column; a full-resolution conv row gathers the
finest fusion features; CBAM plus a pointwise head emit the change map with
four deep-supervision taps.  The siamese CNN branch supplies the per-image
encoder levels consumed by every fusion node.
"""

import math
from dataclasses import dataclass, field, asdict
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import (PatchEmbed, PatchMerge, SwinStage, TokenGrid,
                        map_to_tokens, tokens_to_map)
from .branch import (CnnBranch, DESK_ENCODER_WIDTHS, PAPER_ENCODER_WIDTHS)
from .errors import (CheckpointVersionError, ConfigurationError,
                     DimensionError)
from .pyramid import CBAM, MixedFeaturePyramid

CHECKPOINT_VERSION = 1

# Depth profiles over the U-path [S10, S20, S30, S40, S31, S22, S13].
ALLOWED_DEPTH_PROFILES = (
    (2, 2, 2, 2, 2, 2, 2),
    (2, 2, 6, 2, 6, 2, 2),
    (2, 2, 18, 2, 18, 2, 2),
)
# Off-path grid nodes always run a single block pair.
OFF_PATH_DEPTH = 2

BRANCH_MODES = ("unsupervised", "supervised", "self-supervised")

# Typical changed-pixel fraction; sigmoid heads start at this prior so early
# steps are not spent recalibrating the output bias.
CHANGE_PRIOR = 0.147


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Conv2d):
        nn.init.kaiming_normal_(module.weight, mode="fan_out",
                                nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


@dataclass(frozen=True, order=True)
class GridIndex:
    """A (row, column) grid coordinate; only i >= 1, j >= 0, i + j <= 4 exist."""

    i: int
    j: int

    def __post_init__(self):
        if not (1 <= self.i <= 4 and 0 <= self.j <= 3 and self.i + self.j <= 4):
            raise ConfigurationError(
                f"grid index (i={self.i}, j={self.j}) is not admissible"
            )


def admissible_grid_indices() -> Tuple[GridIndex, ...]:
    """All ten admissible grid coordinates, column-major."""
    return tuple(
        GridIndex(i, j) for j in range(4) for i in range(1, 5 - j)
    )


@dataclass
class ModelConfig:
    """Everything needed to rebuild the network.

    ``depths`` covers the U-path [S10, S20, S30, S40, S31, S22, S13]; the
    remaining grid nodes always use a single block pair.  ``scale`` presets
    select the published widths (``paper``) or the small fully-testable
    widths (``desk``).
    """

    embed_dims: Tuple[int, int, int, int] = (16, 32, 64, 128)
    depths: Tuple[int, ...] = (2, 2, 2, 2, 2, 2, 2)
    num_heads: Tuple[int, int, int, int] = (2, 4, 8, 16)
    window: int = 4
    patch: int = 4
    stem_channels: int = 16
    encoder_widths: Tuple[int, ...] = DESK_ENCODER_WIDTHS
    cpb_hidden: int = 64
    reduction: int = 4
    mlp_ratio: float = 4.0
    mfp_enabled: bool = True
    mfp_dropout: float = 0.1
    branch_mode: str = "self-supervised"

    def __post_init__(self):
        self.embed_dims = tuple(self.embed_dims)
        self.depths = tuple(self.depths)
        self.num_heads = tuple(self.num_heads)
        self.encoder_widths = tuple(self.encoder_widths)
        if self.depths not in ALLOWED_DEPTH_PROFILES:
            raise ConfigurationError(
                f"depth profile {self.depths} not one of {ALLOWED_DEPTH_PROFILES}"
            )
        if len(self.embed_dims) != 4 or len(self.num_heads) != 4:
            raise ConfigurationError("embed_dims and num_heads must have 4 entries")
        for d, h in zip(self.embed_dims, self.num_heads):
            if d % h != 0:
                raise ConfigurationError(f"dim {d} not divisible by heads {h}")
        for a, b in zip(self.embed_dims, self.embed_dims[1:]):
            if b != 2 * a:
                raise ConfigurationError(
                    f"embed dims must double per row, got {self.embed_dims}"
                )
        if self.branch_mode not in BRANCH_MODES:
            raise ConfigurationError(
                f"branch_mode {self.branch_mode!r} not one of {BRANCH_MODES}"
            )

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        defaults = dict(
            embed_dims=(96, 192, 384, 768),
            depths=(2, 2, 6, 2, 6, 2, 2),
            num_heads=(3, 6, 12, 24),
            window=8,
            stem_channels=32,
            encoder_widths=PAPER_ENCODER_WIDTHS,
            cpb_hidden=512,
            reduction=16,
        )
        defaults.update(overrides)
        return cls(**defaults)

    def node_depth(self, idx: GridIndex) -> int:
        """Block count for a grid node: U-path entries or the fixed pair."""
        if idx.j == 0:
            return self.depths[idx.i - 1]
        u_path = {GridIndex(3, 1): 4, GridIndex(2, 2): 5, GridIndex(1, 3): 6}
        if idx in u_path:
            return self.depths[u_path[idx]]
        return OFF_PATH_DEPTH

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class GridState:
    """All node activations of one forward pass, keyed by grid coordinate."""

    s_prime: Dict[GridIndex, torch.Tensor]
    s: Dict[GridIndex, torch.Tensor]
    ff: Dict[GridIndex, torch.Tensor]
    c: Dict[int, torch.Tensor]


@dataclass
class NetworkOutputs:
    """Final change map, deep-supervision maps and the two branch maps."""

    cm: torch.Tensor
    ds: Tuple[torch.Tensor, ...]
    pm1: Optional[torch.Tensor] = None
    pm2: Optional[torch.Tensor] = None


class DoubleConv(nn.Module):
    """Two stacked conv3x3 + BN + ReLU units; spatial size preserved."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class FeatureFusion(nn.Module):
    """Fuse a grid feature with the two branch encoder levels.

    The encoder levels are projected pointwise to the grid width, the three
    maps are concatenated, mixed by conv+BN+ReLU and gated by CBAM; output
    channels equal the grid feature's channels.
    """

    def __init__(self, grid_channels: int, branch_channels: int,
                 reduction: int = 4):
        super().__init__()
        self.proj1 = nn.Conv2d(branch_channels, grid_channels, 1)
        self.proj2 = nn.Conv2d(branch_channels, grid_channels, 1)
        self.fuse = nn.Sequential(
            nn.Conv2d(3 * grid_channels, grid_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(grid_channels),
            nn.ReLU(inplace=True),
        )
        self.cbam = CBAM(grid_channels, reduction)

    def forward(self, s, v1, v2):
        if s.shape[2:] != v1.shape[2:] or s.shape[2:] != v2.shape[2:]:
            raise DimensionError(
                f"fusion inputs misaligned: s {tuple(s.shape[2:])}, "
                f"v1 {tuple(v1.shape[2:])}, v2 {tuple(v2.shape[2:])}"
            )
        x = torch.cat([s, self.proj1(v1), self.proj2(v2)], dim=1)
        return self.cbam(self.fuse(x))


class _HalvingUp(nn.Module):
    """2x bilinear upsampling followed by a channel-halving pointwise conv."""

    def __init__(self, in_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, in_ch // 2, 1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv(x)


class _GridSwinNode(nn.Module):
    """Channel-aligning conv plus a Swin stage at one grid coordinate."""

    def __init__(self, dim: int, n_inputs: int, depth: int, num_heads: int,
                 window: int, mlp_ratio: float, cpb_hidden: int):
        super().__init__()
        self.align = nn.Conv2d(n_inputs * dim, dim, 1)
        self.stage = SwinStage(dim, depth, num_heads, window, mlp_ratio,
                               cpb_hidden)

    def forward(self, inputs):
        x = self.align(torch.cat(inputs, dim=1))
        return tokens_to_map(self.stage(map_to_tokens(x)))


def _at_node(idx: GridIndex):
    """Decorator-ish helper: re-raise dimension errors with grid coordinates."""
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, DimensionError):
                raise DimensionError(
                    f"at grid node (i={idx.i}, j={idx.j}): {exc}"
                ) from exc
            return False
    return _Ctx()


class DenseSwinNet(nn.Module):
    """End-to-end change-detection network over the dense grid."""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        dims = cfg.embed_dims
        c0 = cfg.stem_channels

        self.branch = CnnBranch(in_chans=3, widths=cfg.encoder_widths)
        branch_levels = self.branch.encoder.level_channels

        # column 0: stem + backbone
        self.stem = DoubleConv(6, c0)
        self.patch_embed = PatchEmbed(c0, dims[0], cfg.patch)
        self.stages = nn.ModuleList(
            SwinStage(dims[i], cfg.depths[i], cfg.num_heads[i], cfg.window,
                      cfg.mlp_ratio, cfg.cpb_hidden)
            for i in range(4)
        )
        self.merges = nn.ModuleList(PatchMerge(dims[i]) for i in range(3))

        self.mfp = (MixedFeaturePyramid(dims[:3], cfg.reduction, cfg.mfp_dropout)
                    if cfg.mfp_enabled else None)

        # dense grid nodes for columns 1..3
        self.grid_nodes = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        for idx in admissible_grid_indices():
            if idx.j == 0:
                continue
            dim = dims[idx.i - 1]
            self.grid_nodes[self._key(idx)] = _GridSwinNode(
                dim, idx.j + 1, cfg.node_depth(idx), cfg.num_heads[idx.i - 1],
                cfg.window, cfg.mlp_ratio, cfg.cpb_hidden,
            )
            self.ups[self._key(idx)] = _HalvingUp(dims[idx.i])

        # one fusion node per admissible coordinate
        self.fusions = nn.ModuleDict({
            self._key(idx): FeatureFusion(dims[idx.i - 1],
                                          branch_levels[idx.i - 1],
                                          cfg.reduction)
            for idx in admissible_grid_indices()
        })

        # full-resolution conv row and heads
        self.c_row = nn.ModuleList(
            DoubleConv(j * c0 + dims[0], c0) for j in range(1, 5)
        )
        self.head_cbam = CBAM(4 * c0, cfg.reduction)
        self.head = nn.Conv2d(4 * c0, 1, 1)
        self.ds_heads = nn.ModuleList(nn.Conv2d(c0, 1, 1) for _ in range(4))

    @staticmethod
    def _key(idx: GridIndex) -> str:
        return f"s{idx.i}{idx.j}"

    def grid_indices(self) -> Tuple[GridIndex, ...]:
        return admissible_grid_indices()

    def _check_pair(self, img1: torch.Tensor, img2: torch.Tensor) -> None:
        if img1.shape != img2.shape:
            raise DimensionError(
                f"image shapes differ: {tuple(img1.shape)} vs {tuple(img2.shape)}"
            )
        if img1.dim() != 4 or img1.shape[1] != 3:
            raise DimensionError(
                f"expected (B, 3, H, W) images, got {tuple(img1.shape)}"
            )
        _, _, h, w = img1.shape
        if h % 32 != 0:
            raise DimensionError(f"height {h} not divisible by 32")
        if w % 32 != 0:
            raise DimensionError(f"width {w} not divisible by 32")

    def backbone_column(self, img1: torch.Tensor, img2: torch.Tensor):
        """Early fusion stem plus the four raw backbone levels."""
        self._check_pair(img1, img2)
        c00 = self.stem(torch.cat([img1, img2], dim=1))
        grid = self.patch_embed(c00)
        s_prime = {}
        for i in range(4):
            grid = self.stages[i](grid)
            s_prime[GridIndex(i + 1, 0)] = tokens_to_map(grid)
            if i < 3:
                grid = self.merges[i](grid)
        return c00, s_prime

    def forward(self, img1: torch.Tensor, img2: torch.Tensor,
                generator: Optional[torch.Generator] = None,
                return_state: bool = False):
        f1, f2, pm1, pm2 = self.branch(img1, img2)
        c00, s_prime = self.backbone_column(img1, img2)

        # pyramid refinement of rows 1..3; row 4 passes through unchanged
        s: Dict[GridIndex, torch.Tensor] = {}
        col0 = [s_prime[GridIndex(i, 0)] for i in (1, 2, 3)]
        if self.mfp is not None:
            refined = self.mfp(col0, generator=generator)
        else:
            refined = col0
        for i, feat in zip((1, 2, 3), refined):
            s[GridIndex(i, 0)] = feat
        s[GridIndex(4, 0)] = s_prime[GridIndex(4, 0)]

        # dense sweep: compute Swin nodes per column, then the column's
        # fusion nodes; every fusion feature is consumed exactly once by
        # the next column (or by the conv row when i = 1)
        ff: Dict[GridIndex, torch.Tensor] = {}
        for j in range(4):
            for i in range(1, 5 - j):
                idx = GridIndex(i, j)
                if j > 0:
                    with _at_node(idx):
                        below = ff[GridIndex(i + 1, j - 1)]
                        inputs = [s[GridIndex(i, jj)] for jj in range(j)]
                        inputs.append(self.ups[self._key(idx)](below))
                        s[idx] = self.grid_nodes[self._key(idx)](inputs)
                with _at_node(idx):
                    ff[idx] = self.fusions[self._key(idx)](
                        s[idx], f1.levels[i - 1], f2.levels[i - 1]
                    )

        # full-resolution conv row
        c: Dict[int, torch.Tensor] = {0: c00}
        full = c00.shape[2:]
        for j in range(1, 5):
            fine = ff[GridIndex(1, j - 1)]
            fine = F.interpolate(fine, size=full, mode="bilinear",
                                 align_corners=False)
            inputs = [c[jj] for jj in range(j)] + [fine]
            c[j] = self.c_row[j - 1](torch.cat(inputs, dim=1))

        stacked = torch.cat([c[j] for j in range(1, 5)], dim=1)
        cm = torch.sigmoid(self.head(self.head_cbam(stacked)))
        ds = tuple(torch.sigmoid(h(c[j + 1])) for j, h in enumerate(self.ds_heads))
        outputs = NetworkOutputs(cm=cm, ds=ds, pm1=pm1, pm2=pm2)
        if return_state:
            return outputs, GridState(s_prime=s_prime, s=s, ff=ff, c=c)
        return outputs


def save_checkpoint(path, model: DenseSwinNet, extra: Optional[dict] = None) -> None:
    """Write a versioned container of parameters plus the config echo."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, map_location="cpu"):
    """Rebuild the model from a checkpoint; returns (model, payload)."""
    payload = torch.load(path, map_location=map_location, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {version!r} unsupported (expected "
            f"{CHECKPOINT_VERSION})"
        )
    try:
        config = ModelConfig.from_dict(payload["model_config"])
    except (KeyError, TypeError, ConfigurationError) as exc:
        raise CheckpointVersionError(f"invalid model config in checkpoint: {exc}")
    model = DenseSwinNet(config)
    model.load_state_dict(payload["state_dict"])
    return model, payload
