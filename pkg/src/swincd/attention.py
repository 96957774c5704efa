"""Swin V2 transformer primitives.

Windowed multi-head attention with scaled cosine similarity logits and a
log-spaced continuous position bias, post-normalized block pairs
(plain + shifted window), patch embedding and patch merging.  These are the
building blocks from which the dense main network assembles its backbone
and grid nodes.
"""

import math
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError

# Additive logit penalty for token pairs that wrap across the image border
# after a cyclic shift.
SHIFT_MASK_VALUE = -100.0

# Stabilizer added to each row norm in the cosine similarity.
COSINE_EPS = 1e-6

# 1/r is learned in log space, initialized to ln(10) and clamped so that
# 1/r never exceeds 100.
LOG_SCALE_INIT = math.log(10.0)
LOG_SCALE_MAX = math.log(100.0)


class TokenGrid(NamedTuple):
    """A [B, N, C] token tensor plus the 2-D extents it was flattened from."""

    data: torch.Tensor
    height: int
    width: int

    def validate(self) -> "TokenGrid":
        b, n, _ = self.data.shape
        if n != self.height * self.width:
            raise DimensionError(
                f"token count {n} does not match grid {self.height}x{self.width}"
            )
        return self


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """Split a (B, C, H, W) feature map into non-overlapping token windows.

    Returns (B * H/window * W/window, window*window, C); tokens are row-major
    within each window.  The rearrangement is lossless.
    """
    b, c, h, w = x.shape
    if h % window != 0:
        raise DimensionError(f"height {h} not divisible by window {window}")
    if w % window != 0:
        raise DimensionError(f"width {w} not divisible by window {window}")
    x = x.view(b, c, h // window, window, w // window, window)
    windows = x.permute(0, 2, 4, 3, 5, 1).reshape(-1, window * window, c)
    return windows


def window_reverse(windows: torch.Tensor, window: int, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`; returns (B, C, H, W)."""
    if height % window != 0:
        raise DimensionError(f"height {height} not divisible by window {window}")
    if width % window != 0:
        raise DimensionError(f"width {width} not divisible by window {window}")
    n_windows = (height // window) * (width // window)
    if windows.shape[0] % n_windows != 0:
        raise DimensionError(
            f"window batch {windows.shape[0]} inconsistent with "
            f"{height}x{width} grid of window {window}"
        )
    if windows.shape[1] != window * window:
        raise DimensionError(
            f"window token count {windows.shape[1]} != window^2 = {window * window}"
        )
    b = windows.shape[0] // n_windows
    c = windows.shape[2]
    x = windows.view(b, height // window, width // window, window, window, c)
    x = x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, height, width)
    return x


def log_spaced_coords(dx: float, dy: float) -> tuple:
    """Map a linear relative offset to log-spaced coordinates.

    Each component becomes sign(d) * ln(1 + |d|); an odd function that
    compresses large offsets.
    """
    fx = math.copysign(math.log1p(abs(dx)), dx) if dx != 0 else 0.0
    fy = math.copysign(math.log1p(abs(dy)), dy) if dy != 0 else 0.0
    return fx, fy


def _log_coord_table(window: int, device, dtype) -> torch.Tensor:
    """All (2*window-1)^2 relative offsets in log space, shape (T, 2)."""
    rng = torch.arange(-(window - 1), window, device=device, dtype=dtype)
    dy, dx = torch.meshgrid(rng, rng, indexing="ij")
    coords = torch.stack([dx, dy], dim=-1).reshape(-1, 2)  # (2w-1)^2, 2
    return torch.sign(coords) * torch.log1p(coords.abs())


def _relative_index(window: int, device) -> torch.Tensor:
    """Index into the offset table for every token pair, shape (w^2, w^2)."""
    rng = torch.arange(window, device=device)
    gy, gx = torch.meshgrid(rng, rng, indexing="ij")
    flat = torch.stack([gx.flatten(), gy.flatten()])  # 2, w^2
    rel = flat[:, :, None] - flat[:, None, :]  # 2, w^2, w^2 (dx, dy)
    rel = rel + (window - 1)  # shift to start from 0
    return rel[1] * (2 * window - 1) + rel[0]


class PositionBiasNet(nn.Module):
    """2-layer MLP mapping log-spaced relative offsets to per-head biases.

    Input is the 2-vector (log dx, log dy); output is one bias per head.
    The offset table itself is a pure function of window size and is built
    on demand, so one net serves any window.
    """

    def __init__(self, num_heads: int, hidden: int = 64):
        super().__init__()
        self.num_heads = num_heads
        self.hidden = hidden
        self.mlp = nn.Sequential(
            nn.Linear(2, hidden, bias=True),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, num_heads, bias=False),
        )

    def bias_table(self, window: int) -> torch.Tensor:
        """Bias for every relative offset, shape ((2w-1)^2, heads)."""
        p = next(self.mlp.parameters())
        coords = _log_coord_table(window, p.device, p.dtype)
        return self.mlp(coords)

    def forward(self, window: int) -> torch.Tensor:
        """Per-token-pair bias matrix, shape (w^2, w^2, heads)."""
        table = self.bias_table(window)  # (2w-1)^2, h
        index = _relative_index(window, table.device)
        n = window * window
        return table[index.reshape(-1)].reshape(n, n, self.num_heads)


def position_bias(net: PositionBiasNet, window: int) -> torch.Tensor:
    """Gathered (w^2, w^2, heads) bias matrix; differentiable in net's weights."""
    return net(window)


class CosineScale(nn.Module):
    """Learnable per-head 1/r for the cosine logits, stored in log space."""

    def __init__(self, num_heads: int):
        super().__init__()
        self.log_inv_r = nn.Parameter(torch.full((num_heads,), LOG_SCALE_INIT))

    def forward(self) -> torch.Tensor:
        return torch.clamp(self.log_inv_r, max=LOG_SCALE_MAX).exp()


class ScaledCosineAttention(nn.Module):
    """Multi-head attention with cosine-similarity logits.

    Per head: logits = cos(q_m, k_n) / r + bias_mn, softmax over n, then the
    weighted sum of values; heads are concatenated and linearly projected.
    Row norms in the cosine are stabilized with a small epsilon so zero rows
    stay finite.

    Args:
        dim: embedding width; must be divisible by num_heads.
        num_heads: number of attention heads (head_dim = dim / num_heads).
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise DimensionError(f"dim {dim} not divisible by heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        # q/k projections are pure matrices so positive rescaling of the
        # inputs propagates to the per-head vectors and cancels in cos()
        self.proj_q = nn.Linear(dim, dim, bias=False)
        self.proj_k = nn.Linear(dim, dim, bias=False)
        self.proj_v = nn.Linear(dim, dim, bias=True)
        self.proj_out = nn.Linear(dim, dim, bias=True)
        self.scale = CosineScale(num_heads)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        q: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        bias: Optional[torch.Tensor] = None,
        mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Attend q over (k, v); all three are (B, N, dim) token batches.

        bias: optional (N, N, heads) additive logit bias.
        mask: optional (nW, N, N) additive mask; B must be a multiple of nW.
        """
        if q.shape[1] != k.shape[1] or k.shape != v.shape:
            raise DimensionError(
                f"token counts differ: q {tuple(q.shape)}, k {tuple(k.shape)}, "
                f"v {tuple(v.shape)}"
            )
        b, n, _ = q.shape
        qh = self._split_heads(self.proj_q(q))  # B, h, N, d
        kh = self._split_heads(self.proj_k(k))
        vh = self._split_heads(self.proj_v(v))

        # clamping (not adding) eps keeps cos() exactly invariant under
        # positive rescaling while still taming zero rows
        qh = qh / qh.norm(dim=-1, keepdim=True).clamp_min(COSINE_EPS)
        kh = kh / kh.norm(dim=-1, keepdim=True).clamp_min(COSINE_EPS)
        logits = qh @ kh.transpose(-2, -1)  # B, h, N, N; entries in [-1, 1]
        logits = logits * self.scale().view(1, -1, 1, 1)
        if bias is not None:
            logits = logits + bias.permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            n_win = mask.shape[0]
            if b % n_win != 0:
                raise DimensionError(
                    f"batch {b} not a multiple of mask windows {n_win}"
                )
            logits = logits.view(b // n_win, n_win, self.num_heads, n, n)
            logits = logits + mask.unsqueeze(0).unsqueeze(2)
            logits = logits.view(b, self.num_heads, n, n)

        attn = logits.softmax(dim=-1)
        out = attn @ vh  # B, h, N, d
        out = out.transpose(1, 2).reshape(b, n, self.dim)
        return self.proj_out(out)


def shifted_window_mask(
    height: int, width: int, window: int, shift: int, device=None
) -> torch.Tensor:
    """Additive (nW, N, N) mask blocking attention across wrapped regions.

    Token pairs that come from different pre-shift regions receive
    SHIFT_MASK_VALUE before the softmax.
    """
    img = torch.zeros(1, 1, height, width, device=device)
    h_slices = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    w_slices = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    cnt = 0
    for hs in h_slices:
        for ws in w_slices:
            img[:, :, hs, ws] = cnt
            cnt += 1
    regions = window_partition(img, window).squeeze(-1)  # nW, N
    diff = regions.unsqueeze(1) - regions.unsqueeze(2)
    return torch.where(diff == 0, 0.0, SHIFT_MASK_VALUE)


class _WindowedAttention(nn.Module):
    """One attention sub-layer: window split, cosine attention, window merge."""

    def __init__(self, dim: int, num_heads: int, window: int, shift: bool,
                 cpb_hidden: int = 64):
        super().__init__()
        self.window = window
        self.shifted = shift
        self.attn = ScaledCosineAttention(dim, num_heads)
        self.bias_net = PositionBiasNet(num_heads, hidden=cpb_hidden)

    def forward(self, grid: TokenGrid) -> torch.Tensor:
        x, h, w = grid.data, grid.height, grid.width
        b, n, c = x.shape
        win = effective_window(self.window, h, w)
        shift = win // 2 if (self.shifted and (h > win or w > win)) else 0

        fmap = x.transpose(1, 2).reshape(b, c, h, w)
        if shift > 0:
            fmap = torch.roll(fmap, shifts=(-shift, -shift), dims=(2, 3))
            mask = shifted_window_mask(h, w, win, shift, device=x.device)
            mask = mask.to(x.dtype)
        else:
            mask = None
        windows = window_partition(fmap, win)  # B*nW, win^2, C
        bias = self.bias_net(win).to(x.dtype)
        out = self.attn(windows, windows, windows, bias=bias, mask=mask)
        fmap = window_reverse(out, win, h, w)
        if shift > 0:
            fmap = torch.roll(fmap, shifts=(shift, shift), dims=(2, 3))
        return fmap.reshape(b, c, n).transpose(1, 2)


def effective_window(window: int, height: int, width: int) -> int:
    """Largest window <= the configured one that tiles the grid exactly."""
    win = min(window, height, width)
    while win > 1 and (height % win != 0 or width % win != 0):
        win -= 1
    return win


class _Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinV2BlockPair(nn.Module):
    """The plain/shifted window attention pair.

    Four residual sub-layers: windowed attention on the normalized input plus
    residual, MLP plus residual, then the same two with the cyclically
    shifted windows.  Output shape always equals input shape.

    Args:
        dim: token embedding width.
        num_heads: attention heads per sub-layer.
        window: window side length in tokens (shrunk if the grid is smaller).
        mlp_ratio: hidden width multiplier of the MLPs.
    """

    def __init__(self, dim: int, num_heads: int, window: int,
                 mlp_ratio: float = 4.0, cpb_hidden: int = 64):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm_att1 = nn.LayerNorm(dim)
        self.wmsa = _WindowedAttention(dim, num_heads, window, shift=False,
                                       cpb_hidden=cpb_hidden)
        self.norm_mlp1 = nn.LayerNorm(dim)
        self.mlp1 = _Mlp(dim, hidden)
        self.norm_att2 = nn.LayerNorm(dim)
        self.swmsa = _WindowedAttention(dim, num_heads, window, shift=True,
                                        cpb_hidden=cpb_hidden)
        self.norm_mlp2 = nn.LayerNorm(dim)
        self.mlp2 = _Mlp(dim, hidden)

    def forward(self, grid: TokenGrid) -> TokenGrid:
        x, h, w = grid.data, grid.height, grid.width
        x = self.wmsa(TokenGrid(self.norm_att1(x), h, w)) + x
        x = self.mlp1(self.norm_mlp1(x)) + x
        x = self.swmsa(TokenGrid(self.norm_att2(x), h, w)) + x
        x = self.mlp2(self.norm_mlp2(x)) + x
        return TokenGrid(x, h, w)


class SwinStage(nn.Module):
    """A stack of block pairs at one resolution; depth counts single blocks."""

    def __init__(self, dim: int, depth: int, num_heads: int, window: int,
                 mlp_ratio: float = 4.0, cpb_hidden: int = 64):
        super().__init__()
        if depth % 2 != 0:
            raise DimensionError(f"stage depth {depth} must be even")
        self.pairs = nn.ModuleList(
            SwinV2BlockPair(dim, num_heads, window, mlp_ratio, cpb_hidden)
            for _ in range(depth // 2)
        )

    def forward(self, grid: TokenGrid) -> TokenGrid:
        for pair in self.pairs:
            grid = pair(grid)
        return grid


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection of a (B, C, H, W) map to tokens."""

    def __init__(self, in_chans: int, dim: int, patch: int = 4):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(in_chans, dim, kernel_size=patch, stride=patch)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> TokenGrid:
        b, c, h, w = x.shape
        if h % self.patch != 0:
            raise DimensionError(f"height {h} not divisible by patch {self.patch}")
        if w % self.patch != 0:
            raise DimensionError(f"width {w} not divisible by patch {self.patch}")
        tokens = self.proj(x).flatten(2).transpose(1, 2)  # B, N, dim
        return TokenGrid(self.norm(tokens), h // self.patch, w // self.patch)


class PatchMerge(nn.Module):
    """2x spatial downsampling by 2x2 neighborhood concat + linear reduction."""

    def __init__(self, dim: int):
        super().__init__()
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)
        self.norm = nn.LayerNorm(2 * dim)

    def forward(self, grid: TokenGrid) -> TokenGrid:
        x, h, w = grid.data, grid.height, grid.width
        if h % 2 != 0:
            raise DimensionError(f"height {h} not divisible by 2 for merging")
        if w % 2 != 0:
            raise DimensionError(f"width {w} not divisible by 2 for merging")
        b, _, c = x.shape
        x = x.view(b, h, w, c)
        x = torch.cat(
            [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]],
            dim=-1,
        )  # B, H/2, W/2, 4C
        x = x.view(b, (h // 2) * (w // 2), 4 * c)
        x = self.norm(self.reduction(x))
        return TokenGrid(x, h // 2, w // 2)


def tokens_to_map(grid: TokenGrid) -> torch.Tensor:
    """(B, N, C) tokens back to a (B, C, H, W) feature map."""
    x, h, w = grid.validate()
    b, n, c = x.shape
    return x.transpose(1, 2).reshape(b, c, h, w)


def map_to_tokens(x: torch.Tensor) -> TokenGrid:
    """(B, C, H, W) feature map to (B, N, C) tokens."""
    b, c, h, w = x.shape
    return TokenGrid(x.flatten(2).transpose(1, 2), h, w)
