"""Siamese CNN branch: shared VGG-style encoder, decoder, and the
cross-branch pseudo-label consistency losses.

The encoder is applied to both images with one parameter set and exposes
four feature levels at strides 4/8/16/32 that align with the main network's
grid rows.  The decoder ascends those levels back to input resolution and
emits a per-image change probability map used for branch supervision.
"""

from typing import Dict, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointVersionError, DimensionError, InputValidationError

# VGG16 block layout: conv counts per block; widths are configurable.
VGG_CONVS_PER_BLOCK = (2, 2, 3, 3, 3)
PAPER_ENCODER_WIDTHS = (64, 128, 256, 512, 512)
DESK_ENCODER_WIDTHS = (8, 16, 32, 64, 128)

BCE_EPS = 1e-7


class EncoderFeatures(NamedTuple):
    """Feature levels at strides 4, 8, 16 and 32 relative to the input."""

    v1: torch.Tensor
    v2: torch.Tensor
    v3: torch.Tensor
    v4: torch.Tensor

    @property
    def levels(self) -> Tuple[torch.Tensor, ...]:
        return (self.v1, self.v2, self.v3, self.v4)


def _conv_block(in_ch: int, out_ch: int, n_convs: int) -> nn.Sequential:
    layers = []
    for i in range(n_convs):
        layers += [
            nn.Conv2d(in_ch if i == 0 else out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        ]
    return nn.Sequential(*layers)


class VggEncoder(nn.Module):
    """Five conv blocks with 2x max-pooling after each.

    The outputs after pools 2..5 form the four exported levels; both branch
    invocations share this single parameter set.
    """

    def __init__(self, in_chans: int = 3, widths=DESK_ENCODER_WIDTHS):
        super().__init__()
        widths = tuple(widths)
        self.widths = widths
        blocks = []
        prev = in_chans
        for w, n in zip(widths, VGG_CONVS_PER_BLOCK):
            blocks.append(_conv_block(prev, w, n))
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(2, 2)

    @property
    def level_channels(self) -> Tuple[int, ...]:
        return self.widths[1:]

    def forward(self, image: torch.Tensor) -> EncoderFeatures:
        _, _, h, w = image.shape
        if h % 32 != 0:
            raise DimensionError(f"height {h} not divisible by 32")
        if w % 32 != 0:
            raise DimensionError(f"width {w} not divisible by 32")
        x = self.pool(self.blocks[0](image))
        levels = []
        for block in self.blocks[1:]:
            x = self.pool(block(x))
            levels.append(x)
        return EncoderFeatures(*levels)


class BranchDecoder(nn.Module):
    """Five base blocks in order of increasing spatial resolution.

    Each stage upsamples the running decoder feature, adds the matching
    encoder level, and refines through a conv+BN+ReLU base block; a final
    1x1 conv plus sigmoid yields the probability map at input resolution.
    """

    def __init__(self, level_channels: Tuple[int, int, int, int]):
        super().__init__()
        c1, c2, c3, c4 = level_channels

        def base_block(in_ch, out_ch):
            return nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            )

        self.block1 = base_block(c4, c3)   # stride 32
        self.block2 = base_block(c3, c2)   # stride 16, after + v3
        self.block3 = base_block(c2, c1)   # stride 8, after + v2
        self.block4 = base_block(c1, c1)   # stride 4, after + v1
        self.block5 = base_block(c1, c1)   # full resolution
        self.head = nn.Conv2d(c1, 1, 1)

    @staticmethod
    def _up(x, factor=2):
        return F.interpolate(x, scale_factor=factor, mode="bilinear",
                             align_corners=False)

    def forward(self, feats: EncoderFeatures) -> torch.Tensor:
        d = self.block1(feats.v4)
        d = self.block2(self._up(d) + feats.v3)
        d = self.block3(self._up(d) + feats.v2)
        d = self.block4(self._up(d) + feats.v1)
        d = self.block5(self._up(d, factor=4))
        return torch.sigmoid(self.head(d))


class CnnBranch(nn.Module):
    """Shared-weight encoder + decoder applied to each image of the pair."""

    def __init__(self, in_chans: int = 3, widths=DESK_ENCODER_WIDTHS):
        super().__init__()
        self.encoder = VggEncoder(in_chans, widths)
        self.decoder = BranchDecoder(self.encoder.level_channels)

    def forward(self, image1: torch.Tensor, image2: torch.Tensor):
        f1 = self.encoder(image1)
        f2 = self.encoder(image2)
        pm1 = self.decoder(f1)
        pm2 = self.decoder(f2)
        return f1, f2, pm1, pm2


def load_encoder_state(encoder: VggEncoder,
                       mapping: Dict[str, torch.Tensor]) -> None:
    """Import hook: load a flat name->tensor mapping into the encoder.

    Names follow ``encoder.state_dict()`` (``blocks.<i>.<j>.weight`` etc.,
    listed in the README).  Unknown names, missing names, or shape conflicts
    raise.
    """
    own = encoder.state_dict()
    unknown = sorted(set(mapping) - set(own))
    missing = sorted(set(own) - set(mapping))
    if unknown or missing:
        raise CheckpointVersionError(
            f"encoder weight names mismatch: unknown={unknown[:3]} "
            f"missing={missing[:3]}"
        )
    for name, tensor in mapping.items():
        if tuple(tensor.shape) != tuple(own[name].shape):
            raise CheckpointVersionError(
                f"shape mismatch for {name}: got {tuple(tensor.shape)}, "
                f"expected {tuple(own[name].shape)}"
            )
    encoder.load_state_dict(mapping)


def pseudo_label(pm: torch.Tensor) -> torch.Tensor:
    """Binarize a probability map at 0.5 (>= 0.5 maps to 1); detached."""
    return (pm.detach() >= 0.5).to(pm.dtype)


def region_masks(label: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Split a binary ground-truth label into (unchanged, changed) masks.

    The masks partition the image: their union covers every pixel and their
    intersection is empty.
    """
    if not torch.all((label == 0) | (label == 1)):
        raise InputValidationError("label mask must be binary (0/1)")
    changed = label.to(label.dtype)
    return 1 - changed, changed


def _masked_bce(pred: torch.Tensor, target: torch.Tensor,
                mask: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Pixelwise BCE averaged over the masked region; empty region gives 0."""
    count = mask.sum()
    if count == 0:
        return pred.sum() * 0.0
    p = pred.clamp(eps, 1.0 - eps)
    loss = -(target * p.log() + (1 - target) * (1 - p).log())
    return (loss * mask).sum() / count


def ssl_losses(pm1: torch.Tensor, pm2: torch.Tensor,
               label: torch.Tensor, eps: float = BCE_EPS):
    """Cross-branch consistency losses from detached pseudo-labels.

    In unchanged regions each branch is pulled toward the other branch's
    pseudo-label; in changed regions it is pushed toward the opposite of it.
    Returns the two branch losses.
    """
    if pm1.shape != pm2.shape or pm1.shape != label.shape:
        raise DimensionError(
            f"probability maps {tuple(pm1.shape)}/{tuple(pm2.shape)} and "
            f"label {tuple(label.shape)} are not aligned"
        )
    unchanged, changed = region_masks(label)
    pl1 = pseudo_label(pm1)
    pl2 = pseudo_label(pm2)
    loss1 = (_masked_bce(pm1, pl2, unchanged, eps)
             + _masked_bce(pm1, 1 - pl2, changed, eps))
    loss2 = (_masked_bce(pm2, pl1, unchanged, eps)
             + _masked_bce(pm2, 1 - pl1, changed, eps))
    return loss1, loss2
