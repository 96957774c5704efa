"""Training objective: BCE + Dice per supervised map, deep supervision over
the four auxiliary maps, and the weighted branch terms.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import torch

from .branch import ssl_losses
from .errors import ConfigurationError, DimensionError

BRANCH_MODES = ("unsupervised", "supervised", "self-supervised")


@dataclass
class LossConfig:
    """Weights and stabilizers of the total objective."""

    dice_weight: float = 0.5     # multiplies each Dice term
    branch_weight: float = 0.25  # multiplies the two branch terms
    dice_smooth: float = 1.0     # keeps the Dice denominator positive
    clamp_eps: float = 1e-7      # probability clamp before logs

    def __post_init__(self):
        if self.dice_weight < 0 or self.branch_weight < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.dice_smooth <= 0:
            raise ConfigurationError("dice smoothing must be positive")


def _check_aligned(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise DimensionError(
            f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} "
            f"are not aligned"
        )


def bce_loss(pred: torch.Tensor, target: torch.Tensor,
             eps: float = 1e-7) -> torch.Tensor:
    """Mean binary cross entropy with the prediction clamped to [eps, 1-eps]."""
    _check_aligned(pred, target)
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * p.log() + (1 - target) * (1 - p).log()).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor,
              smooth: float = 1.0) -> torch.Tensor:
    """Global soft Dice over all pixels of the batch."""
    _check_aligned(pred, target)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + target.sum() + smooth)


@dataclass
class LossTerms:
    """Per-term breakdown of one total-loss evaluation.

    ``bce``/``dice`` hold the five supervised map terms (final change map
    first, then the four deep-supervision maps); ``branch`` holds the two
    branch terms for the modes that have them.
    """

    bce: Tuple[torch.Tensor, ...]
    dice: Tuple[torch.Tensor, ...]
    branch: Tuple[torch.Tensor, ...]
    total: torch.Tensor

    @property
    def supervised(self) -> Tuple[torch.Tensor, ...]:
        return self.bce + self.dice

    def scalars(self) -> dict:
        out = {f"bce_{i}": float(t) for i, t in enumerate(self.bce)}
        out.update({f"dice_{i}": float(t) for i, t in enumerate(self.dice)})
        out.update({f"branch_{i}": float(t) for i, t in enumerate(self.branch)})
        out["total"] = float(self.total)
        return out


def total_loss(outputs, target: torch.Tensor, cfg: LossConfig,
               branch_mode: str = "self-supervised") -> LossTerms:
    """Assemble the training objective for one batch.

    Five supervised maps (final change map + four deep-supervision maps)
    each contribute BCE + dice_weight * Dice against the same label.  The
    branch contribution depends on the mode: pseudo-label consistency
    losses (self-supervised), direct BCE+Dice of the branch maps against
    the label (supervised), or nothing (unsupervised); either branch term
    is weighted by branch_weight.
    """
    if branch_mode not in BRANCH_MODES:
        raise ConfigurationError(
            f"branch_mode {branch_mode!r} not one of {BRANCH_MODES}"
        )
    maps = (outputs.cm,) + tuple(outputs.ds)
    if len(maps) != 5:
        raise ConfigurationError(
            f"expected final map + 4 deep-supervision maps, got {len(maps)}"
        )
    bce_terms = tuple(bce_loss(m, target, cfg.clamp_eps) for m in maps)
    dice_terms = tuple(dice_loss(m, target, cfg.dice_smooth) for m in maps)
    total = sum(bce_terms) + cfg.dice_weight * sum(dice_terms)

    branch_terms: Tuple[torch.Tensor, ...] = ()
    if branch_mode != "unsupervised":
        if outputs.pm1 is None or outputs.pm2 is None:
            raise ConfigurationError(
                f"branch_mode {branch_mode!r} requires both branch maps"
            )
        if branch_mode == "self-supervised":
            branch_terms = ssl_losses(outputs.pm1, outputs.pm2, target,
                                      cfg.clamp_eps)
        else:
            branch_terms = tuple(
                bce_loss(pm, target, cfg.clamp_eps)
                + cfg.dice_weight * dice_loss(pm, target, cfg.dice_smooth)
                for pm in (outputs.pm1, outputs.pm2)
            )
        total = total + cfg.branch_weight * sum(branch_terms)

    return LossTerms(bce=bce_terms, dice=dice_terms, branch=branch_terms,
                     total=total)
