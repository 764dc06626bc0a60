import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .exceptions import ConfigurationError, ContractError

logger = logging.getLogger(__name__)


@dataclass
class GenLossWeights:
    alpha1: float = 1.0  # one-hot
    alpha2: float = 0.05  # total variation
    use_pse: bool = True

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigurationError(f"loss weights must be non-negative, got ({self.alpha1}, {self.alpha2})")

    @property
    def any_active(self):
        return self.use_pse or self.alpha1 > 0 or self.alpha2 > 0

    def label(self):
        parts = [name for name, on in [('PSE', self.use_pse), ('OH', self.alpha1 > 0), ('TV', self.alpha2 > 0)] if on]
        return '+'.join(parts) if parts else 'none'


def one_hot_loss(logits, targets):
    """ Batch-mean cross-entropy of the logits against the pre-assigned categories """
    if targets.numel() and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise ContractError(f"target categories outside [0, {logits.shape[-1]})")
    return F.cross_entropy(logits, targets)


def tv_loss(image):
    """
    Anisotropic total variation with forward differences, no padding, normalized by pixel count
    and averaged over batch and channels.
    """
    h, w = image.shape[-2:]
    if h < 2 or w < 2:
        raise ContractError(f"total variation needs at least 2x2 pixels, got {h}x{w}")
    dx = (image[..., :, 1:] - image[..., :, :-1]).abs().sum(dim=(-2, -1))
    dy = (image[..., 1:, :] - image[..., :-1, :]).abs().sum(dim=(-2, -1))
    return ((dx + dy) / (h * w)).mean()


def total_generation_loss(pse, oh, tv, w: GenLossWeights):
    return (pse if w.use_pse else 0.0) + w.alpha1 * oh + w.alpha2 * tv
