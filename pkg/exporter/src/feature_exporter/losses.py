"""Feature distillation penalties used during sequential fine-tuning.

Both terms are non-negative and added to the task loss: they penalize the
current model for moving features away from the previous model, in
direction and in norm. Norms are compared on raw (un-normalized) features;
normalizing first would erase exactly the quantity the second term guards.
"""

from __future__ import annotations

import torch

GAMMA_KD = 1.0
GAMMA_NORM = 0.1


def kd_losses(f_prev: torch.Tensor,
              f_curr: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(L_KD, L_Norm) for a batch of row-aligned feature pairs.

    L_KD   = mean_i ||f_prev_i - f_curr_i||^2
    L_Norm = mean_i (||f_prev_i|| - ||f_curr_i||)^2
    """
    if f_prev.shape != f_curr.shape:
        raise ValueError(
            f"feature shapes differ: {tuple(f_prev.shape)} vs "
            f"{tuple(f_curr.shape)}")
    l_kd = ((f_prev - f_curr) ** 2).sum(dim=1).mean()
    l_norm = ((f_prev.norm(dim=1) - f_curr.norm(dim=1)) ** 2).mean()
    return l_kd, l_norm
