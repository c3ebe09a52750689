"""Classifier-free guidance, optionally with a per-token scale.

The spatial variant applies the stronger scale on mask-selected focus
tokens and the base scale elsewhere. With equal scales, or with the
spatial switch off, it reduces exactly to uniform guidance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aesmask import AesMask
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class GuidanceConfig:
    g_bg: float = 1.0
    g_aes: float | None = None  # defaults to g_bg
    enabled_spatial: bool = False

    def __post_init__(self):
        if self.g_aes is None:
            object.__setattr__(self, "g_aes", self.g_bg)
        if self.g_bg < 1.0:
            raise ConfigError(f"background guidance scale must be >= 1, got {self.g_bg}")
        if self.g_aes < self.g_bg:
            raise ConfigError(
                f"focus guidance scale {self.g_aes} must be >= background "
                f"scale {self.g_bg}"
            )


def apply_cfg(
    cond: np.ndarray,
    uncond: np.ndarray,
    mask: AesMask | None,
    cfg: GuidanceConfig,
) -> np.ndarray:
    """uncond + g * (cond - uncond), with g per token when spatial.

    Token i gets g_bg + (g_aes - g_bg) * mask_bit(i). Without a mask, or
    with the spatial switch off, g is the uniform background scale.
    """
    cond = np.asarray(cond, dtype=np.float64)
    uncond = np.asarray(uncond, dtype=np.float64)
    if cond.shape != uncond.shape:
        raise ShapeError(f"prediction shapes differ: {cond.shape} vs {uncond.shape}")
    if cfg.enabled_spatial and mask is not None:
        if mask.bits.size != cond.shape[0]:
            raise ShapeError(
                f"mask covers {mask.bits.size} tokens, predictions have {cond.shape[0]}"
            )
        g = cfg.g_bg + (cfg.g_aes - cfg.g_bg) * mask.bits.astype(np.float64)
        return uncond + g[:, None] * (cond - uncond)
    return uncond + cfg.g_bg * (cond - uncond)
