"""Binary cross entropy and contrastive loss with analytic gradients."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInput

BCE_CLAMP = 1e-7


def bce_loss(p, y) -> float:
    """Mean binary cross entropy; probabilities clamped to [1e-7, 1-1e-7]."""
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def bce_grad(p, y) -> np.ndarray:
    """d(mean BCE)/dp; zero where the clamp is active."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    grad = (pc - y) / (pc * (1.0 - pc)) / p.size
    return np.where(inside, grad, 0.0)


def contrastive_loss(d, y, margin: float = 1.0) -> float:
    """Mean of y*d^2 + (1-y)*max(0, margin-d)^2 over a batch of distances."""
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(d < 0):
        raise InvalidInput("distances must be non-negative")
    hinge = np.maximum(0.0, margin - d)
    return float(np.mean(y * d ** 2 + (1.0 - y) * hinge ** 2))


def contrastive_grad(d, y, margin: float = 1.0) -> np.ndarray:
    """d(mean contrastive)/dd."""
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    hinge = np.maximum(0.0, margin - d)
    return (2.0 * y * d - 2.0 * (1.0 - y) * hinge) / d.size
