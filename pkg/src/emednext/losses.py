"""Dice-Focal + Sobel boundary loss with deep-supervision weighting.

Inputs are multi-label: ``p`` and ``g`` are ``(C, D, H, W)`` with one
independent sigmoid channel per (overlapping) tumor region. Every loss has
a ``*_and_grad`` twin returning the gradient with respect to ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import sigmoid
from .preprocess import resample_array

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    focal_gamma: float = 2.0
    dice_smooth: float = 1e-5
    ds_weights: tuple[float, ...] = (1.0, 0.5, 0.25, 0.125)

    def __post_init__(self):
        object.__setattr__(self, "ds_weights", tuple(float(w) for w in self.ds_weights))
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not self.ds_weights or any(
            b != a / 2 for a, b in zip(self.ds_weights, self.ds_weights[1:])
        ):
            raise ValueError("deep-supervision weights must halve at each level")


def deep_supervision_weights(levels: int) -> list[float]:
    return [2.0**-i for i in range(levels)]


def _check(p, g):
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {g.shape}")
    if p.ndim != 4:
        raise ValueError(f"expected (C, D, H, W) tensors, got {p.ndim}D")
    return p, g


# ---------------------------------------------------------------------------
# Dice-Focal
# ---------------------------------------------------------------------------


def dice_focal_and_grad(p, g, cfg: LossConfig = LossConfig()):
    p, g = _check(p, g)
    C = p.shape[0]
    axes = (1, 2, 3)
    s = cfg.dice_smooth
    inter = np.sum(p * g, axis=axes)
    denom = p.sum(axis=axes) + g.sum(axis=axes) + s
    dice = (2 * inter + s) / denom
    dice_loss = np.mean(1.0 - dice)
    d_dice = -(2 * g * denom[:, None, None, None] - (2 * inter + s)[:, None, None, None]) / (
        denom[:, None, None, None] ** 2
    ) / C

    gam = cfg.focal_gamma
    inside = (p > PROB_EPS) & (p < 1 - PROB_EPS)
    pc = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    log_p, log_q = np.log(pc), np.log1p(-pc)
    pos = -((1 - pc) ** gam) * log_p
    neg = -(pc**gam) * log_q
    focal = np.mean(g * pos + (1 - g) * neg)
    d_pos = gam * (1 - pc) ** (gam - 1) * log_p - (1 - pc) ** gam / pc
    d_neg = -gam * pc ** (gam - 1) * log_q + pc**gam / (1 - pc)
    d_focal = np.where(inside, g * d_pos + (1 - g) * d_neg, 0.0) / p.size

    return float(dice_loss + focal), d_dice + d_focal


def dice_focal(p, g, cfg: LossConfig = LossConfig()) -> float:
    """Mean over channels of (1 - soft Dice) plus mean focal binary cross-entropy."""
    return dice_focal_and_grad(p, g, cfg)[0]


# ---------------------------------------------------------------------------
# Sobel boundary term
# ---------------------------------------------------------------------------


def _diff(x, axis):
    # out[i] = x[i+1] - x[i-1], zero outside
    xp = np.pad(x, [(1, 1) if a == axis else (0, 0) for a in range(x.ndim)])
    n = x.shape[axis]
    return np.take(xp, range(2, n + 2), axis=axis) - np.take(xp, range(0, n), axis=axis)


def _smooth(x, axis):
    # out[i] = x[i-1] + 2 x[i] + x[i+1], zero outside
    xp = np.pad(x, [(1, 1) if a == axis else (0, 0) for a in range(x.ndim)])
    n = x.shape[axis]
    return (np.take(xp, range(0, n), axis=axis) + 2 * x + np.take(xp, range(2, n + 2), axis=axis))


def _sobel(x: np.ndarray, axis: int) -> np.ndarray:
    out = _diff(x, axis)
    for other in range(3):
        if other != axis:
            out = _smooth(out, other)
    return out


def sobel_gradient_3d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Correlation with the three 3x3x3 Sobel kernels, zero-padded borders."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a 3D volume, got {x.ndim}D")
    if min(x.shape) < 3:
        raise ValueError(f"Sobel needs every dim >= 3, got {x.shape}")
    return _sobel(x, 0), _sobel(x, 1), _sobel(x, 2)


def boundary_loss_and_grad(p, g):
    p, g = _check(p, g)
    n_vox = p[0].size
    total = 0.0
    grad = np.zeros_like(p)
    for c in range(p.shape[0]):
        r = p[c] - g[c]  # Sobel is linear, so differences can be taken first
        for axis in range(3):
            sr = _sobel(r, axis)
            total += np.mean(sr * sr)
            # the operator is anti-self-adjoint: S^T = -S
            grad[c] -= (2.0 / n_vox) * _sobel(sr, axis)
    return float(total), grad


def boundary_loss(p, g) -> float:
    """Sum over channels and axes of the mean squared Sobel-gradient mismatch."""
    return boundary_loss_and_grad(p, g)[0]


# ---------------------------------------------------------------------------
# deep supervision
# ---------------------------------------------------------------------------


def level_loss_and_grad(p, g, cfg: LossConfig = LossConfig()):
    df, d_df = dice_focal_and_grad(p, g, cfg)
    bd, d_bd = boundary_loss_and_grad(p, g)
    return df + cfg.alpha * bd, d_df + cfg.alpha * d_bd


def downsample_target(g: np.ndarray, shape) -> np.ndarray:
    """Nearest-neighbour reduction of a ``(C, D, H, W)`` target to ``shape``."""
    g = np.asarray(g)
    scales = [n / m for n, m in zip(g.shape[1:], shape)]
    return resample_array(g, shape, scales, mode="nearest")


def _check_levels(shapes, g_shape, cfg):
    if not shapes:
        raise ValueError("need at least one output level")
    if len(shapes) > len(cfg.ds_weights):
        raise ValueError(f"{len(shapes)} outputs but only {len(cfg.ds_weights)} weights")
    for i, shape in enumerate(shapes):
        expected = (g_shape[0],) + tuple(-(-n // 2**i) for n in g_shape[1:])
        if tuple(shape) != expected:
            raise ValueError(f"level {i} has shape {tuple(shape)}, expected {expected}")


def deep_supervision_loss_and_grad(probs: list[np.ndarray], g: np.ndarray, cfg: LossConfig = LossConfig()):
    """Weighted sum over levels; returns (loss, [d loss / d probs_i])."""
    g = np.asarray(g, dtype=np.float64)
    _check_levels([p.shape for p in probs], g.shape, cfg)
    total, grads = 0.0, []
    for w, p in zip(cfg.ds_weights, probs):
        value, grad = level_loss_and_grad(p, downsample_target(g, p.shape[1:]), cfg)
        total += w * value
        grads.append(w * grad)
    return total, grads


def total_loss_and_grad(ds_outputs: list[np.ndarray], g: np.ndarray, cfg: LossConfig = LossConfig()):
    """Loss on raw logits; gradients are with respect to the logits."""
    probs = [sigmoid(np.asarray(o, dtype=np.float64)) for o in ds_outputs]
    value, grads = deep_supervision_loss_and_grad(probs, g, cfg)
    return value, [d * p * (1 - p) for d, p in zip(grads, probs)]


def total_loss(ds_outputs: list[np.ndarray], g: np.ndarray, cfg: LossConfig = LossConfig()) -> float:
    """Sum over levels i of 2**-i * (Dice-Focal + alpha * boundary) on sigmoid(logits)."""
    return total_loss_and_grad(ds_outputs, g, cfg)[0]
