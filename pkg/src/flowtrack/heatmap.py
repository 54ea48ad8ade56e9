"""Gaussian heatmap targets, MSE loss, flip averaging and sub-pixel decoding.

Heatmaps are ``(height, width)`` float arrays indexed ``[y, x]``; a stack is
``(n_joints, height, width)``.
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .errors import ShapeMismatch
from .pose_model import Joint, JointSchema, Pose

QUARTER = 0.25


def default_sigma(width: int, height: int) -> float:
    """2 cells on a 64x48 map, scaled with the map size."""
    return 2.0 * np.sqrt((width * height) / (64.0 * 48.0))


def gaussian_target(center: Tuple[float, float], sigma: float, width: int, height: int) -> np.ndarray:
    """Unnormalized 2D Gaussian, 1.0 at ``center`` when it lies on a grid node."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    cx, cy = center
    xs = np.arange(width, dtype=float) - cx
    ys = np.arange(height, dtype=float) - cy
    return np.exp(-(xs[None, :] ** 2 + ys[:, None] ** 2) / (2 * sigma ** 2))


def target_stack(pose: Pose, sigma: float, width: int, height: int) -> np.ndarray:
    """One target map per joint; invisible joints get an all-zero map."""
    out = np.zeros((len(pose), height, width))
    for k, j in enumerate(pose.joints):
        if j.visible:
            out[k] = gaussian_target((j.x, j.y), sigma, width, height)
    return out


def mse_loss(predicted: np.ndarray, target: np.ndarray) -> float:
    predicted = np.asarray(predicted, dtype=float)
    target = np.asarray(target, dtype=float)
    if predicted.shape != target.shape:
        raise ShapeMismatch(f"heatmap shapes differ: {predicted.shape} vs {target.shape}")
    return float(np.mean((predicted - target) ** 2))


def flip_average(original: np.ndarray, flipped: np.ndarray, schema: JointSchema) -> np.ndarray:
    """Average a stack with the prediction made on the mirrored image.

    ``flipped`` is mirrored back horizontally and its left/right channels are
    swapped before averaging.
    """
    original = np.asarray(original, dtype=float)
    flipped = np.asarray(flipped, dtype=float)
    if original.shape != flipped.shape:
        raise ShapeMismatch(f"heatmap stacks differ: {original.shape} vs {flipped.shape}")
    if original.ndim != 3 or original.shape[0] != schema.n_joints:
        raise ShapeMismatch(
            f"expected ({schema.n_joints}, H, W) stack for schema {schema.name!r}, got {original.shape}"
        )
    restored = flipped[schema.flip_permutation(), :, ::-1]
    return (original + restored) / 2.0


def decode_joint(h: np.ndarray) -> Joint:
    """Argmax location refined by a quarter cell toward the stronger neighbor.

    The step is taken independently per axis, toward whichever of the two
    neighbors on that axis responds more strongly; an axis gets no step when
    its neighbors tie or when the peak sits on the border of that axis.
    Confidence is the raw peak value clamped to [0, 1].
    """
    h = np.asarray(h, dtype=float)
    if h.ndim != 2 or h.shape[0] < 2 or h.shape[1] < 2:
        raise ShapeMismatch(f"decoding needs a 2D map of at least 2x2, got {h.shape}")
    height, width = h.shape
    idx = int(np.argmax(h))  # first maximum in row-major order
    py, px = divmod(idx, width)
    x, y = float(px), float(py)
    if 0 < px < width - 1:
        x += QUARTER * float(np.sign(h[py, px + 1] - h[py, px - 1]))
    if 0 < py < height - 1:
        y += QUARTER * float(np.sign(h[py + 1, px] - h[py - 1, px]))
    conf = float(np.clip(h[py, px], 0.0, 1.0))
    return Joint(x, y, conf, True)


def decode_stack(stack: np.ndarray, schema: JointSchema) -> Pose:
    stack = np.asarray(stack, dtype=float)
    if stack.ndim != 3 or stack.shape[0] != schema.n_joints:
        raise ShapeMismatch(f"expected ({schema.n_joints}, H, W) stack, got {stack.shape}")
    joints: List[Joint] = [decode_joint(hm) for hm in stack]
    return Pose(tuple(joints), schema)

