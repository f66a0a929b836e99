"""Euclidean location losses.

Both losses are means of Euclidean norms in meters (not squared norms). The
single-location loss and the T-step loss share one implementation: every
leading axis (batch, time) is averaged.
"""

from typing import Tuple

import numpy as np

from .errors import RejectedInputError


def _distances(pred: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-location difference vectors and their Euclidean lengths.

    Raises RejectedInputError unless both arrays share one shape ending in 2.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim == 0 or pred.shape[-1] != 2:
        raise RejectedInputError(f"Prediction {pred.shape} and target {target.shape} must match with last dim 2")
    diff = pred - target
    return diff, np.linalg.norm(diff, axis=-1)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """||l - l~||_2, averaged over any leading batch axes."""
    _, dist = _distances(pred, target)
    return float(np.mean(dist))


def mse_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of ``mse_loss``; zero where prediction equals target."""
    diff, dist = _distances(pred, target)
    safe = np.where(dist > 0.0, dist, 1.0)
    grad = np.where(dist[..., None] > 0.0, diff / safe[..., None], 0.0)
    return grad / dist.size


def mse_loss_sequence(preds: np.ndarray, targets: np.ndarray) -> float:
    """(sum_t ||l^_t - l~_t||_2) / T for a T x 2 sequence, or its mean over an N x T x 2 batch."""
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim < 2 or preds.shape[-2] < 1:
        raise RejectedInputError(f"Sequence loss needs at least one T x 2 step, got {preds.shape}")
    return mse_loss(preds, targets)


def mse_loss_sequence_grad(preds: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of ``mse_loss_sequence`` with respect to every step's prediction."""
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim < 2 or preds.shape[-2] < 1:
        raise RejectedInputError(f"Sequence loss needs at least one T x 2 step, got {preds.shape}")
    return mse_loss_grad(preds, targets)
