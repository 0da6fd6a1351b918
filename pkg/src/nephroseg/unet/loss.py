"""Multi-class Tversky loss on softmax probabilities."""

from __future__ import annotations

import numpy as np

from ..errors import DomainError, ShapeError

DEFAULT_ALPHA = 0.7
DEFAULT_BETA = 0.3
DEFAULT_EPS = 1e-6


def one_hot(labels, num_classes: int = 3) -> np.ndarray:
    labels = np.asarray(labels)
    return (labels[..., None] == np.arange(num_classes)).astype(np.float64)


def _check(pred, truth):
    pred = np.asarray(pred)
    if hasattr(truth, "labels"):
        truth = truth.labels
    truth = np.asarray(truth)
    if truth.shape == pred.shape:
        g = truth.astype(np.float64)
    elif truth.shape == pred.shape[:-1]:
        g = one_hot(truth, pred.shape[-1])
    else:
        raise ShapeError(f"prediction {pred.shape} does not match truth {truth.shape}")
    if pred.size and (pred.min() < -1e-12 or pred.max() > 1 + 1e-12):
        raise DomainError("probabilities must lie in [0, 1]")
    return pred, g


def tversky_terms(pred, truth, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA, eps=DEFAULT_EPS):
    """Per-class ``(tp, fp, fn, index)`` summed over all leading axes."""
    p, g = _check(pred, truth)
    axes = tuple(range(p.ndim - 1))
    tp = (p * g).sum(axis=axes)
    fp = (p * (1 - g)).sum(axis=axes)
    fn = ((1 - p) * g).sum(axis=axes)
    index = (tp + eps) / (tp + alpha * fp + beta * fn + eps)
    return tp, fp, fn, index


def tversky_index(pred, truth, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA, eps=DEFAULT_EPS):
    return tversky_terms(pred, truth, alpha, beta, eps)[3]


def tversky_loss(pred, truth, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA, eps=DEFAULT_EPS) -> float:
    """Sum over classes of ``1 - TI_c``.

    ``pred`` is ``(..., C)`` probabilities; ``truth`` is either an integer
    label array shaped like ``pred[..., 0]`` or a one-hot array.  Sums run
    over every voxel of every leading axis, so a batch is scored as one set.
    ``alpha`` weights false positives and ``beta`` false negatives.
    """
    return float((1.0 - tversky_index(pred, truth, alpha, beta, eps)).sum())


def tversky_loss_grad(pred, truth, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA, eps=DEFAULT_EPS):
    """Loss value and its gradient with respect to ``pred``."""
    p, g = _check(pred, truth)
    axes = tuple(range(p.ndim - 1))
    tp = (p * g).sum(axis=axes)
    fp = (p * (1 - g)).sum(axis=axes)
    fn = ((1 - p) * g).sum(axis=axes)
    num = tp + eps
    den = tp + alpha * fp + beta * fn + eps
    loss = float((1.0 - num / den).sum())
    # d num/dp = g ; d den/dp = g + alpha (1 - g) - beta g
    dden = g * (1.0 - beta) + alpha * (1.0 - g)
    grad = -(g * den - num * dden) / den**2
    return loss, grad
