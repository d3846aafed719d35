"""Regression and soft-contrastive objectives with exact gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateBatchError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    batch_mean_softclip: bool = True
    bidirectional: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def _check_pair(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape or pred.ndim != 2:
        raise ValueError(f"pred {pred.shape} and target {target.shape} must be matching 2-d arrays")
    if pred.shape[0] < 1:
        raise DegenerateBatchError("empty batch")


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of the per-sample mean squared error."""
    _check_pair(pred, target)
    b, e = pred.shape
    diff = pred - target
    loss = float(np.sum(diff * diff) / (b * e))
    return loss, diff * (2.0 / (b * e))


def _normalize(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.sum(x * x, axis=1))
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise NormalizationError(f"{what} row {int(zero[0])} has zero norm")
    return x / norms[:, None], norms


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def _soft_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """sum_i sum_j -labels_ij log softmax_j(logits_i) and its logit gradient."""
    logp = _log_softmax(logits)
    loss = -float(np.sum(labels * logp))
    # rows of labels sum to one
    return loss, np.exp(logp) - labels


def softclip(pred: np.ndarray, target: np.ndarray, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Cross-entropy between target-similarity soft labels and prediction-target similarities.

    Rows of both inputs are L2-normalized first. With ``bidirectional`` the
    transposed (target-to-prediction) term is averaged in.
    """
    _check_pair(pred, target)
    p_hat, p_norm = _normalize(pred, "pred")
    y_hat, _ = _normalize(target, "target")
    tau = cfg.temperature
    labels = np.exp(_log_softmax(y_hat @ y_hat.T / tau))
    logits = p_hat @ y_hat.T / tau

    loss, g_logits = _soft_ce(logits, labels)
    if cfg.bidirectional:
        loss_t, g_t = _soft_ce(logits.T, labels)
        loss = 0.5 * (loss + loss_t)
        g_logits = 0.5 * (g_logits + g_t.T)
    scale = 1.0 / pred.shape[0] if cfg.batch_mean_softclip else 1.0
    loss *= scale
    g_phat = (g_logits @ y_hat) * (scale / tau)
    # project through x -> x / |x|
    radial = np.sum(g_phat * p_hat, axis=1, keepdims=True)
    grad = (g_phat - p_hat * radial) / p_norm[:, None]
    return loss, grad


def modality_loss(pred: np.ndarray, target: np.ndarray, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    l_mse, g_mse = mse(pred, target)
    l_clip, g_clip = softclip(pred, target, cfg)
    return l_mse + l_clip, g_mse + g_clip
