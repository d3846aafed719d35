"""Retrieval and cross-subject alignment metrics."""

from __future__ import annotations

from itertools import combinations

import numpy as np

from brainfed.losses import NormalizationError
from brainfed.network import forward


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt(np.sum(x * x, axis=1))
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise NormalizationError(f"{what} row {int(zero[0])} has zero norm")
    return x / norms[:, None]


def retrieval_accuracy(preds: np.ndarray, targets: np.ndarray, k: int = 1) -> float:
    """Fraction of rows whose own target is within the top-k by cosine similarity.

    Ties are broken in favour of the lower target index.
    """
    if preds.shape != targets.shape or preds.ndim != 2:
        raise ValueError(f"preds {preds.shape} and targets {targets.shape} must match")
    n = preds.shape[0]
    if n < 2:
        raise ValueError("retrieval needs at least two rows")
    if k < 1:
        raise ValueError("k must be >= 1")
    sim = _unit_rows(preds, "pred") @ _unit_rows(targets, "target").T
    own = np.diag(sim)[:, None]
    idx = np.arange(n)
    ahead = (sim > own) | ((sim == own) & (idx[None, :] < idx[:, None]))
    rank = ahead.sum(axis=1)
    return float(np.mean(rank < k))


def alignment_score(preds: list[np.ndarray]) -> float:
    """Matched minus mismatched mean cross-subject cosine similarity.

    ``preds[s][n]`` is subject ``s``'s prediction for shared stimulus ``n``.
    For each subject pair, the mean cosine over the same stimulus minus the
    mean over different stimuli; averaged over pairs.
    """
    if len(preds) < 2:
        raise ValueError("alignment needs at least two subjects")
    n = preds[0].shape[0]
    if n < 2 or any(p.shape != preds[0].shape for p in preds):
        raise ValueError("all subjects need identically shaped predictions over >= 2 stimuli")
    units = [_unit_rows(p, f"subject {i}") for i, p in enumerate(preds)]
    scores = []
    for a, b in combinations(range(len(units)), 2):
        c = units[a] @ units[b].T
        matched = np.trace(c) / n
        mismatched = (c.sum() - np.trace(c)) / (n * (n - 1))
        scores.append(matched - mismatched)
    return float(np.mean(scores))


def predict(params, inputs: np.ndarray) -> np.ndarray:
    return forward(params, inputs)[0]


def subject_predictions(client, modality: str = "image", source: str = "params") -> np.ndarray:
    model = client.models[modality]
    return predict(getattr(model, source), client.data.test_inputs)


def evaluate_global(corpus, clients, global_state, modality: str = "image", partition=None) -> dict[int, dict]:
    """Per-subject retrieval of the individual, EMA and composed global models.

    The composed model is the subject's own foundational tier followed by the
    global shared tiers; it is evaluated on that subject's shared-test inputs.
    """
    from brainfed.protocol import compose_global

    targets = corpus.test_image if modality == "image" else corpus.test_text
    shared = global_state.shared[modality]
    out = {}
    for c in sorted(clients, key=lambda c: c.subject_id):
        params = c.models[modality].params
        n_found = len(params) - len(shared)
        composed = compose_global(params.layers[:n_found], shared)
        x = c.data.test_inputs
        ind, ema, glob = predict(params, x), predict(c.models[modality].shadow, x), predict(composed, x)
        out[c.subject_id] = {
            "top1": retrieval_accuracy(ind, targets, 1),
            "top5": retrieval_accuracy(ind, targets, 5),
            "ema_top1": retrieval_accuracy(ema, targets, 1),
            "global_top1": retrieval_accuracy(glob, targets, 1),
            "global_top5": retrieval_accuracy(glob, targets, 5),
        }
    return out


def alignment_of(clients, modality: str = "image") -> float | None:
    if len(clients) < 2:
        return None
    return alignment_score([subject_predictions(c, modality) for c in sorted(clients, key=lambda c: c.subject_id)])


def epoch_records(corpus, clients, global_state, cfg, epoch_metrics) -> list[dict]:
    """One JSON-ready record per subject for the given epoch."""
    per_subject = evaluate_global(corpus, clients, global_state)
    align = alignment_of(clients)
    records = []
    for sid, m in per_subject.items():
        losses = epoch_metrics.train_loss[sid]
        records.append(
            {
                "epoch": epoch_metrics.epoch,
                "subject": sid,
                "split": "test",
                "loss_v": losses["image"],
                "loss_t": losses["text"],
                "top1": m["top1"],
                "top5": m["top5"],
                "alignment": align,
                "global_top1": m["global_top1"],
            }
        )
    return records
