"""Dynamic Fusion Learner: element-wise blending of local and global parameters.

The advanced tier of a client model becomes ``local + (global - local) * w``
with ``w`` in [0, 1]. ``w`` is learned by gradient descent on the client's own
loss while both parameter sets stay frozen; the chain rule gives
``dL/dw = dL/dtheta_fused * (global - local)`` on that tier.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from brainfed.losses import LossConfig, modality_loss
from brainfed.network import Layer, LayerPartition, ParamSet, ShapeError, backward, forward

Batch = tuple[np.ndarray, np.ndarray]


def clip(w: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, np.minimum(1.0, w))


@dataclass
class FusionWeights:
    """Per-element fusion weights for the ``m`` advanced layers."""

    layers: list[Layer]
    learning_rate: float = 1e-2

    @classmethod
    def ones(cls, params: ParamSet, partition: LayerPartition, learning_rate: float = 1e-2) -> "FusionWeights":
        adv = [params.layers[i] for i in partition.tier_range("advanced")]
        return cls([Layer(l.name, np.ones_like(l.weight), np.ones_like(l.bias)) for l in adv], learning_rate)

    @classmethod
    def constant(cls, params: ParamSet, partition: LayerPartition, value: float, learning_rate: float = 1e-2):
        w = cls.ones(params, partition, learning_rate)
        return w.map(lambda t: np.full_like(t, value))

    @property
    def m(self) -> int:
        return len(self.layers)

    def map(self, fn) -> "FusionWeights":
        return FusionWeights([Layer(l.name, clip(fn(l.weight)), clip(fn(l.bias))) for l in self.layers], self.learning_rate)

    def tensors(self) -> list[np.ndarray]:
        return [t for l in self.layers for t in l.tensors()]

    def as_paramset(self) -> ParamSet:
        return ParamSet(list(self.layers))

    def copy(self) -> "FusionWeights":
        return FusionWeights([Layer(l.name, l.weight.copy(), l.bias.copy()) for l in self.layers], self.learning_rate)


def align_global(local: ParamSet, global_: ParamSet, partition: LayerPartition) -> list[Layer | None]:
    """Map each local layer index to the matching global layer.

    ``global_`` may be a full parameter set or only the shared tiers
    ``[foundational_end, total)``. Foundational slots map to ``None``.
    """
    if len(local) != partition.total:
        raise ShapeError(f"partition covers {partition.total} layers, local model has {len(local)}")
    shared = partition.total - partition.foundational_end
    if len(global_) == partition.total:
        offset = 0
    elif len(global_) == shared:
        offset = partition.foundational_end
    else:
        raise ShapeError(f"global model has {len(global_)} layers; expected {partition.total} or {shared}")
    out: list[Layer | None] = [None] * partition.foundational_end
    for i in range(partition.foundational_end, partition.total):
        lo, gl = local.layers[i], global_.layers[i - offset]
        if lo.name != gl.name or lo.weight.shape != gl.weight.shape or lo.bias.shape != gl.bias.shape:
            raise ShapeError(
                f"layer {i} ({lo.name!r}, {lo.weight.shape}) incompatible with global {gl.name!r} {gl.weight.shape}"
            )
        out.append(gl)
    return out


def _check_weights(local: ParamSet, partition: LayerPartition, w: FusionWeights) -> None:
    adv = list(partition.tier_range("advanced"))
    if w.m != len(adv):
        raise ShapeError(f"fusion weights span {w.m} layers, advanced tier has {len(adv)}")
    for i, wl in zip(adv, w.layers):
        lo = local.layers[i]
        if wl.weight.shape != lo.weight.shape or wl.bias.shape != lo.bias.shape:
            raise ShapeError(f"fusion weights for layer {lo.name!r} have the wrong shape")


def _blend(local: np.ndarray, global_: np.ndarray, w: np.ndarray) -> np.ndarray:
    # local + (global - local) * w, arranged so w == 1 yields global bit-exactly
    return local * (1.0 - w) + global_ * w


def fuse(
    local: ParamSet,
    global_: ParamSet,
    partition: LayerPartition,
    w: FusionWeights,
    copy_intermediate: bool = True,
) -> ParamSet:
    """Retain foundational, copy intermediate, blend advanced.

    With ``copy_intermediate=False`` the intermediate tier keeps its local
    values (used by the retain+DFL ablation).
    """
    glob = align_global(local, global_, partition)
    _check_weights(local, partition, w)
    layers = []
    for i, lo in enumerate(local.layers):
        if i < partition.foundational_end or (i < partition.intermediate_end and not copy_intermediate):
            layers.append(Layer(lo.name, lo.weight.copy(), lo.bias.copy()))
        elif i < partition.intermediate_end:
            gl = glob[i]
            layers.append(Layer(lo.name, gl.weight.copy(), gl.bias.copy()))
        else:
            gl, wl = glob[i], w.layers[i - partition.intermediate_end]
            layers.append(
                Layer(
                    lo.name,
                    _blend(lo.weight, gl.weight, wl.weight),
                    _blend(lo.bias, gl.bias, wl.bias),
                )
            )
    return ParamSet(layers, local.input_dim)


def fusion_gradient(
    local: ParamSet,
    global_: ParamSet,
    partition: LayerPartition,
    w: FusionWeights,
    batch: Batch,
    loss_cfg: LossConfig = LossConfig(),
    copy_intermediate: bool = True,
) -> tuple[float, list[Layer]]:
    """Loss of the fused model on ``batch`` and its gradient w.r.t. ``w``."""
    x, y = batch
    fused = fuse(local, global_, partition, w, copy_intermediate)
    pred, cache = forward(fused, x)
    loss, g_pred = modality_loss(pred, y, loss_cfg)
    grads = backward(fused, cache, g_pred)
    glob = align_global(local, global_, partition)
    out = []
    for i in partition.tier_range("advanced"):
        g, lo, gl = grads.layers[i], local.layers[i], glob[i]
        out.append(Layer(lo.name, g.weight * (gl.weight - lo.weight), g.bias * (gl.bias - lo.bias)))
    return loss, out


def train_weights(
    local: ParamSet,
    global_: ParamSet,
    partition: LayerPartition,
    w: FusionWeights,
    batches: Sequence[Batch],
    loss_cfg: LossConfig = LossConfig(),
    steps: int | None = None,
    copy_intermediate: bool = True,
) -> FusionWeights:
    """Projected gradient descent on ``w``; ``local`` and ``global_`` are not touched.

    ``steps`` defaults to one pass over the given batches.
    """
    if not batches:
        raise ValueError("train_weights needs at least one batch")
    if steps is None:
        steps = len(batches)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    eta = w.learning_rate
    cur = w
    for step in range(steps):
        _, gw = fusion_gradient(local, global_, partition, cur, batches[step % len(batches)], loss_cfg, copy_intermediate)
        cur = FusionWeights(
            [
                Layer(wl.name, clip(wl.weight - eta * g.weight), clip(wl.bias - eta * g.bias))
                for wl, g in zip(cur.layers, gw)
            ],
            eta,
        )
    return cur
