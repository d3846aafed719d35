"""Collaborative training loop: local training, EMA shadows, aggregation, hybrid sync.

Each epoch:

1. the coordinator broadcasts the shared tiers of the global model;
2. every client (optionally in parallel) trains its fusion weights against the
   broadcast, synchronizes its model, then runs minibatch SGD with an EMA
   shadow, and uploads the shadow's shared tiers with its sample count;
3. the coordinator aggregates uploads in ascending subject order, weighting by
   sample count.

Everything that crosses the client/coordinator boundary is a serialized
:class:`~brainfed.codec.ProtocolMessage`; the receiver works on the decoded
copy. Image and text models are independent instances driven by the same loop.
"""

from __future__ import annotations

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from types import SimpleNamespace

import numpy as np

from brainfed import codec
from brainfed.codec import COORDINATOR_ID, MessageKind, MessageLog, ProtocolMessage
from brainfed.fusion import FusionWeights, fuse, train_weights
from brainfed.losses import LossConfig, modality_loss
from brainfed.network import (
    Layer,
    LayerPartition,
    NetworkConfig,
    ParamSet,
    ShapeError,
    backward,
    check_compatible,
    forward,
    init,
)
from brainfed.numerics import Rng, weighted_mean
from brainfed.synthdata import Corpus, SubjectDataset

log = logging.getLogger(__name__)

MODALITIES = ("image", "text")
SYNC_MODES = ("none", "retain_copy", "retain_dfl", "full")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 3e-4
    momentum: float = 0.9
    ema_alpha: float = 0.999
    ema_per_epoch: bool = False
    dfl_steps: int | None = None
    dfl_eta: float = 1e-2
    hidden_dim: int = 64
    num_residual_blocks: int = 4
    advanced_layers: int = 2
    token_dim: int = 8
    loss: LossConfig = field(default_factory=LossConfig)
    sync: str = "full"
    seed: int = 42
    workers: int = 1
    eval_every: int = 1
    standardize_inputs: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must lie in [0, 1]")
        if self.batch_size < 1 or self.workers < 1:
            raise ValueError("batch_size and workers must be >= 1")
        if self.sync not in SYNC_MODES:
            raise ValueError(f"sync must be one of {SYNC_MODES}, got {self.sync!r}")
        if self.learning_rate < 0 or self.dfl_eta < 0:
            raise ValueError("learning rates must be non-negative")
        self.partition()

    def network(self, input_dim: int, output_dim: int) -> NetworkConfig:
        c = self.token_dim if output_dim % self.token_dim == 0 else 1
        return NetworkConfig(input_dim, self.hidden_dim, self.num_residual_blocks, output_dim // c, c)

    def partition(self) -> LayerPartition:
        r = self.num_residual_blocks
        return LayerPartition(1, 1 + r, r + 3).with_advanced(self.advanced_layers)


@dataclass
class ModelState:
    params: ParamSet
    shadow: ParamSet
    fusion: FusionWeights
    velocity: ParamSet


@dataclass
class ClientState:
    subject_id: int
    sample_count: int
    models: dict[str, ModelState]
    rng: Rng
    data: SubjectDataset = field(repr=False)

    def __post_init__(self):
        if self.sample_count <= 0:
            raise ValueError("sample_count must be positive")
        for m in self.models.values():
            check_compatible(m.params, m.shadow)


@dataclass
class GlobalState:
    shared: dict[str, ParamSet]
    epoch: int = 0


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: dict[int, dict[str, float]]


@dataclass
class TrainingReport:
    config: TrainConfig
    clients: list[ClientState]
    global_state: GlobalState
    metrics: list[dict]
    log: MessageLog
    partition: LayerPartition


def ema_update(shadow: ParamSet, live: ParamSet, alpha: float) -> ParamSet:
    """alpha * shadow + (1 - alpha) * live, element-wise."""
    check_compatible(shadow, live)
    beta = 1.0 - alpha
    return shadow.zip_map(live, lambda s, l: alpha * s + beta * l)


def aggregate(uploads: list[tuple[ParamSet, int]]) -> ParamSet:
    """Sample-count weighted average of uploaded shared tiers.

    Computed with compensated arithmetic, so a single upload or identical
    uploads are returned bit-for-bit.
    """
    if not uploads:
        raise ValueError("aggregate needs at least one upload")
    counts = [int(c) for _, c in uploads]
    if any(c <= 0 for c in counts):
        raise ValueError(f"sample counts must be positive, got {counts}")
    first = uploads[0][0]
    for p, _ in uploads[1:]:
        check_compatible(first, p)
    layers = []
    for i, layer in enumerate(first.layers):
        w = weighted_mean([p.layers[i].weight for p, _ in uploads], counts)
        b = weighted_mean([p.layers[i].bias for p, _ in uploads], counts)
        layers.append(Layer(layer.name, w, b))
    return ParamSet(layers)


def mixing_weights(counts: list[int]) -> list[float]:
    total = sum(counts)
    return [c / total for c in counts]


def compose_global(foundational: ParamSet | list[Layer], shared: ParamSet) -> ParamSet:
    """A subject's own foundational layers followed by the global shared tiers."""
    found = foundational.layers if isinstance(foundational, ParamSet) else list(foundational)
    if not found:
        raise ShapeError("no foundational layers supplied")
    width = found[-1].weight.shape[1]
    if shared.layers and shared.layers[0].weight.shape[0] != width:
        raise ShapeError(
            f"foundational output width {width} does not feed shared layer "
            f"{shared.layers[0].name!r} {shared.layers[0].weight.shape}"
        )
    layers = [Layer(l.name, l.weight.copy(), l.bias.copy()) for l in found]
    layers += [Layer(l.name, l.weight.copy(), l.bias.copy()) for l in shared.layers]
    return ParamSet(layers, found[0].weight.shape[0])


def shared_tier(params: ParamSet, partition: LayerPartition) -> ParamSet:
    return ParamSet(params.layers[partition.foundational_end :])


def foundational_tier(params: ParamSet, partition: LayerPartition) -> ParamSet:
    return ParamSet(params.layers[: partition.foundational_end], params.input_dim)


REFERENCE_OVERRIDES = {"ema_alpha": 0.95, "learning_rate": 6e-3}


def reference_config(**overrides) -> TrainConfig:
    """Training settings paired with :func:`brainfed.synthdata.reference_spec`.

    The desk-scale run has 16 optimizer steps per epoch, so the EMA factor is
    chosen to give roughly the same per-epoch decay as 0.999 over a large
    dataset, and the step size is raised to reach the overfitting regime
    within 100 epochs.
    """
    return TrainConfig(**{**REFERENCE_OVERRIDES, **overrides})


def standardize(data: SubjectDataset) -> SubjectDataset:
    """Z-score each input column with the subject's own training statistics."""
    mean = data.train_inputs.mean(axis=0)
    std = data.train_inputs.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    return SubjectDataset(
        data.subject_id,
        (data.train_inputs - mean) / std,
        data.train_image,
        data.train_text,
        (data.test_inputs - mean) / std,
    )


def _targets(data: SubjectDataset, modality: str) -> np.ndarray:
    return data.train_image if modality == "image" else data.train_text


def _batches(data: SubjectDataset, modality: str, order: np.ndarray, size: int):
    y = _targets(data, modality)
    return [(data.train_inputs[order[i : i + size]], y[order[i : i + size]]) for i in range(0, len(order), size)]


def synchronize(model: ModelState, shared: ParamSet, partition: LayerPartition, cfg: TrainConfig, dfl_batches):
    """Apply the configured synchronization rule; returns (params, fusion weights)."""
    if cfg.sync == "none":
        return model.params, model.fusion
    if cfg.sync == "retain_copy":
        zero = model.fusion.map(np.zeros_like)
        return fuse(model.params, shared, partition, zero), model.fusion
    copy_inter = cfg.sync == "full"
    w = model.fusion
    if dfl_batches:
        w = train_weights(model.params, shared, partition, w, dfl_batches, cfg.loss, cfg.dfl_steps, copy_inter)
    return fuse(model.params, shared, partition, w, copy_inter), w


def _sgd_step(params: ParamSet, velocity: ParamSet, grads: ParamSet, lr: float, mu: float):
    # step size folded into the buffer: same trajectory for a fixed lr, and
    # lr = 0 leaves every piece of state untouched
    velocity = velocity.zip_map(grads, lambda v, g: mu * v + lr * g)
    params = params.zip_map(velocity, lambda p, v: p - v)
    return params, velocity


def client_round(
    client: ClientState, broadcast: dict[str, ParamSet], cfg: TrainConfig, epoch: int
) -> tuple[ClientState, bytes, dict[str, float]]:
    """One epoch of local work. Returns the new state, the upload frame and mean losses."""
    client = ClientState(
        client.subject_id, client.sample_count, dict(client.models), copy.deepcopy(client.rng), client.data
    )
    partition = cfg.partition()
    n = client.data.sample_count
    losses: dict[str, float] = {}
    for modality in MODALITIES:
        model = client.models[modality]
        order = client.rng.permutation(n)
        batches = _batches(client.data, modality, order, cfg.batch_size)
        dfl_batches = batches[: min(5, len(batches))]
        params, w = synchronize(model, broadcast[modality], partition, cfg, dfl_batches)
        shadow, velocity = model.shadow, model.velocity
        total = 0.0
        for x, y in batches:
            pred, cache = forward(params, x)
            loss, g = modality_loss(pred, y, cfg.loss)
            total += loss
            grads = backward(params, cache, g)
            params, velocity = _sgd_step(params, velocity, grads, cfg.learning_rate, cfg.momentum)
            if not cfg.ema_per_epoch:
                shadow = ema_update(shadow, params, cfg.ema_alpha)
        if cfg.ema_per_epoch:
            shadow = ema_update(shadow, params, cfg.ema_alpha)
        client.models[modality] = ModelState(params, shadow, w, velocity)
        losses[modality] = total / len(batches)
    payload = codec.pack_modalities({m: shared_tier(client.models[m].shadow, partition) for m in MODALITIES})
    frame = ProtocolMessage(MessageKind.UPLOAD_SHADOW, client.subject_id, epoch, payload, client.sample_count).encode()
    return client, frame, losses


def run_epoch(
    clients: list[ClientState],
    global_state: GlobalState,
    cfg: TrainConfig,
    message_log: MessageLog | None = None,
    round_fn=client_round,
) -> tuple[list[ClientState], GlobalState, EpochMetrics]:
    """Run one synchronization cycle.

    Inputs are never modified; on any error nothing is returned and nothing is
    logged, so the caller still holds the epoch-start states.
    """
    epoch = global_state.epoch + 1
    order = sorted(clients, key=lambda c: c.subject_id)
    frames = []
    bcast = ProtocolMessage(
        MessageKind.BROADCAST_GLOBAL, COORDINATOR_ID, epoch, codec.pack_modalities(global_state.shared)
    ).encode()
    frames.append(bcast)
    received = codec.unpack_modalities(ProtocolMessage.decode(bcast).payload)

    if cfg.workers > 1 and len(order) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(lambda c: round_fn(c, received, cfg, epoch), order))
    else:
        results = [round_fn(c, received, cfg, epoch) for c in order]

    uploads: dict[str, list[tuple[ParamSet, int]]] = {m: [] for m in MODALITIES}
    for _, frame, _ in results:
        frames.append(frame)
        msg = ProtocolMessage.decode(frame)
        if msg.kind != MessageKind.UPLOAD_SHADOW:
            raise ValueError(f"unexpected {msg.kind.name} from client {msg.sender}")
        sets = codec.unpack_modalities(msg.payload)
        for m in MODALITIES:
            uploads[m].append((sets[m], msg.sample_count))
    new_shared = {m: aggregate(uploads[m]) for m in MODALITIES}

    if message_log is not None:
        for f in frames:
            message_log.record(f)
    new_clients = [r[0] for r in results]
    metrics = EpochMetrics(epoch, {c.subject_id: losses for c, _, losses in results})
    return new_clients, GlobalState(new_shared, epoch), metrics


def init_states(corpus: Corpus, cfg: TrainConfig) -> tuple[list[ClientState], GlobalState]:
    """Shared tiers from one common seed, foundational tiers per subject."""
    partition = cfg.partition()
    dims = {"image": corpus.image_dim, "text": corpus.text_dim}
    shared = {}
    for m in MODALITIES:
        template = init(cfg.network(1, dims[m]), Rng(cfg.seed, "shared", m))
        shared[m] = shared_tier(template, partition)
    clients = []
    for data in sorted(corpus.subjects, key=lambda s: s.subject_id):
        if cfg.standardize_inputs:
            data = standardize(data)
        models = {}
        for m in MODALITIES:
            own = init(cfg.network(data.input_dim, dims[m]), Rng(cfg.seed, "subject", data.subject_id, m))
            params = compose_global(foundational_tier(own, partition), shared[m])
            fusion = FusionWeights.ones(params, partition, cfg.dfl_eta)
            models[m] = ModelState(params, params.copy(), fusion, params.map(np.zeros_like))
        clients.append(
            ClientState(data.subject_id, data.sample_count, models, Rng(cfg.seed, "client", data.subject_id), data)
        )
    return clients, GlobalState({m: p.copy() for m, p in shared.items()}, 0)


def register(clients: list[ClientState], message_log: MessageLog | None) -> dict[int, int]:
    counts = {}
    for c in clients:
        msg = ProtocolMessage(MessageKind.REGISTER, c.subject_id, 0, b"", c.sample_count)
        received = message_log.send(msg) if message_log is not None else msg
        counts[received.sender] = received.sample_count
    return counts


def run_training(
    corpus: Corpus,
    cfg: TrainConfig,
    message_log: MessageLog | None = None,
    round_fn=client_round,
    on_epoch=None,
    on_state=None,
) -> TrainingReport:
    """Register clients, then run ``cfg.epochs`` epochs.

    ``on_epoch(metrics, records)`` fires after each evaluated epoch;
    ``on_state(snapshot, epoch)`` after every epoch, with ``snapshot.clients``
    and ``snapshot.global_state``.
    """
    if not corpus.subjects:
        raise ValueError("dataset has no subjects")
    from brainfed.evaluation import epoch_records

    if message_log is None:
        message_log = MessageLog()
    clients, global_state = init_states(corpus, cfg)
    register(clients, message_log)
    records: list[dict] = []
    for t in range(cfg.epochs):
        clients, global_state, em = run_epoch(clients, global_state, cfg, message_log, round_fn)
        if (t + 1) % cfg.eval_every == 0 or t + 1 == cfg.epochs:
            recs = epoch_records(corpus, clients, global_state, cfg, em)
            records.extend(recs)
            if on_epoch is not None:
                on_epoch(em, recs)
        if on_state is not None:
            on_state(SimpleNamespace(clients=clients, global_state=global_state), em.epoch)
        log.debug("epoch %d losses %s", em.epoch, em.train_loss)
    message_log.flush()
    return TrainingReport(cfg, clients, global_state, records, message_log, cfg.partition())


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
