"""Privacy-preserving collaborative training of per-subject brain-decoding models."""

from brainfed.codec import MessageLog, ProtocolMessage, load_checkpoint, save_checkpoint
from brainfed.evaluation import alignment_score, evaluate_global, retrieval_accuracy
from brainfed.fusion import FusionWeights, fuse, train_weights
from brainfed.losses import LossConfig, modality_loss, mse, softclip
from brainfed.network import LayerPartition, NetworkConfig, ParamSet, backward, forward, init, slice_view
from brainfed.numerics import Rng, gaussian, hadamard, matmul
from brainfed.protocol import (
    TrainConfig,
    aggregate,
    compose_global,
    ema_update,
    run_epoch,
    reference_config,
    run_training,
)
from brainfed.synthdata import SyntheticSpec, generate, read_dataset, reference_spec, write_dataset

__version__ = "0.1.0"
