import math

import numpy as np
import pytest

from brainfed.codec import params_digest
from brainfed.fusion import FusionWeights, fuse, fusion_gradient, train_weights
from brainfed.losses import LossConfig, modality_loss
from brainfed.network import Layer, LayerPartition, NetworkConfig, ParamSet, ShapeError, forward, init
from brainfed.numerics import Rng

CFG = NetworkConfig(input_dim=5, hidden_dim=6, num_residual_blocks=2, output_tokens=2, token_dim=2)
PART = CFG.default_partition()  # (1, 3, 5), m = 2


def pair(seed=0):
    local = init(CFG, Rng(seed, "local"))
    glob = init(CFG, Rng(seed, "global"))
    return local, glob


def batches(seed=0, n=3, b=4):
    rng = Rng(seed, "data")
    return [(rng.gaussian((b, 5)), rng.gaussian((b, 4))) for _ in range(n)]


def test_weights_start_at_one():
    local, _ = pair()
    w = FusionWeights.ones(local, PART)
    assert w.m == PART.m
    assert all(np.all(t == 1.0) for t in w.tensors())


def test_fuse_all_ones_takes_global_on_shared_tiers():
    local, glob = pair()
    out = fuse(local, glob, PART, FusionWeights.ones(local, PART))
    for i in range(PART.foundational_end):
        assert out.layers[i].weight.tobytes() == local.layers[i].weight.tobytes()
    for i in range(PART.foundational_end, PART.total):
        assert out.layers[i].weight.tobytes() == glob.layers[i].weight.tobytes()
        assert out.layers[i].bias.tobytes() == glob.layers[i].bias.tobytes()


def test_fuse_all_zeros_keeps_local_advanced():
    local, glob = pair()
    out = fuse(local, glob, PART, FusionWeights.constant(local, PART, 0.0))
    for i in range(PART.total):
        src = glob if PART.foundational_end <= i < PART.intermediate_end else local
        assert out.layers[i].weight.tobytes() == src.layers[i].weight.tobytes()


def test_fuse_scalar_blend():
    local = ParamSet([Layer("input", np.ones((1, 1)), np.zeros(1)), Layer("output", np.full((1, 1), 2.0), np.zeros(1))])
    glob = ParamSet([Layer("input", np.ones((1, 1)), np.zeros(1)), Layer("output", np.full((1, 1), 4.0), np.zeros(1))])
    part = LayerPartition(1, 1, 2)
    out = fuse(local, glob, part, FusionWeights.constant(local, part, 0.5))
    assert out.layers[1].weight[0, 0] == 3.0


def test_fuse_accepts_shared_only_global_and_leaves_inputs_alone():
    local, glob = pair()
    shared = ParamSet(glob.layers[PART.foundational_end :])
    before = params_digest(local), params_digest(glob)
    w = FusionWeights.constant(local, PART, 0.3)
    assert fuse(local, shared, PART, w).equals(fuse(local, glob, PART, w))
    assert (params_digest(local), params_digest(glob)) == before


def test_fuse_shape_error_names_layer():
    local, glob = pair()
    glob.layers[3] = Layer("hidden", np.zeros((6, 5)), np.zeros(5))
    with pytest.raises(ShapeError, match="hidden"):
        fuse(local, glob, PART, FusionWeights.ones(local, PART))


def test_fuse_idempotent_in_overwrite_regime():
    local, glob = pair()
    w = FusionWeights.ones(local, PART)
    once = fuse(local, glob, PART, w)
    twice = fuse(once, glob, PART, w)
    for i in range(PART.foundational_end, PART.total):
        assert twice.layers[i].weight.tobytes() == once.layers[i].weight.tobytes()


def test_identical_models_give_zero_weight_gradient():
    local, _ = pair()
    w = FusionWeights.constant(local, PART, 0.7)
    new = train_weights(local, local.copy(), PART, w, batches(), steps=3)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(new.tensors(), w.tensors()))


def scalar_gelu(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def test_one_step_on_scalar_model_matches_chain_rule():
    # input layer 1x1 (retained) + output layer 1x1 fused; B = 1 so the
    # contrastive term is identically zero and the loss is (out - y)^2
    w0, b0, ws, bs, wg, bg = 0.8, 0.1, 1.5, 0.2, -0.5, 0.6
    x, y, eta, W, Wb = 0.9, 0.3, 0.05, 0.4, 0.7
    local = ParamSet([Layer("input", np.array([[w0]]), np.array([b0])), Layer("output", np.array([[ws]]), np.array([bs]))])
    glob = ParamSet([Layer("input", np.array([[w0]]), np.array([b0])), Layer("output", np.array([[wg]]), np.array([bg]))])
    part = LayerPartition(1, 1, 2)
    w = FusionWeights([Layer("output", np.array([[W]]), np.array([Wb]))], learning_rate=eta)

    h = scalar_gelu(x * w0 + b0)
    wf = ws + (wg - ws) * W
    bf = bs + (bg - bs) * Wb
    out = h * wf + bf
    dl_dout = 2.0 * (out - y)
    expected_w = min(1.0, max(0.0, W - eta * dl_dout * h * (wg - ws)))
    expected_b = min(1.0, max(0.0, Wb - eta * dl_dout * (bg - bs)))

    new = train_weights(local, glob, part, w, [(np.array([[x]]), np.array([[y]]))], steps=1)
    assert abs(new.layers[0].weight[0, 0] - expected_w) <= 1e-12
    assert abs(new.layers[0].bias[0] - expected_b) <= 1e-12


def test_weight_gradient_matches_finite_differences():
    local, glob = pair(3)
    rng = Rng(3, "w")
    w = FusionWeights.ones(local, PART).map(lambda t: rng.uniform(t.shape, 0.2, 0.8))
    batch = batches(3)[0]
    cfg = LossConfig()
    _, grad = fusion_gradient(local, glob, PART, w, batch, cfg)

    def loss_at(weights):
        pred, _ = forward(fuse(local, glob, PART, weights), batch[0])
        return modality_loss(pred, batch[1], cfg)[0]

    eps = 1e-6
    fd_all, an_all = [], []
    for li, layer in enumerate(w.layers):
        for which in ("weight", "bias"):
            t = getattr(layer, which)
            for idx in np.ndindex(t.shape):
                orig = t[idx]
                t[idx] = orig + eps
                up = loss_at(w)
                t[idx] = orig - eps
                down = loss_at(w)
                t[idx] = orig
                fd_all.append((up - down) / (2 * eps))
                an_all.append(getattr(grad[li], which)[idx])
    fd_all, an_all = np.array(fd_all), np.array(an_all)
    assert np.linalg.norm(fd_all - an_all) / np.linalg.norm(fd_all) <= 1e-5


def test_train_weights_keeps_inputs_frozen():
    local, glob = pair(4)
    before = params_digest(local), params_digest(glob)
    train_weights(local, glob, PART, FusionWeights.ones(local, PART, 0.5), batches(4), steps=10)
    assert (params_digest(local), params_digest(glob)) == before


def test_clip_bounds_hold_after_many_steps():
    local, glob = pair(5)
    glob = glob.map(lambda t: 2.0 * t)
    w = train_weights(local, glob, PART, FusionWeights.ones(local, PART, 5.0), batches(5), steps=200)
    ts = np.concatenate([t.ravel() for t in w.tensors()])
    assert ts.min() >= 0.0 and ts.max() <= 1.0


def test_small_step_does_not_increase_loss():
    local, glob = pair(6)
    batch = batches(6)[0]
    cfg = LossConfig()
    rng = Rng(6, "w")
    w0 = FusionWeights.ones(local, PART, 1e-3).map(lambda t: rng.uniform(t.shape, 0.1, 0.9))
    before, _ = fusion_gradient(local, glob, PART, w0, batch, cfg)
    w1 = train_weights(local, glob, PART, w0, [batch], cfg, steps=1)
    after, _ = fusion_gradient(local, glob, PART, w1, batch, cfg)
    assert after <= before + 1e-9


def test_empty_batches_rejected():
    local, glob = pair()
    with pytest.raises(ValueError):
        train_weights(local, glob, PART, FusionWeights.ones(local, PART), [])
