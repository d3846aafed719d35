import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainfed.evaluation import alignment_score, evaluate_global, retrieval_accuracy
from brainfed.losses import NormalizationError
from brainfed.protocol import TrainConfig, run_training
from brainfed.synthdata import SyntheticSpec, generate


def rand(seed, shape):
    return np.random.default_rng(seed).normal(size=shape)


def test_self_retrieval_is_perfect():
    t = rand(0, (128, 32))
    assert retrieval_accuracy(t, t, 1) == 1.0


def test_k_equal_n_is_perfect():
    p, t = rand(1, (20, 5)), rand(2, (20, 5))
    assert retrieval_accuracy(p, t, 20) == 1.0


def test_random_predictions_are_near_chance():
    for seed in range(5):
        acc = retrieval_accuracy(rand(10 + seed, (128, 32)), rand(20 + seed, (128, 32)), 1)
        assert 0.0 <= acc <= 0.05


def test_ties_go_to_lower_index():
    targets = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    preds = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    # row 1 ties with row 0 and loses the tie
    assert retrieval_accuracy(preds, targets, 1) == pytest.approx(2 / 3)
    assert retrieval_accuracy(preds, targets, 2) == 1.0


def test_hand_example_top1():
    targets = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    preds = np.array([[0.9, 0.1], [0.8, 0.2], [-1.0, 0.5]])
    # row 1 points closer to target 0, the others are correct
    assert retrieval_accuracy(preds, targets, 1) == pytest.approx(2 / 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, scale):
    p, t = rand(seed, (16, 6)), rand(seed + 1, (16, 6))
    for k in (1, 3):
        assert retrieval_accuracy(p * scale, t, k) == retrieval_accuracy(p, t, k)


def test_zero_row_rejected():
    p = rand(3, (4, 3))
    p[2] = 0.0
    with pytest.raises(NormalizationError, match="row 2"):
        retrieval_accuracy(p, rand(4, (4, 3)), 1)


def test_retrieval_shape_checks():
    with pytest.raises(ValueError):
        retrieval_accuracy(rand(0, (1, 3)), rand(0, (1, 3)), 1)
    with pytest.raises(ValueError):
        retrieval_accuracy(rand(0, (4, 3)), rand(0, (4, 2)), 1)


def test_alignment_hand_value():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[1.0, 1.0], [0.0, 1.0]])
    r = 1 / np.sqrt(2)
    matched = (r + 1.0) / 2
    mismatched = (0.0 + r) / 2
    assert abs(alignment_score([a, b]) - (matched - mismatched)) <= 1e-12


def test_alignment_identical_predictions():
    p = rand(5, (30, 8))
    score = alignment_score([p, p.copy(), p.copy()])
    u = p / np.linalg.norm(p, axis=1, keepdims=True)
    c = u @ u.T
    mismatched = (c.sum() - np.trace(c)) / (30 * 29)
    assert score == pytest.approx(1.0 - mismatched, abs=1e-12)
    assert mismatched < 1.0


def test_alignment_random_is_near_zero():
    for seed in range(5):
        preds = [rand(100 * seed + s, (128, 32)) for s in range(4)]
        assert abs(alignment_score(preds)) <= 0.05


def test_alignment_symmetric_under_permutation():
    preds = [rand(s, (12, 4)) + rand(99, (12, 4)) for s in range(3)]
    base = alignment_score(preds)
    for perm in ([2, 0, 1], [1, 2, 0], [2, 1, 0]):
        assert alignment_score([preds[i] for i in perm]) == pytest.approx(base, abs=1e-15)


def test_alignment_needs_two_subjects():
    with pytest.raises(ValueError):
        alignment_score([rand(0, (4, 3))])


TINY = SyntheticSpec(num_subjects=1, voxel_dims=(10,), train_per_subject=40, shared_test_count=16, canaries=0)
FAST = dict(hidden_dim=12, num_residual_blocks=2, advanced_layers=1, batch_size=16, learning_rate=1e-2, epochs=3)


def test_single_subject_global_equals_ema_model_at_alpha_zero():
    corpus = generate(TINY)
    report = run_training(corpus, TrainConfig(**FAST, ema_alpha=0.0))
    m = evaluate_global(corpus, report.clients, report.global_state)[0]
    assert m["global_top1"] == m["ema_top1"] == m["top1"]


def test_evaluation_is_deterministic():
    corpus = generate(TINY)
    runs = [run_training(corpus, TrainConfig(**FAST, ema_alpha=0.5)) for _ in range(2)]
    a, b = (evaluate_global(corpus, r.clients, r.global_state) for r in runs)
    assert a == b
    assert runs[0].metrics == runs[1].metrics
