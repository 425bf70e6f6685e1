import math

import numpy as np
import pytest

from fedbench.errors import DegenerateBatch, ShapeMismatch
from fedbench.nn import (
    Batch,
    LayerSpec,
    ModelSpec,
    apply_running_stats,
    init_params,
    model_forward,
    norm_forward,
)

from conftest import make_model, random_batch


def test_zero_weight_dense_softmax_gives_uniform():
    spec = ModelSpec(
        input_dim=4,
        layers=[LayerSpec(kind="dense", width=3), LayerSpec(kind="softmax_ce_head")],
        loss="cross_entropy",
        num_classes=3,
    )
    params = init_params(spec, seed=0)
    params.entries["layer0.weight"][:] = 0.0
    params.entries["layer0.bias"][:] = 0.0
    batch = Batch.from_arrays(np.random.default_rng(1).standard_normal((5, 4)), [0, 1, 2, 0, 1])
    probs, loss, _ = model_forward(spec, params, batch, mode="eval")
    assert np.allclose(probs, 1.0 / 3.0)
    assert loss == pytest.approx(math.log(3.0), abs=1e-12)


def test_layer_norm_standardizes_arithmetic_sequence():
    x = np.array([[1.0, 2.0, 3.0]])
    y, _, _ = norm_forward("layer_norm", x, np.ones(3), np.zeros(3), None, "train", 0.0)
    expected = np.array([[-1.2247448713915890, 0.0, 1.2247448713915890]])
    assert np.allclose(y, expected, atol=1e-12)


def test_group_norm_two_point_groups():
    x = np.array([[1.0, 3.0, 5.0, 7.0]])
    y, _, _ = norm_forward("group_norm", x, np.ones(4), np.zeros(4), None, "train", 0.0, groups=2)
    assert np.allclose(y, [[-1.0, 1.0, -1.0, 1.0]], atol=1e-12)


def test_constant_batch_bn_output_is_bias():
    x = np.ones((4, 3)) * 2.5
    gain = np.full(3, 1.7)
    bias = np.array([0.1, -0.2, 0.3])
    stats = (np.zeros(3), np.ones(3))
    y, _, _ = norm_forward("batch_norm", x, gain, bias, stats, "train", 1e-5)
    assert np.allclose(y, np.broadcast_to(bias, (4, 3)), atol=1e-6)


def test_bn_running_stat_ema_single_step():
    x = np.array([[1.0], [3.0]])  # batch mean 2.0
    stats = (np.zeros(1), np.ones(1))
    _, (new_mean, new_var), _ = norm_forward(
        "batch_norm", x, np.ones(1), np.zeros(1), stats, "train", 1e-5, momentum=0.1
    )
    assert new_mean[0] == pytest.approx(0.2, abs=1e-15)
    assert new_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * 1.0, abs=1e-15)  # batch var = 1


def test_mlp_loss_matches_scalar_oracle():
    # straight-line scalar recomputation of dense -> relu -> dense -> softmax CE
    spec = make_model([], input_dim=3, hidden=4, num_classes=2)
    params = init_params(spec, seed=0)
    batch = random_batch(spec, 8, seed=7)
    _, loss, _ = model_forward(spec, params, batch, mode="train")

    w0, b0 = params.entries["layer0.weight"], params.entries["layer0.bias"]
    w2, b2 = params.entries["layer2.weight"], params.entries["layer2.bias"]
    total = 0.0
    for r in range(8):
        h = [sum(batch.inputs[r][i] * w0[i][j] for i in range(3)) + b0[j] for j in range(4)]
        h = [v if v > 0 else 0.0 for v in h]
        z = [sum(h[j] * w2[j][c] for j in range(4)) + b2[c] for c in range(2)]
        denom = sum(math.exp(v) for v in z)
        total += -math.log(math.exp(z[int(batch.labels[r])]) / denom)
    assert loss == pytest.approx(total / 8, rel=1e-12)


def test_eval_mode_bitwise_deterministic(bn_model, seeded_params):
    batch = random_batch(bn_model, 6, seed=3)
    p1, l1, _ = model_forward(bn_model, seeded_params, batch, mode="eval")
    p2, l2, _ = model_forward(bn_model, seeded_params, batch, mode="eval")
    assert np.array_equal(p1, p2)
    assert l1 == l2


def test_loss_permutation_invariance(bn_model, seeded_params):
    batch = random_batch(bn_model, 8, seed=5)
    perm = np.random.default_rng(0).permutation(8)
    shuffled = Batch.from_arrays(batch.inputs[perm], batch.labels[perm])
    _, l1, _ = model_forward(bn_model, seeded_params, batch, mode="train")
    _, l2, _ = model_forward(bn_model, seeded_params, shuffled, mode="train")
    assert l1 == pytest.approx(l2, abs=1e-12)


def test_bn_train_batch_of_one_rejected(bn_model, seeded_params):
    batch = random_batch(bn_model, 1, seed=3)
    with pytest.raises(DegenerateBatch):
        model_forward(bn_model, seeded_params, batch, mode="train")


def test_wrong_input_dim_rejected(bn_model, seeded_params):
    batch = Batch.from_arrays(np.zeros((4, 7)), np.zeros(4, dtype=int))
    with pytest.raises(ShapeMismatch):
        model_forward(bn_model, seeded_params, batch, mode="train")


def test_running_stats_committed_only_on_apply(bn_model, seeded_params):
    batch = random_batch(bn_model, 8, seed=5)
    before = seeded_params.entries["layer1.running_mean"].copy()
    _, _, cache = model_forward(bn_model, seeded_params, batch, mode="train")
    assert np.array_equal(seeded_params.entries["layer1.running_mean"], before)
    apply_running_stats(seeded_params, cache)
    assert not np.array_equal(seeded_params.entries["layer1.running_mean"], before)


def test_bce_head_on_multi_hot_labels():
    spec = ModelSpec(
        input_dim=3,
        layers=[LayerSpec(kind="dense", width=2), LayerSpec(kind="sigmoid_bce_head")],
        loss="binary_cross_entropy",
        num_classes=2,
    )
    params = init_params(spec, seed=1)
    params.entries["layer0.weight"][:] = 0.0
    batch = Batch.from_arrays(np.zeros((3, 3)), np.array([[1, 0], [0, 1], [1, 1]], dtype=float))
    probs, loss, _ = model_forward(spec, params, batch, mode="eval")
    assert np.allclose(probs, 0.5)
    assert loss == pytest.approx(math.log(2.0), rel=1e-9)
