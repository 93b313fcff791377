import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_adapters, random_base
from fedlora_bench.lora_model import (
    AdapterSet,
    BaseModel,
    LoraLayer,
    Prox,
    TrainConfig,
    base_forward,
    batch_schedule,
    evaluate,
    forward_with_adapters,
    generate_task,
    init_adapters,
    init_optimizer,
    local_train_step,
    loss_and_grads,
    pad_layer,
    pretrained_base,
    prox_gradient,
    train_centroid,
    truncate_layer,
)
from fedlora_bench.numerics import DimensionError, softmax_cross_entropy


def total_loss(base, adapters, x, y, prox=None):
    loss, _ = softmax_cross_entropy(forward_with_adapters(base, adapters, x), y)
    if prox is not None:
        for layer, anchor in zip(adapters.layers, prox.anchor.layers):
            if layer is not None:
                loss += 0.5 * prox.mu * (np.sum((layer.A - anchor.A) ** 2) + np.sum((layer.B - anchor.B) ** 2))
    return loss


def perturbed(adapters, i, which, idx, eps):
    layer = adapters[i]
    A, B = layer.A.copy(), layer.B.copy()
    (A if which == "A" else B)[idx] += eps
    return adapters.with_layers({i: LoraLayer(A, B, layer.alpha)})


def test_delta_is_scaled_product():
    rng = np.random.default_rng(0)
    layer = LoraLayer(rng.normal(size=(2, 5)), rng.normal(size=(4, 2)), 6.0)
    np.testing.assert_allclose(layer.delta(), 3.0 * layer.B @ layer.A)
    assert layer.shape == (4, 5) and layer.num_elements() == 2 * 5 + 4 * 2


def test_zero_b_leaves_base_output_unchanged():
    rng = np.random.default_rng(1)
    base = random_base(rng)
    adapters = init_adapters(base, 2, rng)
    x = rng.normal(size=(7, 6))
    assert np.array_equal(forward_with_adapters(base, adapters, x), base_forward(base, x))


def test_adapter_equals_merged_weight():
    # x @ (W + delta^T) equals the adapted forward pass
    rng = np.random.default_rng(2)
    base = random_base(rng)
    adapters = random_adapters(rng, base)
    merged = BaseModel(
        tuple(w + l.delta().T for w, l in zip(base.weights, adapters.layers)), base.biases, base.num_classes
    )
    x = rng.normal(size=(5, 6))
    np.testing.assert_allclose(forward_with_adapters(base, adapters, x), base_forward(merged, x), rtol=1e-12, atol=1e-12)


def test_init_rank_bounds():
    rng = np.random.default_rng(3)
    base = random_base(rng)
    with pytest.raises(ValueError):
        init_adapters(base, 0, rng)
    with pytest.raises(ValueError):
        init_adapters(base, 4, rng)  # last layer is 4 -> 3
    a = init_adapters(base, 3, rng)
    assert a.ranks == (3, 3, 3)
    assert all(not l.B.any() for l in a.layers)


def test_shape_mismatch_rejected():
    rng = np.random.default_rng(4)
    base = random_base(rng)
    bad = AdapterSet((LoraLayer(np.zeros((2, 5)), np.zeros((5, 2)), 2.0), None, None))
    with pytest.raises(DimensionError):
        forward_with_adapters(base, bad, np.zeros((1, 6)))


def test_base_model_is_read_only():
    base = random_base(np.random.default_rng(5))
    with pytest.raises(ValueError):
        base.weights[0][0, 0] = 1.0


def test_lora_gradients_match_central_differences():
    rng = np.random.default_rng(6)
    eps = 1e-6
    for _ in range(10):
        base = random_base(rng)
        adapters = random_adapters(rng, base, rank=int(rng.integers(1, 4)))
        x, y = rng.normal(size=(5, 6)), rng.integers(0, 3, size=5)
        _, grads = loss_and_grads(base, adapters, x, y)
        for i in range(base.num_layers):
            for k, which in enumerate("AB"):
                arr = getattr(adapters[i], which)
                for idx in np.ndindex(arr.shape):
                    up = total_loss(base, perturbed(adapters, i, which, idx, eps), x, y)
                    down = total_loss(base, perturbed(adapters, i, which, idx, -eps), x, y)
                    assert grads[i][k][idx] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-8)


def test_prox_gradient_matches_central_differences():
    rng = np.random.default_rng(7)
    base = random_base(rng)
    adapters = random_adapters(rng, base)
    prox = Prox(0.3, random_adapters(rng, base))
    x, y = rng.normal(size=(4, 6)), rng.integers(0, 3, size=4)
    _, grads = loss_and_grads(base, adapters, x, y)
    grads = prox_gradient(grads, adapters, prox)
    eps = 1e-6
    for i in range(base.num_layers):
        for k, which in enumerate("AB"):
            arr = getattr(adapters[i], which)
            for idx in np.ndindex(arr.shape):
                num = (total_loss(base, perturbed(adapters, i, which, idx, eps), x, y, prox)
                       - total_loss(base, perturbed(adapters, i, which, idx, -eps), x, y, prox)) / (2 * eps)
                assert grads[i][k][idx] == pytest.approx(num, rel=1e-5, abs=1e-8)


def test_prox_zero_mu_is_identity():
    rng = np.random.default_rng(8)
    base = random_base(rng)
    a = random_adapters(rng, base)
    _, grads = loss_and_grads(base, a, rng.normal(size=(3, 6)), np.array([0, 1, 2]))
    assert prox_gradient(grads, a, Prox(0.0, random_adapters(rng, base))) is grads


def test_local_step_leaves_base_untouched():
    rng = np.random.default_rng(9)
    base = random_base(rng)
    before = base.fingerprint()
    a = random_adapters(rng, base)
    states = init_optimizer(a, TrainConfig(learning_rate=1e-2))
    new, states, loss = local_train_step(base, a, (rng.normal(size=(4, 6)), np.array([0, 1, 2, 0])), states)
    assert base.fingerprint() == before
    assert not np.array_equal(new[0].A, a[0].A)
    assert states[(0, "A")].step_count == 1


def test_local_step_rejects_empty_batch():
    rng = np.random.default_rng(10)
    base = random_base(rng)
    a = random_adapters(rng, base)
    with pytest.raises(ValueError):
        local_train_step(base, a, (np.zeros((0, 6)), np.zeros(0, dtype=int)), init_optimizer(a, TrainConfig()))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(4, 8), st.integers(0, 2**31 - 1))
def test_padding_preserves_delta(rank, r_max, seed):
    rng = np.random.default_rng(seed)
    layer = LoraLayer(rng.normal(size=(rank, 9)), rng.normal(size=(8, rank)), float(rank))
    padded = pad_layer(layer, r_max)
    assert padded.rank == r_max
    assert np.array_equal(padded.B @ padded.A, layer.B @ layer.A)
    np.testing.assert_allclose(padded.delta(), layer.delta(), rtol=1e-14)
    back = truncate_layer(padded, rank)
    assert np.array_equal(back.A, layer.A) and np.array_equal(back.B, layer.B)
    assert back.scale == pytest.approx(layer.scale)


def test_pad_rejects_larger_rank():
    layer = LoraLayer(np.zeros((4, 5)), np.zeros((5, 4)), 4.0)
    with pytest.raises(ValueError):
        pad_layer(layer, 2)


def test_batch_schedule_covers_every_sample_once_per_epoch():
    sched = batch_schedule(37, 8, np.random.default_rng(0), epochs=2)
    assert [len(b) for b in sched] == [8, 8, 8, 8, 5] * 2
    assert sorted(np.concatenate(sched[:5])) == list(range(37))


def test_task_shards_depend_only_on_seed_and_client():
    small = generate_task(5, 3, 16, 8, 4, 0.5, hidden_dims=(8,), test_size=50)
    large = generate_task(5, 6, 16, 8, 4, 0.5, hidden_dims=(8,), test_size=50)
    for cid in range(3):
        assert np.array_equal(small.shard(cid).features, large.shard(cid).features)
        assert np.array_equal(small.shard(cid).labels, large.shard(cid).labels)
    assert np.array_equal(small.test.features, large.test.features)


def test_task_shapes_and_labels():
    task = generate_task(1, 4, 20, 8, 5, 0.3, hidden_dims=(8,), test_size=40)
    assert task.train_size == 80
    for s in task.shards:
        assert s.features.shape == (20, 8)
        assert s.labels.min() >= 0 and s.labels.max() < 5
    np.testing.assert_allclose(task.label_proportions.sum(axis=1), 1.0)


def test_low_concentration_skews_labels():
    skewed = generate_task(2, 20, 50, 8, 4, 0.05, hidden_dims=(8,), test_size=10)
    flat = generate_task(2, 20, 50, 8, 4, 100.0, hidden_dims=(8,), test_size=10)

    def top_share(task):
        return np.mean([np.bincount(s.labels, minlength=4).max() / len(s) for s in task.shards])

    assert top_share(skewed) > top_share(flat) + 0.2


def test_evaluate_teacher_is_perfect():
    task = generate_task(3, 2, 10, 8, 4, 1.0, hidden_dims=(8,), test_size=100)
    a = AdapterSet((None,) * task.teacher.num_layers)
    assert evaluate(task.teacher, a, task.test).accuracy == 1.0


def test_pretrained_base_is_noisier_teacher():
    task = generate_task(3, 2, 10, 8, 4, 1.0, hidden_dims=(8,), test_size=300)
    noisy = pretrained_base(task.teacher, 3, 0.5)
    a = AdapterSet((None,) * noisy.num_layers)
    assert evaluate(noisy, a, task.test).accuracy < 1.0
    assert np.array_equal(pretrained_base(task.teacher, 3, 0.0).weights[0], task.teacher.weights[0])


def test_centroid_training_improves_accuracy():
    task = generate_task(4, 10, 32, 16, 4, 0.5, hidden_dims=(16,), test_size=300)
    base = pretrained_base(task.teacher, 4, 0.6)
    pre = evaluate(base, init_adapters(base, 4, np.random.default_rng(0)), task.test).accuracy
    hist = train_centroid(base, task, 5, TrainConfig(learning_rate=1e-2), seed=4, rank=4)
    assert [r for r, _ in hist] == [1, 2, 3, 4, 5]
    assert max(e.accuracy for _, e in hist) > pre
