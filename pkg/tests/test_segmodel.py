import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapereplay.segmodel import (
    FEATURE_DIM,
    DecoderHead,
    Encoder,
    FrozenEncoderError,
    TrainingDiverged,
    TrainSchedule,
    cross_entropy,
    cross_entropy_grad,
    expand_head,
    head_checkpoint_bytes,
    head_from_bytes,
    head_to_bytes,
    init_head,
    load_head,
    poly_lr,
    predict_labels,
    predict_logits,
    save_head,
    train_head,
)


# ---------------------------------------------------------------------------
# encoder


def test_encoder_output_shape(encoder, step0_data):
    fmap = encoder.encode(step0_data.images[0])
    assert fmap.shape == (64, 64, FEATURE_DIM)
    assert fmap.dtype == np.float32


def test_encoder_requires_fit(step0_data):
    enc = Encoder()
    with pytest.raises(ValueError):
        enc.encode(step0_data.images[0])
    with pytest.raises(ValueError):
        enc.freeze()


def test_encoder_freeze_blocks_refit(step0_data):
    enc = Encoder()
    enc.fit(step0_data.images)
    enc.freeze()
    with pytest.raises(FrozenEncoderError):
        enc.fit(step0_data.images)


def test_encoder_checksum_tracks_parameters(step0_data):
    a = Encoder().fit(step0_data.images[:8])
    b = Encoder().fit(step0_data.images[:8])
    c = Encoder().fit(step0_data.images[8:])
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()


def test_encoder_batch_matches_single(encoder, step0_data):
    batch = encoder.encode_batch(step0_data.images[:5])
    singles = np.stack([encoder.encode(img) for img in step0_data.images[:5]])
    assert np.array_equal(batch, singles)


def test_encoder_fit_uses_prefix_only(step0_data):
    a = Encoder().fit(step0_data.images, max_images=8)
    b = Encoder().fit(step0_data.images[:8])
    assert a.checksum() == b.checksum()


# ---------------------------------------------------------------------------
# heads


def test_init_head_sorted_and_zero():
    head = init_head([3, 1, 2])
    assert head.class_ids == (1, 2, 3)
    assert not head.weights.any()
    assert not head.bias.any()


def test_zero_head_predicts_lowest_id(rng):
    head = init_head([2, 5, 7])
    feats = rng.normal(size=(10, FEATURE_DIM))
    assert (predict_labels(head, feats) == 2).all()


def test_expand_head_keeps_old_parameters(rng):
    head = DecoderHead((0, 1, 4), rng.normal(size=(FEATURE_DIM, 3)), rng.normal(size=3))
    grown = expand_head(head, [2, 6])
    assert grown.class_ids == (0, 1, 2, 4, 6)
    for cid in head.class_ids:
        assert np.array_equal(grown.weights[:, grown.column_of(cid)],
                              head.weights[:, head.column_of(cid)])
        assert grown.bias[grown.column_of(cid)] == head.bias[head.column_of(cid)]
    for cid in (2, 6):
        assert not grown.weights[:, grown.column_of(cid)].any()


def test_expand_head_rejects_collisions():
    head = init_head([0, 1])
    with pytest.raises(ValueError):
        expand_head(head, [1])
    with pytest.raises(ValueError):
        expand_head(head, [])


def test_head_validation(rng):
    with pytest.raises(ValueError):
        DecoderHead((2, 1), np.zeros((FEATURE_DIM, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        DecoderHead((1, 2), np.zeros((FEATURE_DIM, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        DecoderHead((), np.zeros((FEATURE_DIM, 0)), np.zeros(0))


def test_predict_restrict(rng):
    head = DecoderHead((0, 3, 5), rng.normal(size=(FEATURE_DIM, 3)), rng.normal(size=3))
    feats = rng.normal(size=(20, FEATURE_DIM))
    full = predict_labels(head, feats)
    sub = predict_labels(head, feats, restrict=[0, 5])
    assert set(np.unique(sub)) <= {0, 5}
    # where the unrestricted winner is allowed, restriction must agree
    agree = np.isin(full, [0, 5])
    assert np.array_equal(full[agree], sub[agree])
    with pytest.raises(ValueError):
        predict_labels(head, feats, restrict=[4])


# ---------------------------------------------------------------------------
# loss and gradients


def test_cross_entropy_matches_hand_computation():
    # two pixels, three classes; oracle computed from the definition
    logits = np.array([[1.0, 0.0, -1.0], [0.5, 0.5, 0.5]])
    targets = np.array([4, 7])
    ids = (2, 4, 7)
    p0 = np.exp(logits[0]) / np.exp(logits[0]).sum()
    p1 = np.exp(logits[1]) / np.exp(logits[1]).sum()
    expected = -(np.log(p0[1]) + np.log(p1[2])) / 2.0
    assert cross_entropy(logits, targets, ids) == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_uniform_logits():
    logits = np.zeros((6, 4))
    loss = cross_entropy(logits, np.full(6, 3), (1, 2, 3, 9))
    assert loss == pytest.approx(np.log(4.0), rel=1e-12)


def test_cross_entropy_rejects_unknown_targets():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 2)), np.array([0, 5]), (0, 1))


def test_cross_entropy_shift_invariance(rng):
    logits = rng.normal(size=(12, 5))
    targets = rng.integers(0, 5, size=12)
    a = cross_entropy(logits, targets, range(5))
    b = cross_entropy(logits + 1000.0, targets, range(5))
    assert a == pytest.approx(b, rel=1e-9)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_cross_entropy_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    n, c = 6, 4
    logits = rng.normal(size=(n, c))
    targets = rng.integers(0, c, size=n)
    _, grad = cross_entropy_grad(logits, targets, range(c))
    eps = 1e-5
    for _ in range(4):
        i, j = rng.integers(0, n), rng.integers(0, c)
        bumped = logits.copy()
        bumped[i, j] += eps
        up = cross_entropy(bumped, targets, range(c))
        bumped[i, j] -= 2 * eps
        down = cross_entropy(bumped, targets, range(c))
        fd = (up - down) / (2 * eps)
        denom = max(abs(fd), 1e-8)
        assert abs(grad[i, j] - fd) / denom < 1e-4


def test_gradient_rows_sum_to_zero(rng):
    logits = rng.normal(size=(9, 5))
    targets = rng.integers(0, 5, size=9)
    _, grad = cross_entropy_grad(logits, targets, range(5))
    assert np.allclose(grad.sum(axis=1), 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# schedule and training


def test_poly_lr_endpoints():
    sched = TrainSchedule(total_steps=100, initial_lr=0.1, final_lr=0.01, power=0.9)
    assert poly_lr(0, sched) == pytest.approx(0.1)
    assert poly_lr(100, sched) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        poly_lr(101, sched)


def test_poly_lr_linear_when_power_one():
    sched = TrainSchedule(total_steps=10, initial_lr=1.0, final_lr=0.0, power=1.0)
    for t in range(11):
        assert poly_lr(t, sched) == pytest.approx(1.0 - t / 10)


def test_poly_lr_monotone_decreasing():
    sched = TrainSchedule(total_steps=50, initial_lr=0.05, final_lr=0.001, power=0.9)
    vals = [poly_lr(t, sched) for t in range(51)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainSchedule(total_steps=0)
    with pytest.raises(ValueError):
        TrainSchedule(total_steps=5, initial_lr=0.1, final_lr=0.2)


def _separable_batches(rng, steps, n=40):
    """Two classes split cleanly by the first feature."""
    for _ in range(steps):
        feats = rng.normal(size=(n, FEATURE_DIM))
        targets = np.where(feats[:, 0] > 0, 1, 0)
        feats[:, 0] += np.where(targets == 1, 2.0, -2.0)
        yield feats, targets


def test_train_head_learns_separable_problem(rng):
    head = init_head([0, 1])
    sched = TrainSchedule(total_steps=60, initial_lr=0.5, final_lr=0.05)
    trained, losses = train_head(head, _separable_batches(rng, 60), sched)
    assert losses[-1] < 0.1 < losses[0]
    feats = rng.normal(size=(200, FEATURE_DIM))
    targets = np.where(feats[:, 0] > 0, 1, 0)
    feats[:, 0] += np.where(targets == 1, 2.0, -2.0)
    acc = (predict_labels(trained, feats) == targets).mean()
    assert acc > 0.95
    # the input head stays untouched
    assert not head.weights.any()


def test_train_head_respects_start_step(rng):
    """Pausing and resuming walks the same learning-rate schedule."""
    head = init_head([0, 1])
    sched = TrainSchedule(total_steps=40, initial_lr=0.3, final_lr=0.03)
    batches = list(_separable_batches(rng, 40))
    full, _ = train_head(head, batches, sched)
    first, _ = train_head(head, batches[:25], sched)
    resumed, _ = train_head(first, batches[25:], sched, start_step=25)
    assert np.allclose(resumed.weights, full.weights, atol=1e-12)
    assert np.allclose(resumed.bias, full.bias, atol=1e-12)


def test_train_head_overlong_stream_raises(rng):
    sched = TrainSchedule(total_steps=3, initial_lr=0.1, final_lr=0.01)
    with pytest.raises(ValueError):
        train_head(init_head([0, 1]), _separable_batches(rng, 4), sched)


def test_train_head_divergence_detected(rng):
    # labels uncorrelated with features keep the gradient alive, so an
    # absurd learning rate must blow the weights up to non-finite values
    def noisy(steps):
        for _ in range(steps):
            yield rng.normal(size=(8, FEATURE_DIM)), rng.integers(0, 2, size=8)

    sched = TrainSchedule(total_steps=200, initial_lr=1e308, final_lr=1.0)
    with pytest.raises(TrainingDiverged) as info:
        with np.errstate(over="ignore", invalid="ignore"):
            train_head(init_head([0, 1]), noisy(200), sched)
    assert not np.isfinite(info.value.loss)


def test_train_head_float32_batches_give_float64_head(rng):
    head = init_head([0, 1])
    sched = TrainSchedule(total_steps=5, initial_lr=0.1, final_lr=0.01)
    batches = [(f.astype(np.float32), t) for f, t in _separable_batches(rng, 5)]
    trained, _ = train_head(head, batches, sched)
    assert trained.weights.dtype == np.float64
    assert trained.bias.dtype == np.float64


def test_train_head_empty_stream(rng):
    head = init_head([0, 1])
    sched = TrainSchedule(total_steps=5, initial_lr=0.1, final_lr=0.01)
    trained, losses = train_head(head, [], sched)
    assert losses == []
    assert np.array_equal(trained.weights, head.weights)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(rng, tmp_path):
    head = DecoderHead((0, 2, 7), rng.normal(size=(FEATURE_DIM, 3)), rng.normal(size=3))
    blob = head_to_bytes(head)
    back = head_from_bytes(blob)
    assert back.class_ids == head.class_ids
    # parameters travel as float32 by design
    assert np.array_equal(back.weights, head.weights.astype(np.float32).astype(np.float64))
    assert np.array_equal(back.bias, head.bias.astype(np.float32).astype(np.float64))
    path = tmp_path / "head.bin"
    save_head(str(path), head)
    loaded = load_head(str(path))
    assert loaded.class_ids == head.class_ids
    assert np.array_equal(loaded.weights, back.weights)


def test_checkpoint_declared_size_matches(rng):
    head = DecoderHead((1, 3), rng.normal(size=(FEATURE_DIM, 2)), rng.normal(size=2))
    assert head_checkpoint_bytes(head) == len(head_to_bytes(head))


def test_checkpoint_rejects_corruption(rng):
    head = init_head([0, 1])
    blob = bytearray(head_to_bytes(head))
    blob[0] ^= 0xFF
    with pytest.raises(ValueError):
        head_from_bytes(bytes(blob))
    with pytest.raises(ValueError):
        head_from_bytes(head_to_bytes(head)[:-3])


def test_checkpoint_stable_bytes(rng):
    head = DecoderHead((0, 4), rng.normal(size=(FEATURE_DIM, 2)), rng.normal(size=2))
    assert head_to_bytes(head) == head_to_bytes(head)
