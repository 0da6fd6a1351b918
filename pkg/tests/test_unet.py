import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nephroseg.errors import DivergenceError, DomainError, ShapeError, ValidationError
from nephroseg.unet import layers as L
from nephroseg.unet.loss import tversky_index, tversky_loss, tversky_loss_grad
from nephroseg.unet.network import (
    NetworkArchitecture,
    NetworkParameters,
    backward,
    forward,
    init_parameters,
    zero_parameters,
)
from nephroseg.unet.train import (
    Checkpoint,
    TrainConfig,
    best_checkpoint,
    checkpoint_from_json,
    checkpoint_to_json,
    load_checkpoint,
    loss_log_csv,
    predict_probabilities,
    predict_volume,
    save_checkpoint,
    train,
    train_fold,
)
from nephroseg.volume import LabelMap, StudyRecord, VolumeGrid


# -- naive reference network -------------------------------------------------

def naive_conv3(x, w, b):
    """Loop-by-loop same-padded 3x3x3 convolution on one (X, Y, Z, C) array."""
    sx, sy, sz, cin = x.shape
    cout = w.shape[0]
    out = np.zeros((sx, sy, sz, cout))
    for i, j, k in itertools.product(range(sx), range(sy), range(sz)):
        for co in range(cout):
            acc = b[co]
            for a, bb, c in itertools.product(range(3), repeat=3):
                u, v, t = i + a - 1, j + bb - 1, k + c - 1
                if 0 <= u < sx and 0 <= v < sy and 0 <= t < sz:
                    for ci in range(cin):
                        acc += w[co, ci, a, bb, c] * x[u, v, t, ci]
            out[i, j, k, co] = acc
    return out


def naive_pool(x):
    sx, sy, sz, c = x.shape
    out = np.zeros((sx // 2, sy // 2, sz // 2, c))
    for i, j, k, ch in itertools.product(range(sx // 2), range(sy // 2), range(sz // 2), range(c)):
        out[i, j, k, ch] = x[2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * k:2 * k + 2, ch].max()
    return out


def naive_upconv(x, w, b):
    sx, sy, sz, cin = x.shape
    cout = w.shape[1]
    out = np.zeros((2 * sx, 2 * sy, 2 * sz, cout))
    for i, j, k in itertools.product(range(sx), range(sy), range(sz)):
        for a, bb, c in itertools.product(range(2), repeat=3):
            for co in range(cout):
                out[2 * i + a, 2 * j + bb, 2 * k + c, co] = b[co] + sum(
                    x[i, j, k, ci] * w[ci, co, a, bb, c] for ci in range(cin))
    return out


def naive_forward(params, x):
    p = params.tensors
    arch = params.architecture
    relu = lambda v: np.maximum(v, 0)
    h = x[..., None].astype(float)
    skips = []
    for level in range(arch.depth):
        h = relu(naive_conv3(h, p[f"enc{level}.conv1.w"], p[f"enc{level}.conv1.b"]))
        h = relu(naive_conv3(h, p[f"enc{level}.conv2.w"], p[f"enc{level}.conv2.b"]))
        skips.append(h)
        h = naive_pool(h)
    h = relu(naive_conv3(h, p["bottom.conv1.w"], p["bottom.conv1.b"]))
    h = relu(naive_conv3(h, p["bottom.conv2.w"], p["bottom.conv2.b"]))
    for level in reversed(range(arch.depth)):
        up = naive_upconv(h, p[f"dec{level}.up.w"], p[f"dec{level}.up.b"])
        h = np.concatenate([up, skips[level]], axis=-1)
        h = relu(naive_conv3(h, p[f"dec{level}.conv1.w"], p[f"dec{level}.conv1.b"]))
        h = relu(naive_conv3(h, p[f"dec{level}.conv2.w"], p[f"dec{level}.conv2.b"]))
    logits = np.einsum("xyzc,kc->xyzk", h, p["head.w"]) + p["head.b"]
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _random_params(arch, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return NetworkParameters(arch, {k: rng.normal(scale=scale, size=s)
                                    for k, s in arch.parameter_shapes().items()})


# -- forward -----------------------------------------------------------------

def test_zero_weights_give_uniform_probabilities():
    params = zero_parameters(NetworkArchitecture(depth=2, base_channels=2))
    probs = forward(params, np.random.default_rng(0).normal(size=(8, 8, 4)))
    np.testing.assert_allclose(probs, 1 / 3, atol=1e-12)


def test_toy_forward_matches_hand_unrolled():
    arch = NetworkArchitecture(depth=1, base_channels=1)
    params = _random_params(arch, 1)
    x = np.random.default_rng(2).normal(size=(2, 2, 2))
    np.testing.assert_allclose(forward(params, x), naive_forward(params, x), atol=1e-12)


def test_depth_two_forward_matches_reference():
    arch = NetworkArchitecture(depth=2, base_channels=2)
    params = _random_params(arch, 3, scale=0.3)
    x = np.random.default_rng(4).normal(size=(4, 4, 8))
    np.testing.assert_allclose(forward(params, x), naive_forward(params, x), atol=1e-10)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_probabilities_sum_to_one(seed):
    params = init_parameters(NetworkArchitecture(depth=2, base_channels=2), seed, np.float64)
    x = np.random.default_rng(seed).normal(scale=3, size=(2, 8, 8, 4))
    probs = forward(params, x)
    assert probs.shape == (2, 8, 8, 4, 3)
    assert (probs >= 0).all()
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_shift_invariance():
    z = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_allclose(L.softmax(z), L.softmax(z + 123.4), atol=1e-12)


def test_forward_rejects_indivisible_patch():
    params = init_parameters(NetworkArchitecture(depth=2, base_channels=2), 0)
    with pytest.raises(ShapeError):
        forward(params, np.zeros((8, 8, 6)))


def test_parameter_validation():
    arch = NetworkArchitecture(depth=1, base_channels=1)
    tensors = {k: np.zeros(s) for k, s in arch.parameter_shapes().items()}
    tensors["head.b"] = np.zeros(4)
    with pytest.raises(ValidationError):
        NetworkParameters(arch, tensors)


def test_default_parameter_count():
    conv = lambda cin, cout: cout * cin * 27 + cout
    up = lambda cin, cout: cin * cout * 8 + cout
    enc = conv(1, 8) + conv(8, 8) + conv(8, 16) + conv(16, 16) + conv(16, 32) + conv(32, 32)
    bottom = conv(32, 64) + conv(64, 64)
    dec = sum(up(2 * c, c) + conv(2 * c, c) + conv(c, c) for c in (32, 16, 8))
    head = 8 * 3 + 3
    assert enc + bottom + dec + head == 350_475
    assert init_parameters(NetworkArchitecture(), 0).count == 350_475


def test_init_is_seeded_he_uniform():
    arch = NetworkArchitecture(depth=1, base_channels=4)
    a = init_parameters(arch, 5, np.float64)
    b = init_parameters(arch, 5, np.float64)
    for name, t in a.tensors.items():
        assert t.tobytes() == b.tensors[name].tobytes()
        if name.endswith(".b"):
            assert not t.any()
    w = a.tensors["enc0.conv2.w"]
    assert np.abs(w).max() <= math.sqrt(6 / (4 * 27))


# -- layers ------------------------------------------------------------------

def test_maxpool_gradient_goes_to_first_maximum():
    x = np.zeros((1, 2, 2, 2, 1))
    x[0, 0, 1, 0, 0] = x[0, 1, 1, 1, 0] = 5.0
    y, arg = L.maxpool_forward(x)
    dx = L.maxpool_backward(np.ones_like(y), arg, x.shape)
    assert y.ravel()[0] == 5.0
    assert dx.sum() == 1.0 and dx[0, 0, 1, 0, 0] == 1.0


# -- loss --------------------------------------------------------------------

def test_tversky_perfect_prediction():
    labels = np.array([0, 1, 2, 1]).reshape(2, 2, 1)
    pred = np.eye(3)[labels]
    assert tversky_loss(pred, labels) == pytest.approx(0.0, abs=1e-12)


def test_tversky_half_half_is_soft_dice():
    rng = np.random.default_rng(0)
    pred = L.softmax(rng.normal(size=(4, 4, 4, 3)))
    labels = rng.integers(0, 3, size=(4, 4, 4))
    g = np.eye(3)[labels]
    dice = (2 * (pred * g).sum((0, 1, 2)) + 2e-6) / (pred.sum((0, 1, 2)) + g.sum((0, 1, 2)) + 2e-6)
    np.testing.assert_allclose(tversky_index(pred, labels, 0.5, 0.5, 1e-6), dice, rtol=1e-12)


def test_tversky_single_voxel_example():
    pred = np.array([0.2, 0.8, 0.0]).reshape(1, 1, 1, 3)
    truth = np.array([1]).reshape(1, 1, 1)
    eps = 1e-6
    ti0 = eps / (0.7 * 0.2 + eps)
    ti1 = (0.8 + eps) / (0.8 + 0.3 * 0.2 + eps)
    ti2 = eps / eps
    expected = (1 - ti0) + (1 - ti1) + (1 - ti2)
    assert tversky_loss(pred, truth, 0.7, 0.3, eps) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(1.0697603, abs=1e-6)


def test_tversky_symmetry_only_when_weights_equal():
    rng = np.random.default_rng(1)
    a = L.softmax(rng.normal(size=(3, 3, 3, 3)))
    b = L.softmax(rng.normal(size=(3, 3, 3, 3)))
    np.testing.assert_allclose(tversky_index(a, b, 0.5, 0.5), tversky_index(b, a, 0.5, 0.5), rtol=1e-12)
    assert not np.allclose(tversky_index(a, b, 0.7, 0.3), tversky_index(b, a, 0.7, 0.3))


@pytest.mark.parametrize("truth_class", [0, 1, 2])
@pytest.mark.parametrize("alpha, beta", [(0.7, 0.3), (0.3, 0.7), (0.5, 0.5)])
def test_tversky_decreases_toward_truth(truth_class, alpha, beta):
    truth = np.array([truth_class]).reshape(1, 1, 1)
    losses = []
    for q in np.linspace(0.05, 0.95, 10):
        rest = (1 - q) / 2
        pred = np.full(3, rest)
        pred[truth_class] = q
        losses.append(tversky_loss(pred.reshape(1, 1, 1, 3), truth, alpha, beta))
    assert all(a > b for a, b in zip(losses, losses[1:]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_tversky_bounds(seed):
    rng = np.random.default_rng(seed)
    pred = L.softmax(rng.normal(size=(3, 3, 2, 3)) * 3)
    labels = rng.integers(0, 3, size=(3, 3, 2))
    ti = tversky_index(pred, labels, *rng.uniform(0, 1, 2))
    assert ((ti >= 0) & (ti <= 1 + 1e-12)).all()
    assert 0 <= tversky_loss(pred, labels) <= 3


def test_tversky_domain_and_shape_errors():
    with pytest.raises(DomainError):
        tversky_loss(np.full((1, 1, 1, 3), 1.5), np.zeros((1, 1, 1), int))
    with pytest.raises(ShapeError):
        tversky_loss(np.full((1, 1, 2, 3), 0.3), np.zeros((1, 1, 1), int))


def test_tversky_grad_matches_finite_differences():
    rng = np.random.default_rng(2)
    pred = rng.uniform(0.05, 0.95, size=(2, 2, 2, 3))
    labels = rng.integers(0, 3, size=(2, 2, 2))
    _, grad = tversky_loss_grad(pred, labels, 0.7, 0.3, 1e-6)
    h = 1e-6
    for idx in np.ndindex(pred.shape):
        up, dn = pred.copy(), pred.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (tversky_loss(up, labels) - tversky_loss(dn, labels)) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


# -- backward ----------------------------------------------------------------

GRAD_FLOOR = 1e-7


def _gradient_check(arch, seed, shape=(8, 8, 8), alpha=0.7, beta=0.3):
    params = init_parameters(arch, seed, np.float64)
    rng = np.random.default_rng(seed + 100)
    for name in params.tensors:
        if name.endswith(".b"):
            params.tensors[name] = rng.normal(scale=0.1, size=params.tensors[name].shape)
    x = rng.normal(size=shape)
    y = rng.integers(0, 3, size=shape)
    _, grads = backward(params, x, y, alpha, beta, 1e-6)
    h = 1e-5
    worst = 0.0
    for name, tensor in params.tensors.items():
        for idx in np.ndindex(tensor.shape):
            old = tensor[idx]
            tensor[idx] = old + h
            up = tversky_loss(forward(params, x), y, alpha, beta, 1e-6)
            tensor[idx] = old - h
            dn = tversky_loss(forward(params, x), y, alpha, beta, 1e-6)
            tensor[idx] = old
            fd = (up - dn) / (2 * h)
            g = grads[name][idx]
            rel = abs(g - fd) / max(abs(g), abs(fd), GRAD_FLOOR)
            worst = max(worst, rel)
    return worst


@pytest.mark.slow
def test_gradient_check_every_parameter():
    worst = _gradient_check(NetworkArchitecture(depth=1, base_channels=2), seed=0)
    assert worst < 1e-4


def test_zero_direction_gives_zero_derivative():
    params = init_parameters(NetworkArchitecture(depth=1, base_channels=2), 0, np.float64)
    x = np.random.default_rng(0).normal(size=(4, 4, 4))
    y = np.random.default_rng(1).integers(0, 3, size=(4, 4, 4))
    _, grads = backward(params, x, y)
    directional = sum(float((g * np.zeros_like(g)).sum()) for g in grads.values())
    assert directional == 0.0


def test_frozen_layers_are_absent():
    params = init_parameters(NetworkArchitecture(depth=1, base_channels=2), 0, np.float64)
    x = np.zeros((4, 4, 4))
    y = np.zeros((4, 4, 4), int)
    _, grads = backward(params, x, y, frozen=("enc0.conv1.w", "enc0.conv1.b"))
    assert "enc0.conv1.w" not in grads and "enc0.conv1.b" not in grads
    assert set(grads) == set(params.tensors) - {"enc0.conv1.w", "enc0.conv1.b"}


def test_backward_batch_shapes():
    params = init_parameters(NetworkArchitecture(depth=2, base_channels=2), 0)
    x = np.zeros((3, 8, 8, 4), np.float32)
    y = np.zeros((3, 8, 8, 4), int)
    loss, grads = backward(params, x, y)
    assert math.isfinite(loss)
    for name, g in grads.items():
        assert g.shape == params.tensors[name].shape


def test_backward_truth_shape_mismatch():
    params = init_parameters(NetworkArchitecture(depth=1, base_channels=2), 0)
    with pytest.raises(ShapeError):
        backward(params, np.zeros((4, 4, 4)), np.zeros((4, 4, 2), int))


# -- training ----------------------------------------------------------------

def _toy_records(n, shape=(8, 8, 8), seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        labels = np.zeros(shape, np.uint8)
        c = rng.integers(2, 6, size=3)
        labels[c[0] - 2:c[0] + 2, c[1] - 2:c[1] + 2, c[2] - 2:c[2] + 2] = 1
        labels[c[0], c[1], c[2]] = 2
        image = np.where(labels == 1, 2.0, np.where(labels == 2, 1.0, -0.5)) + rng.normal(0, 0.1, shape)
        out.append(StudyRecord(f"t{i}", VolumeGrid(image), LabelMap(labels)))
    return out


def _toy_config(**kw):
    base = dict(epochs=3, depth=1, base_channels=2, patch_shape=(8, 8, 8), batch_size=2,
                lr=1e-3, dtype="float64", seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_train_config_validation():
    with pytest.raises(ValidationError):
        _toy_config(epochs=0)
    with pytest.raises(ValidationError):
        _toy_config(folds=1)
    with pytest.raises(ValidationError):
        _toy_config(eps=0.0)
    with pytest.raises(ShapeError):
        _toy_config(patch_shape=(8, 8, 7))


def test_single_epoch_checkpoint():
    recs = _toy_records(4)
    ckpt = train_fold(_toy_config(epochs=1), recs[:3], recs[3:], fold=0)
    assert ckpt.epoch == 1
    assert len(ckpt.log) == 1
    assert ckpt.validation_loss == ckpt.log[0]["val_loss"]


def test_best_validation_loss_is_running_minimum():
    recs = _toy_records(4)
    ckpt = train_fold(_toy_config(epochs=6), recs[:3], recs[3:], fold=0)
    vals = [row["val_loss"] for row in ckpt.log]
    running = np.minimum.accumulate(vals)
    assert all(a >= b for a, b in zip(running, running[1:]))
    assert ckpt.validation_loss == min(vals)
    assert ckpt.log[ckpt.epoch - 1]["val_loss"] == ckpt.validation_loss


def test_training_is_bit_reproducible_in_float64():
    recs = _toy_records(4)
    a = train_fold(_toy_config(epochs=3), recs[:3], recs[3:], fold=1)
    b = train_fold(_toy_config(epochs=3), recs[:3], recs[3:], fold=1)
    assert [r["train_loss"] for r in a.log] == [r["train_loss"] for r in b.log]
    assert [r["val_loss"] for r in a.log] == [r["val_loss"] for r in b.log]
    for name, t in a.parameters.tensors.items():
        assert t.tobytes() == b.parameters.tensors[name].tobytes()


def test_train_over_folds():
    recs = _toy_records(6)
    folds = [["t0", "t1"], ["t2", "t3"], ["t4", "t5"]]
    ckpts = train(_toy_config(epochs=2), recs, folds)
    assert [c.fold for c in ckpts] == [0, 1, 2]
    best = best_checkpoint(ckpts)
    assert best.validation_loss == min(c.validation_loss for c in ckpts)
    csv = loss_log_csv(ckpts).splitlines()
    assert csv[0] == "epoch,fold,train_loss,val_loss"
    assert len(csv) == 1 + 3 * 2


def test_train_rejects_bad_folds():
    recs = _toy_records(4)
    with pytest.raises(ValidationError):
        train(_toy_config(), recs, [["t0", "t1"], ["t1", "t2", "t3"]])


def test_augmented_variants_train_but_never_validate():
    recs = _toy_records(4)
    variant = StudyRecord("t0_aug1", recs[0].image, recs[0].truth, source_id="t0")
    folds = [["t0", "t1"], ["t2", "t3"]]
    ckpts = train(_toy_config(epochs=1, folds=2), recs + [variant], folds)
    assert len(ckpts) == 2


def test_divergence_is_reported():
    recs = _toy_records(3)
    values = recs[0].image.values.copy()
    values[0, 0, 0] = np.inf
    bad = StudyRecord("bad", VolumeGrid(values), recs[0].truth)
    with pytest.raises(DivergenceError, match="fold 0 epoch 1"):
        train_fold(_toy_config(epochs=2, batch_size=1), [bad], recs[2:], fold=0)


def test_checkpoint_round_trip(tmp_path):
    recs = _toy_records(3)
    ckpt = train_fold(_toy_config(epochs=1), recs[:2], recs[2:], fold=2)
    path = tmp_path / "ck.json"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert (back.epoch, back.fold, back.validation_loss) == (ckpt.epoch, ckpt.fold, ckpt.validation_loss)
    assert back.parameters.architecture == ckpt.parameters.architecture
    for name, t in ckpt.parameters.tensors.items():
        assert back.parameters.tensors[name].tobytes() == t.tobytes()
    obj = json.loads(path.read_text())
    assert obj["version"] == 1
    assert checkpoint_to_json(checkpoint_from_json(obj)) == obj


# -- prediction --------------------------------------------------------------

def _background_network(arch):
    params = zero_parameters(arch)
    params.tensors["head.b"][:] = [50.0, 0.0, 0.0]
    return params


def test_background_network_predicts_all_zero():
    params = _background_network(NetworkArchitecture(depth=1, base_channels=2))
    out = predict_volume(params, VolumeGrid(np.random.default_rng(0).normal(size=(10, 6, 4))), (4, 4, 4))
    assert out.shape == (10, 6, 4)
    assert not out.labels.any()


def test_single_patch_prediction_is_plain_argmax():
    arch = NetworkArchitecture(depth=1, base_channels=2)
    params = _random_params(arch, 9)
    x = np.random.default_rng(1).normal(size=(4, 4, 4))
    out = predict_volume(params, VolumeGrid(x), (4, 4, 4))
    np.testing.assert_array_equal(out.labels, forward(params, x).argmax(-1))


def test_two_patch_prediction_averages():
    arch = NetworkArchitecture(depth=1, base_channels=2)
    params = _random_params(arch, 4)
    x = np.random.default_rng(5).normal(size=(6, 4, 4))
    probs = predict_probabilities(params, VolumeGrid(x), (4, 4, 4), (2, 4, 4))
    a = forward(params, x[0:4])
    b = forward(params, x[2:6])
    expected = np.zeros((6, 4, 4, 3))
    expected[0:2] = a[0:2]
    expected[2:4] = (a[2:4] + b[0:2]) / 2
    expected[4:6] = b[2:4]
    np.testing.assert_allclose(probs, expected, atol=1e-12)
    labels = predict_volume(params, VolumeGrid(x), (4, 4, 4), (2, 4, 4))
    np.testing.assert_array_equal(labels.labels, expected.argmax(-1))


def test_ties_go_to_lower_class():
    params = zero_parameters(NetworkArchitecture(depth=1, base_channels=2))
    out = predict_volume(params, VolumeGrid(np.zeros((4, 4, 4))), (4, 4, 4))
    assert not out.labels.any()


def test_small_volume_is_padded():
    params = _random_params(NetworkArchitecture(depth=1, base_channels=2), 2)
    out = predict_volume(params, VolumeGrid(np.random.default_rng(0).normal(size=(3, 5, 2))), (4, 4, 4))
    assert out.shape == (3, 5, 2)
