"""Tests for tensors, the tape, differentiable ops and the optimizer."""

import math

import numpy as np
import pytest

from gradcheck import max_relative_error

from lwdna.autodiff import functional as F
from lwdna.autodiff.optim import SGD, lr_at, milestone_epochs, sgd_step
from lwdna.autodiff.tensor import Tape, Tensor, backward
from lwdna.errors import ConfigError, ShapeError, TapeError
from lwdna.types import LRSchedule, ScheduleKind

TRIALS = range(50)


def naive_conv(x, w, b=None, stride=1, padding=0):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for i in range(n):
        for o in range(k):
            for y in range(ho):
                for z in range(wo):
                    patch = xp[i, :, y * stride:y * stride + kh, z * stride:z * stride + kw]
                    out[i, o, y, z] = np.sum(patch * w[o]) + (0.0 if b is None else b[o])
    return out


def weighted_sum(t: Tensor, r: np.ndarray) -> Tensor:
    return F.sum(F.mul(t, Tensor(r)))


# ============================================================
# conv2d / depthwise
# ============================================================

def test_conv_identity_kernel():
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    out = F.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_sum_kernel():
    x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = F.conv2d(x, Tensor(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 10.0


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv_matches_loop_oracle(rng, stride, padding):
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    assert out.shape[2] == (8 + 2 * padding - 3) // stride + 1
    assert np.max(np.abs(out.data - naive_conv(x, w, b, stride, padding))) <= 1e-12


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))


def test_depthwise_identity_and_isolation(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    ident = F.depthwise_conv2d(Tensor(x), Tensor(np.ones((3, 1, 1, 1))))
    np.testing.assert_array_equal(ident.data, x)

    w = rng.normal(size=(3, 1, 3, 3))
    zeroed = w.copy()
    zeroed[0] = 0.0
    full = F.depthwise_conv2d(Tensor(x), Tensor(w), padding=1)
    out = F.depthwise_conv2d(Tensor(x), Tensor(zeroed), padding=1)
    assert np.all(out.data[:, 0] == 0.0)
    np.testing.assert_allclose(out.data[:, 1:], full.data[:, 1:], rtol=1e-14, atol=0)


def test_depthwise_matches_grouped_oracle(rng):
    x = rng.normal(size=(1, 3, 6, 6))
    w = rng.normal(size=(3, 1, 3, 3))
    out = F.depthwise_conv2d(Tensor(x), Tensor(w), stride=1, padding=1)
    for ch in range(3):
        ref = naive_conv(x[:, ch:ch + 1], w[ch:ch + 1], padding=1)
        assert np.max(np.abs(out.data[:, ch:ch + 1] - ref)) <= 1e-12


def test_depthwise_channel_isolation_under_perturbation(rng):
    x = rng.normal(size=(1, 4, 5, 5))
    w = Tensor(rng.normal(size=(4, 1, 3, 3)))
    base = F.depthwise_conv2d(Tensor(x), w, padding=1).data
    for ch in range(4):
        bumped = x.copy()
        bumped[:, ch] += rng.normal(size=(5, 5))
        out = F.depthwise_conv2d(Tensor(bumped), w, padding=1).data
        others = [j for j in range(4) if j != ch]
        np.testing.assert_allclose(out[:, others], base[:, others], rtol=1e-14, atol=0)


def test_depthwise_rejects_bad_weight():
    with pytest.raises(ShapeError):
        F.depthwise_conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((3, 2, 3, 3))))
    with pytest.raises(ShapeError):
        F.depthwise_conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((4, 1, 3, 3))))


# ============================================================
# batchnorm / linear / relu / pooling
# ============================================================

def _bn(x, c, training, gamma=None, beta=None):
    g = Tensor(np.ones(c) if gamma is None else gamma)
    b = Tensor(np.zeros(c) if beta is None else beta)
    return F.batchnorm2d(Tensor(x), g, b, np.zeros(c), np.ones(c), training=training)


def test_batchnorm_constant_channel_gives_beta():
    x = np.ones((4, 2, 3, 3)) * np.array([3.0, -7.0])[None, :, None, None]
    beta = np.array([0.5, -1.5])
    out = _bn(x, 2, True, beta=beta)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], x.shape), atol=1e-12)


def test_batchnorm_standardized_input_is_nearly_unchanged(rng):
    x = rng.normal(size=(8, 3, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = _bn(x, 3, True)
    np.testing.assert_allclose(out.data, x, atol=1e-4)


def test_batchnorm_train_statistics(rng):
    x = rng.normal(2.0, 3.0, size=(6, 3, 5, 5))
    out = _bn(x, 3, True).data
    var_in = x.var(axis=(0, 2, 3))
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) <= 1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), var_in / (var_in + 1e-5), atol=1e-10)


def test_batchnorm_running_stats_update_and_eval(rng):
    x = rng.normal(1.0, 2.0, size=(4, 2, 3, 3))
    mean, var = np.zeros(2), np.ones(2)
    F.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, training=True)
    count = 4 * 3 * 3
    np.testing.assert_allclose(mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * count / (count - 1), rtol=1e-12)

    out = F.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, training=False)
    expected = (x - mean[None, :, None, None]) / np.sqrt(var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


def test_batchnorm_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        _bn(np.zeros((2, 3, 2, 2)), 2, True)


def test_linear_examples(rng):
    x = rng.normal(size=(4, 10))
    out = F.linear(Tensor(x), Tensor(np.eye(10)), Tensor(np.zeros(10)))
    np.testing.assert_array_equal(out.data, x)

    f = 7
    row = Tensor(np.arange(1.0, f + 1)[None])
    assert F.linear(row, Tensor(np.ones((1, f))), Tensor(np.zeros(1))).data[0, 0] == f * (f + 1) / 2

    w, b = rng.normal(size=(5, 10)), rng.normal(size=5)
    out = F.linear(Tensor(x), Tensor(w), Tensor(b))
    assert np.max(np.abs(out.data - (x @ w.T + b))) <= 1e-12

    with pytest.raises(ShapeError):
        F.linear(Tensor(x), Tensor(np.zeros((5, 9))))


def test_relu_values_and_zero_subgradient():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = F.relu(x)
        tape.backward(F.sum(y))
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_global_avg_pool(rng):
    const = Tensor(np.full((2, 3, 4, 4), 2.5))
    np.testing.assert_array_equal(F.global_avg_pool(const).data, np.full((2, 3), 2.5))
    x = rng.normal(size=(3, 2, 5, 4))
    assert np.max(np.abs(F.global_avg_pool(Tensor(x)).data - x.mean(axis=(2, 3)))) <= 1e-14


def test_avg_pool_rejects_indivisible():
    with pytest.raises(ShapeError):
        F.avg_pool2d(Tensor(np.zeros((1, 1, 5, 4))), 2)


# ============================================================
# losses
# ============================================================

def _logsumexp_ce(z, y):
    m = z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def test_cross_entropy_examples(rng):
    assert F.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2]).item() == pytest.approx(math.log(4), abs=1e-12)
    assert F.cross_entropy(Tensor([[20.0, 0.0, 0.0, 0.0]]), [0]).item() <= 1e-8

    z = rng.normal(size=(6, 5)) * 3
    y = rng.integers(0, 5, size=6)
    assert abs(F.cross_entropy(Tensor(z), y).item() - _logsumexp_ce(z, y)) <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_cross_entropy_shift_invariance(seed):
    r = np.random.default_rng(seed)
    z = r.normal(size=(4, 6))
    y = r.integers(0, 6, size=4)
    shifted = z + r.normal() * 50
    assert abs(F.cross_entropy(Tensor(z), y).item() - F.cross_entropy(Tensor(shifted), y).item()) <= 1e-10


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ShapeError):
        F.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_kd_reductions(rng):
    s = rng.normal(size=(4, 5))
    t = rng.normal(size=(4, 5))
    y = rng.integers(0, 5, size=4)
    ce = F.cross_entropy(Tensor(s), y).item()
    assert F.kd_loss(Tensor(s), t, y, lam=0.0, temperature=4.0).item() == ce
    assert F.kd_loss(Tensor(s), s.copy(), y, lam=0.4, temperature=4.0).item() == (1 - 0.4) * ce


def test_kd_matches_direct_formula(rng):
    s = rng.normal(size=(2, 5))
    t = rng.normal(size=(2, 5))
    y = np.array([1, 4])
    lam, temp = 0.4, 4.0

    def softmax(z):
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    p_t, q_s = softmax(t / temp), softmax(s / temp)
    kl = np.mean(np.sum(p_t * (np.log(p_t) - np.log(q_s)), axis=1))
    expected = (1 - lam) * _logsumexp_ce(s, y) + lam * temp ** 2 * kl
    assert abs(F.kd_loss(Tensor(s), t, y, lam, temp).item() - expected) <= 1e-12


def test_kd_rejects_bad_settings():
    z = Tensor(np.zeros((2, 3)))
    with pytest.raises(ConfigError):
        F.kd_loss(z, np.zeros((2, 3)), [0, 1], lam=1.5, temperature=4.0)
    with pytest.raises(ConfigError):
        F.kd_loss(z, np.zeros((2, 3)), [0, 1], lam=0.4, temperature=0.0)
    with pytest.raises(ShapeError):
        F.kd_loss(z, np.zeros((2, 4)), [0, 1], lam=0.4, temperature=4.0)


# ============================================================
# backward and the tape
# ============================================================

def test_backward_sum_and_square(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        tape.backward(F.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    x.zero_grad()
    with Tape():
        loss = F.scale(F.sum(F.mul(x, x)), 0.5)
        backward(loss)
    np.testing.assert_allclose(x.grad, x.data, rtol=1e-15)


def test_backward_twice_is_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = F.sum(x)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)
        tape.reset()
        loss = F.sum(x)
        tape.backward(loss)
    assert tape.backward_passes == 1


def test_backward_needs_scalar_and_recorded_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = F.scale(x, 2.0)
        with pytest.raises(TapeError):
            tape.backward(y)
    with pytest.raises(TapeError):
        backward(Tensor(1.0))


def test_tape_records_in_topological_order(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with Tape() as tape:
        y = F.scale(x, 3.0)
        z = F.sum(F.mul(y, x))
    assert [node.op for node in tape.nodes] == ["scale", "mul", "sum"]
    for i, node in enumerate(tape.nodes):
        assert node.output_id == i
        assert all(j is None or j < i for j in node.input_ids)
    assert z.node_id == 2


def test_forward_is_bit_deterministic():
    def run():
        r = np.random.default_rng(7)
        x = Tensor(r.normal(size=(2, 3, 6, 6)))
        w = Tensor(r.normal(size=(4, 3, 3, 3)))
        return F.relu(F.conv2d(x, w, padding=1)).data

    assert run().tobytes() == run().tobytes()


def test_no_recording_without_tape(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    y = F.scale(x, 2.0)
    assert y.is_leaf and not y.requires_grad


# ============================================================
# finite-difference checks, randomized per op
# ============================================================

@pytest.mark.parametrize("seed", TRIALS)
def test_gradcheck_conv2d(seed):
    r = np.random.default_rng(seed)
    stride, padding = int(r.integers(1, 3)), int(r.integers(0, 2))
    x = Tensor(r.normal(size=(2, 2, 5, 5)), requires_grad=True)
    w = Tensor(r.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(r.normal(size=3), requires_grad=True)
    ho = (5 + 2 * padding - 3) // stride + 1
    weights = r.normal(size=(2, 3, ho, ho))
    err = max_relative_error(lambda: weighted_sum(F.conv2d(x, w, b, stride, padding), weights), [x, w, b])
    assert err <= 1e-5


@pytest.mark.parametrize("seed", TRIALS)
def test_gradcheck_depthwise(seed):
    r = np.random.default_rng(seed)
    stride = int(r.integers(1, 3))
    x = Tensor(r.normal(size=(2, 3, 5, 5)), requires_grad=True)
    w = Tensor(r.normal(size=(3, 1, 3, 3)), requires_grad=True)
    ho = (5 + 2 - 3) // stride + 1
    weights = r.normal(size=(2, 3, ho, ho))
    err = max_relative_error(lambda: weighted_sum(F.depthwise_conv2d(x, w, stride, 1), weights), [x, w])
    assert err <= 1e-5


@pytest.mark.parametrize("seed", TRIALS)
def test_gradcheck_batchnorm(seed):
    r = np.random.default_rng(seed)
    training = bool(seed % 2)
    x = Tensor(r.normal(size=(4, 2, 3, 3)), requires_grad=True)
    g = Tensor(r.normal(1.0, 0.2, size=2), requires_grad=True)
    b = Tensor(r.normal(size=2), requires_grad=True)
    mean, var = r.normal(size=2), r.uniform(0.5, 2.0, size=2)
    weights = r.normal(size=(4, 2, 3, 3))

    def loss():
        return weighted_sum(F.batchnorm2d(x, g, b, mean.copy(), var.copy(), training=training), weights)

    assert max_relative_error(loss, [x, g, b]) <= 1e-5


@pytest.mark.parametrize("seed", TRIALS)
def test_gradcheck_linear_relu_pools(seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.normal(size=(2, 3, 4, 4)), requires_grad=True)
    w = Tensor(r.normal(size=(5, 3)), requires_grad=True)
    b = Tensor(r.normal(size=5), requires_grad=True)
    weights = r.normal(size=(2, 5))

    def loss():
        pooled = F.global_avg_pool(F.relu(F.avg_pool2d(x, 2)))
        return weighted_sum(F.linear(pooled, w, b), weights)

    assert max_relative_error(loss, [x, w, b]) <= 1e-5


@pytest.mark.parametrize("seed", TRIALS)
def test_gradcheck_losses(seed):
    r = np.random.default_rng(seed)
    z = Tensor(r.normal(size=(3, 5)) * 2, requires_grad=True)
    t = r.normal(size=(3, 5))
    y = r.integers(0, 5, size=3)
    assert max_relative_error(lambda: F.cross_entropy(z, y), [z]) <= 1e-5
    assert max_relative_error(lambda: F.kd_loss(z, t, y, 0.4, 4.0), [z]) <= 1e-5


@pytest.mark.parametrize("seed", TRIALS)
def test_gradcheck_einsum_concat_reshape(seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.normal(size=3), requires_grad=True)
    c = Tensor(r.normal(size=2), requires_grad=True)
    w1 = Tensor(r.normal(size=(3, 4, 2)), requires_grad=True)
    w2 = Tensor(r.normal(size=(3, 4, 5, 2)), requires_grad=True)
    weights = r.normal(size=(3, 4, 5))

    def loss():
        z = F.einsum("i,j->ij", a, F.concat([c, F.reshape(c, (2,))], axis=0))
        return weighted_sum(F.einsum("ijpk,ij,ijk->ijp", w2, z, w1), weights)

    assert max_relative_error(loss, [a, c, w1, w2]) <= 1e-5


def test_einsum_rejects_bad_subscripts():
    a = Tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        F.einsum("ij", a)
    with pytest.raises(ShapeError):
        F.einsum("ijk->i", a)


# ============================================================
# optimizer and schedules
# ============================================================

def test_sgd_single_plain_step():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([1.0])
    sgd_step([p], SGD(lr=0.1, momentum=0.0, weight_decay=0.0))
    assert p.data[0] == pytest.approx(0.9, abs=1e-15)


def test_sgd_momentum_matches_unrolled_recurrence():
    g, lr, mu, wd = 0.7, 0.05, 0.9, 1e-3
    p = Tensor([2.0], requires_grad=True)
    opt = SGD(lr=lr, momentum=mu, weight_decay=wd)
    ref_p, ref_v = 2.0, 0.0
    for _ in range(2):
        p.grad = np.array([g])
        opt.step([p])
        ref_v = ref_v * mu + g + wd * ref_p
        ref_p = ref_p - lr * ref_v
    assert abs(p.data[0] - ref_p) <= 1e-15
    assert opt.velocity[id(p)].shape == p.shape


def test_sgd_rejects_bad_hyperparameters():
    with pytest.raises(ConfigError):
        SGD(lr=0.1, momentum=1.0)
    with pytest.raises(ConfigError):
        SGD(lr=0.1, weight_decay=-1.0)


def test_step_schedule_milestones():
    schedule = LRSchedule()
    assert milestone_epochs(schedule, 300) == [150, 225]
    assert lr_at(schedule, 149, 0.1, 300) == 0.1
    assert lr_at(schedule, 150, 0.1, 300) == pytest.approx(0.01, rel=1e-12)
    assert lr_at(schedule, 225, 0.1, 300) == pytest.approx(0.001, rel=1e-12)
    assert milestone_epochs(schedule, 10) == [5, 7]


def test_cosine_schedule_endpoints():
    schedule = LRSchedule(kind=ScheduleKind.COSINE)
    assert lr_at(schedule, 0, 0.1, 10) == pytest.approx(0.1)
    assert lr_at(schedule, 5, 0.1, 10) == pytest.approx(0.05)
    assert lr_at(schedule, 9, 0.1, 10) < lr_at(schedule, 8, 0.1, 10)
