import cmath

import numpy as np
import pytest

from taylorformer import training as tr


def naive_loss(pred, target, lam=0.1):
    h, w = pred.shape[-2:]
    l1 = sum(abs(a - b) for a, b in zip(pred.ravel(), target.ravel())) / pred.size

    def mags(x):
        out = []
        for plane in x.reshape(-1, h, w):
            for u in range(h):
                for v in range(w):
                    acc = sum(plane[y, z] * cmath.exp(-2j * cmath.pi * (u * y / h + v * z / w))
                              for y in range(h) for z in range(w))
                    out.append(abs(acc))
        return np.array(out)

    return l1 + lam * np.abs(mags(pred) - mags(target)).mean()


def test_loss_zero_on_match(rng):
    x = rng.standard_normal((2, 8, 8))
    assert tr.loss(x, x) == 0


def test_loss_constant_shift(rng):
    t = rng.standard_normal((16, 16))
    t -= t.mean()  # zero DC so the shift only touches that bin
    assert abs(tr.loss(t + 0.3, t) - 0.3 * 1.1) < 1e-12


def test_loss_matches_naive_loops(rng):
    p, t = rng.standard_normal((2, 1, 6, 5))
    assert abs(tr.loss(p, t) - naive_loss(p, t)) < 1e-12


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        tr.loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_loss_grad_finite_differences(rng):
    p, t = rng.standard_normal((2, 2, 5, 5))
    g = tr.loss_grad(p, t)
    for idx in [(0, 0, 0), (1, 2, 3), (0, 4, 1)]:
        e = np.zeros_like(p)
        e[idx] = 1e-6
        fd = (tr.loss(p + e, t) - tr.loss(p - e, t)) / 2e-6
        assert abs(fd - g[idx]) < 1e-6


def test_task_noise_level():
    task = tr.MicroTask(batch=8)
    noisy, clean = task.sample(np.random.default_rng(0))
    assert noisy.shape == clean.shape == (8, 4, 16, 16)
    assert abs((noisy - clean).std() - 0.1) < 0.01


def test_block_backward_finite_differences(rng):
    params = tr.init_block(4, rng)
    x = rng.standard_normal((4, 5, 5))
    up = rng.standard_normal((4, 5, 5))
    grads = tr.block_backward(x, params, up)
    for name, g in grads.items():
        flat = params[name].ravel()
        for i in rng.choice(flat.size, min(flat.size, 4), replace=False):
            plus, minus = dict(params), dict(params)
            plus[name] = flat.copy()
            minus[name] = flat.copy()
            plus[name][i] += 1e-6
            minus[name][i] -= 1e-6
            plus[name] = plus[name].reshape(params[name].shape)
            minus[name] = minus[name].reshape(params[name].shape)
            fd = (np.sum(up * tr.block_forward(x, plus)) - np.sum(up * tr.block_forward(x, minus))) / 2e-6
            assert abs(fd - g.ravel()[i]) < 1e-6 * max(1, abs(fd)), name


def test_directional_derivative(rng):
    params = tr.init_block(4, rng)
    noisy, clean = tr.MicroTask(batch=2).sample(rng)
    value, grads = tr.batch_loss_and_grad(noisy, clean, params)
    h = 1e-7

    def shifted(sign):
        return {k: v + sign * h * grads[k] for k, v in params.items()}

    fd = (tr.batch_loss_and_grad(noisy, clean, shifted(1))[0] - tr.batch_loss_and_grad(noisy, clean, shifted(-1))[0]) / (2 * h)
    sq = sum(float(np.sum(g * g)) for g in grads.values())
    assert abs(fd - sq) / sq < 1e-4
    assert tr.batch_loss_and_grad(noisy, clean, shifted(-1))[0] < value


def test_lr_zero_constant_history():
    task = tr.MicroTask(batch=1, patch=8, seed=3, fixed_batch=True)
    state = tr.micro_train(task, steps=4, lr=0.0)
    assert len(set(state.loss_history)) == 1 and state.s == 0.5


def test_fresh_batches_each_step():
    history = tr.micro_train(tr.MicroTask(batch=1, patch=8, seed=3), steps=3, lr=0.0).loss_history
    assert len(set(history)) == 3


def test_training_reproducible():
    task = tr.MicroTask(batch=2, patch=8, seed=4)
    a, b = tr.micro_train(task, steps=5), tr.micro_train(task, steps=5)
    assert a.loss_history == b.loss_history
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_training_argument_checks():
    with pytest.raises(ValueError):
        tr.micro_train(tr.MicroTask(), steps=0)
    with pytest.raises(ValueError):
        tr.micro_train(tr.MicroTask(), steps=1, lr=-1.0)


def test_divergence_aborts():
    with pytest.raises(tr.TrainingDiverged):
        tr.micro_train(tr.MicroTask(batch=2, patch=8), steps=60, lr=1e4)
