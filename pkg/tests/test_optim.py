import math

import numpy as np
import pytest

from src.errors import ConfigError, ShapeError
from src.optim import (
    SCHEDULES, OptimizerState, Schedule, adam_step, clip_global_norm, global_norm, lr_at,
    optimizer_step, sgd_step,
)


def test_sgd_plain_step():
    params = {'w': np.array([0.0])}
    sgd_step(OptimizerState(lr=0.1), params, {'w': np.array([1.0])})
    assert params['w'][0] == pytest.approx(-0.1)


def test_sgd_momentum_recursion():
    state = OptimizerState(lr=1.0, momentum=0.9)
    params = {'w': np.array([0.0])}
    for _ in range(2):
        sgd_step(state, params, {'w': np.array([1.0])})
    assert params['w'][0] == pytest.approx(-2.9)
    assert state.momentum_buffers['w'][0] == pytest.approx(1.9)
    assert state.step == 2


def test_sgd_nesterov_first_step():
    state = OptimizerState(lr=1.0, momentum=0.9, nesterov=True)
    params = {'w': np.array([0.0])}
    sgd_step(state, params, {'w': np.array([1.0])})
    assert params['w'][0] == pytest.approx(-1.9)


def test_sgd_zero_gradient_is_a_no_op():
    params = {'w': np.array([0.3, -1.2])}
    sgd_step(OptimizerState(lr=0.5, momentum=0.9), params, {'w': np.zeros(2)})
    np.testing.assert_array_equal(params['w'], [0.3, -1.2])


def test_sgd_weight_decay():
    params = {'w': np.array([2.0])}
    sgd_step(OptimizerState(lr=0.1, weight_decay=1e-4), params, {'w': np.array([0.0])})
    assert params['w'][0] == pytest.approx(2.0 - 0.1 * 2e-4)


def test_adam_first_step_is_sign_like():
    params = {'w': np.array([0.0])}
    adam_step(OptimizerState(kind='adam', lr=1e-3), params, {'w': np.array([0.5])})
    assert params['w'][0] == pytest.approx(-1e-3 * 0.5 / (0.5 + 1e-8), rel=1e-12)
    assert params['w'][0] == pytest.approx(-9.9999998e-4, rel=1e-8)

    params = {'w': np.zeros(2)}
    adam_step(OptimizerState(kind='adam', lr=1e-3), params, {'w': np.array([2.0, -0.01])})
    np.testing.assert_allclose(np.abs(params['w']), 1e-3, rtol=1e-5)


def test_adam_first_step_direction_property():
    rng = np.random.default_rng(0)
    g = rng.normal(size=1000)
    g = g[np.abs(g) > 1e3 * 1e-8]
    params = {'w': np.zeros_like(g)}
    adam_step(OptimizerState(kind='adam', lr=1e-2), params, {'w': g})
    np.testing.assert_array_equal(np.sign(params['w']), -np.sign(g))


def test_adam_zero_gradient_is_a_no_op():
    state = OptimizerState(kind='adam', lr=1e-3)
    params = {'w': np.array([1.0, -1.0])}
    for _ in range(3):
        adam_step(state, params, {'w': np.zeros(2)})
    np.testing.assert_array_equal(params['w'], [1.0, -1.0])
    assert state.step == 3


def test_adamw_decouples_weight_decay():
    params = {'w': np.array([1.0])}
    adam_step(OptimizerState(kind='adamw', lr=0.1, weight_decay=0.2), params, {'w': np.array([0.0])})
    assert params['w'][0] == pytest.approx(1.0 - 0.1 * 0.2)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step(OptimizerState(), {'w': np.zeros(3)}, {'w': np.zeros(2)})
    with pytest.raises(ShapeError):
        adam_step(OptimizerState(kind='adam'), {'w': np.zeros((2, 2))}, {'w': np.zeros(4)})


def test_optimizer_step_dispatch():
    params = {'w': np.array([0.0])}
    optimizer_step(OptimizerState(kind='sgd', lr=0.1), params, {'w': np.array([1.0])})
    assert params['w'][0] == pytest.approx(-0.1)
    with pytest.raises(ConfigError):
        optimizer_step(OptimizerState(kind='lamb'), params, {'w': np.array([1.0])})


def test_clip_global_norm():
    clipped, norm = clip_global_norm({'a': np.array([3.0]), 'b': np.array([4.0])}, 1.0)
    assert norm == pytest.approx(5.0)
    assert clipped['a'][0] == pytest.approx(0.6)
    assert clipped['b'][0] == pytest.approx(0.8)

    grads = {'g': np.array([0.3, 0.4])}
    unchanged, _ = clip_global_norm(grads, 1.0)
    np.testing.assert_array_equal(unchanged['g'], grads['g'])


def test_clip_bound_holds_on_random_gradients():
    rng = np.random.default_rng(1)
    for _ in range(50):
        grads = {'a': rng.normal(0.0, 10.0, (4, 3)), 'b': rng.normal(0.0, 10.0, 7)}
        clipped, _ = clip_global_norm(grads, 1.0)
        assert global_norm(clipped) <= 1.0 + 1e-12


def test_clip_rejects_non_positive_bound():
    with pytest.raises(ConfigError):
        clip_global_norm({'a': np.ones(2)}, 0.0)


def test_cosine_schedule_points():
    schedule = Schedule('cosine', base_lr=0.1, total_steps=100)
    assert lr_at(schedule, 0) == pytest.approx(0.1)
    assert lr_at(schedule, 50) == pytest.approx(0.05)
    assert lr_at(schedule, 100) == pytest.approx(0.0, abs=1e-15)
    assert schedule.lr_at(25) == pytest.approx(0.05 * (1 + math.cos(math.pi / 4)))


def test_warmup_and_decay_schedules():
    warm = Schedule('linear-warmup-then-constant', base_lr=0.4, total_steps=10, warmup_steps=4)
    assert [lr_at(warm, t) for t in (0, 2, 4, 9)] == pytest.approx([0.0, 0.2, 0.4, 0.4])
    decay = Schedule('linear-decay', base_lr=1.0, total_steps=4)
    assert [lr_at(decay, t) for t in range(5)] == pytest.approx([1.0, 0.75, 0.5, 0.25, 0.0])
    both = Schedule('warmup-then-linear-decay', base_lr=1.0, total_steps=10, warmup_steps=2)
    assert [lr_at(both, t) for t in (1, 2, 6, 10)] == pytest.approx([0.5, 1.0, 0.5, 0.0])


@pytest.mark.parametrize('kind', SCHEDULES)
def test_schedules_are_continuous_and_non_negative(kind):
    schedule = Schedule(kind, base_lr=0.3, total_steps=200, warmup_steps=20).validate()
    values = np.array([lr_at(schedule, t) for t in range(201)])
    assert np.all(values >= 0.0)
    assert np.max(np.abs(np.diff(values))) <= 0.3 / 20 + 1e-12


def test_schedule_errors():
    with pytest.raises(ConfigError):
        lr_at(Schedule('cosine', total_steps=10), 11)
    with pytest.raises(ConfigError):
        lr_at(Schedule('cosine', total_steps=10), -1)
    with pytest.raises(ConfigError):
        Schedule('step', total_steps=10).validate()
    with pytest.raises(ConfigError):
        Schedule('cosine', total_steps=10, warmup_steps=11).validate()
