"""
Tests for the two-tower recurrent predictor: shapes, forward semantics,
trace versioning and the finite-difference gradient check.
"""

import math

import numpy as np
import pytest

from learning.encode import EncodedSample
from learning.net import (
    ModelConfig,
    ShapeError,
    StaleTraceError,
    TowerConfig,
    backward,
    conv,
    decode_greedy,
    embed,
    fc,
    forward,
    grad_check,
    init_params,
    param_shapes,
    pool,
    preset,
    relu,
    replay,
)
from simulation.quantize import NUM_CLASSES, STOP, ClassWeights, VelocitySequence, class_weights

GRAD_TOWER = TowerConfig((conv(3, 2), relu(), pool(2), fc(8)))


def _grad_config(head_rectifier: bool = True) -> ModelConfig:
    return ModelConfig(
        image_tower=GRAD_TOWER,
        force_tower=GRAD_TOWER,
        hidden=8,
        image_size=(16, 16),
        head_rectifier=head_rectifier,
        init_std=0.1,
        precision="float64",
    )


def _random_sample(size: int, channels: int = 4, seed: int = 0, label=None) -> EncodedSample:
    rng = np.random.default_rng(seed)
    return EncodedSample(
        rgbm=rng.uniform(size=(channels, size, size)),
        force_image=rng.uniform(size=(3, size, size)),
        label=label or VelocitySequence((0, 9, STOP)),
    )


def test_tiny_preset_shapes():
    config = preset("tiny", image_size=32)
    shapes = param_shapes(config)
    assert shapes["image.0.W"] == (4, 4, 3, 3)
    # 32 -> conv 30 -> pool 15
    assert shapes["image.3.W"] == (16, 4 * 15 * 15)
    assert shapes["force.0.W"] == (4, 3, 3, 3)
    assert shapes["W_I"] == (32, 32)
    assert shapes["W_o"] == (NUM_CLASSES, 32)
    assert preset("tiny", with_depth=True).image_channels == 5


def test_unknown_preset():
    with pytest.raises(ValueError):
        preset("huge")


def test_invalid_tower_stacks():
    with pytest.raises(ShapeError):
        TowerConfig((conv(3, 2), relu())).shapes((4, 16, 16))
    with pytest.raises(ShapeError):
        TowerConfig((conv(20, 2), fc(4))).shapes((4, 16, 16))
    with pytest.raises(ShapeError):
        TowerConfig((fc(4), pool(2), fc(4))).shapes((4, 16, 16))


def test_init_params():
    params = init_params(3, _grad_config())
    assert np.array_equal(params["W_h"], np.eye(8))
    assert not params["b"].any()
    assert np.all(params["b_o"] == 0.1)
    assert not init_params(3, _grad_config(head_rectifier=False))["b_o"].any()
    assert params.dtype == np.float64
    again = init_params(3, _grad_config())
    assert all(np.array_equal(params[n], again[n]) for n in params.names())


def test_model_config_round_trip():
    config = preset("small", head_rectifier=False)
    assert ModelConfig.from_dict(config.to_dict()) == config


def test_wrong_input_shape_raises():
    params = init_params(0, _grad_config())
    with pytest.raises(ShapeError):
        forward(params, _random_sample(16, channels=5))
    with pytest.raises(ShapeError):
        forward(params, _random_sample(20))


def test_forward_outputs_are_distributions():
    params = init_params(0, _grad_config())
    outputs, trace = forward(params, _random_sample(16))
    assert outputs.shape == (6, NUM_CLASSES)
    assert np.allclose(outputs.sum(axis=1), 1.0)
    assert np.all(outputs >= 0.0)
    assert trace.embedding.shape == (16,)
    assert np.array_equal(replay(params, trace), outputs)


def test_embedding_is_shared_by_every_step():
    params = init_params(0, _grad_config())
    sample = _random_sample(16)
    _, trace = forward(params, sample)
    assert np.array_equal(trace.embedding, embed(params, sample))


def test_untrained_linear_head_is_near_uniform():
    config = ModelConfig(GRAD_TOWER, GRAD_TOWER, hidden=8, image_size=(16, 16), head_rectifier=False, precision="float64")
    outputs, _ = forward(init_params(0, config), _random_sample(16))
    assert np.allclose(outputs, 1.0 / NUM_CLASSES, atol=1e-3)


def test_decode_greedy_stops_at_first_stop():
    dist = np.full((6, NUM_CLASSES), 0.01)
    for t, token in enumerate([3, 11, STOP, 4, STOP, 2]):
        dist[t, token] = 0.9
    assert decode_greedy(dist).tokens == (3, 11, STOP)


def test_decode_greedy_without_stop_keeps_six():
    dist = np.full((6, NUM_CLASSES), 0.01)
    dist[:, 5] = 0.9
    assert decode_greedy(dist).tokens == (5,) * 6


def test_stale_trace_is_rejected():
    params = init_params(0, _grad_config())
    sample = _random_sample(16)
    _, trace = forward(params, sample)
    params.bump()
    with pytest.raises(StaleTraceError):
        backward(params, trace, sample.label, ClassWeights.uniform())


def test_backward_covers_every_tensor():
    params = init_params(0, _grad_config(head_rectifier=False))
    sample = _random_sample(16)
    _, trace = forward(params, sample)
    grads = backward(params, trace, sample.label, ClassWeights.uniform())
    assert set(grads) == set(params.names())
    for name in params.names():
        assert grads[name].shape == params[name].shape
        assert np.all(np.isfinite(grads[name]))
    assert np.abs(grads["b_o"]).sum() > 0


GRAD_WEIGHTS_LABELS = [VelocitySequence((0, 9, STOP)), VelocitySequence((STOP,)), VelocitySequence((2, 2, 2, 2, 2, 2))]
MAX_EXCLUDED_FRACTION = 0.1


# the smaller step trades truncation error for rounding noise in the loss
@pytest.mark.parametrize("epsilon, tolerance", [(1e-5, 1e-5), (1e-6, 5e-5)])
@pytest.mark.parametrize("head_rectifier", [True, False])
def test_grad_check(head_rectifier, epsilon, tolerance):
    if epsilon < 1e-5 and np.finfo(np.longdouble).eps > 1e-18:
        pytest.skip("longdouble is plain double here; 1e-6 steps drown in rounding")
    params = init_params(7, _grad_config(head_rectifier))
    sample = _random_sample(16, seed=1)
    weights = class_weights(GRAD_WEIGHTS_LABELS)
    result = grad_check(params, sample, sample.label, weights, epsilon=epsilon)
    assert result.max_rel_error < tolerance
    assert set(result.per_group) == set(params.names())
    assert result.checked > 0
    assert result.excluded_fraction < MAX_EXCLUDED_FRACTION


def test_grad_check_smaller_step_excludes_no_more_coordinates():
    params = init_params(7, _grad_config())
    sample = _random_sample(16, seed=1)
    weights = class_weights(GRAD_WEIGHTS_LABELS)
    coarse = grad_check(params, sample, sample.label, weights, epsilon=1e-5)
    fine = grad_check(params, sample, sample.label, weights, epsilon=1e-6)
    assert fine.excluded <= coarse.excluded
    assert fine.checked + fine.excluded == coarse.checked + coarse.excluded


def test_grad_check_catches_a_wrong_gradient(monkeypatch):
    import learning.net as net

    real_backward = net.backward

    def broken(params, trace, label, weights):
        grads = real_backward(params, trace, label, weights)
        grads["W_I"] = grads["W_I"] * 1.01
        return grads

    monkeypatch.setattr(net, "backward", broken)
    params = init_params(7, _grad_config(head_rectifier=False))
    sample = _random_sample(16, seed=1)
    result = grad_check(params, sample, sample.label, ClassWeights.uniform())
    assert result.per_group["W_I"] > 1e-3
    assert math.isfinite(result.max_rel_error)
