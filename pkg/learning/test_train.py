"""
Tests for the sequence loss, the learning-rate schedule and the training loop.
"""

import math

import numpy as np
import pytest

from learning.encode import EncodedSample
from learning.loss import LossStats, regression_target, smooth_l1
from learning.net import decode_greedy, forward, init_params, preset
from learning.train import (
    TrainConfig,
    TrainingDivergedError,
    lr_at,
    sequence_loss,
    smoothed,
    train,
)
from simulation.quantize import NUM_CLASSES, STOP, ClassWeights, VelocitySequence, build_vocabulary

UNIFORM = ClassWeights.uniform()


def _sample(seed: int, label: VelocitySequence, size: int = 16) -> EncodedSample:
    rng = np.random.default_rng(seed)
    return EncodedSample(
        rgbm=rng.uniform(size=(4, size, size)),
        force_image=rng.uniform(size=(3, size, size)),
        label=label,
    )


def _one_hot(tokens) -> np.ndarray:
    out = np.zeros((6, NUM_CLASSES))
    out[np.arange(6), list(tokens)] = 1.0
    return out


def test_perfect_predictor_has_zero_loss():
    label = VelocitySequence((4, 12, STOP))
    assert sequence_loss(_one_hot(label.padded(6)), label, UNIFORM) <= 1e-12


def test_uniform_predictor_loss_is_ln_18():
    outputs = np.full((6, NUM_CLASSES), 1.0 / NUM_CLASSES)
    loss = sequence_loss(outputs, VelocitySequence((1, STOP)), UNIFORM)
    assert loss == pytest.approx(math.log(18.0), abs=1e-9)


def test_stop_label_is_padded_to_six_steps():
    label = VelocitySequence((STOP,))
    rng = np.random.default_rng(0)
    outputs = rng.dirichlet(np.ones(NUM_CLASSES), size=6)
    expected = -np.mean([math.log(outputs[t, STOP]) for t in range(6)])
    assert sequence_loss(outputs, label, UNIFORM) == pytest.approx(expected, rel=1e-12)


def test_padding_uses_step_weights():
    label = VelocitySequence((3, STOP))
    q = np.ones((6, NUM_CLASSES))
    q[5, STOP] = 4.0
    weights = ClassWeights(q=q, counts=np.ones((6, NUM_CLASSES)))
    outputs = np.full((6, NUM_CLASSES), 0.5 / (NUM_CLASSES - 1))
    outputs[:, STOP] = 0.5
    hand = [q[t, v] * math.log(outputs[t, v]) for t, v in enumerate((3, STOP, STOP, STOP, STOP, STOP))]
    assert sequence_loss(outputs, label, weights) == pytest.approx(-sum(hand) / 6, rel=1e-12)


def test_zero_probability_is_clamped_and_counted():
    stats = LossStats()
    outputs = np.zeros((6, NUM_CLASSES))
    outputs[:, 0] = 1.0
    loss = sequence_loss(outputs, VelocitySequence((STOP,)), UNIFORM, stats)
    assert stats.clamped == 6
    assert loss == pytest.approx(-math.log(1e-12))


def test_loss_is_non_negative():
    rng = np.random.default_rng(1)
    for _ in range(50):
        outputs = rng.dirichlet(np.ones(NUM_CLASSES), size=6)
        tokens = rng.integers(0, 17, size=rng.integers(1, 6))
        assert sequence_loss(outputs, VelocitySequence(tuple(tokens) + (STOP,)), UNIFORM) >= 0.0


def test_smooth_l1_branches():
    assert smooth_l1(np.array([0.0, 0.5, 2.0, -2.0])).tolist() == [0.0, 0.125, 1.5, 1.5]


def test_regression_target():
    vocab = build_vocabulary()
    assert not regression_target(VelocitySequence((STOP,)), vocab.directions).any()
    target = regression_target(VelocitySequence((0, 16, STOP)), vocab.directions)
    assert target.shape == (18,)
    assert target[:6].tolist() == [1.0, 0.0, 0.0, 0.0, 0.0, -1.0]
    assert not target[6:].any()


def test_lr_schedule_endpoints():
    cfg = TrainConfig(iterations=101)
    assert lr_at(0, cfg) == pytest.approx(1e-2)
    assert abs(lr_at(100, cfg) - 1e-4) <= 1e-12
    assert lr_at(50, cfg) == pytest.approx(1e-3)


def test_lr_schedule_is_non_increasing():
    cfg = TrainConfig(iterations=500)
    rates = [lr_at(i, cfg) for i in range(600)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-4, lr_end=1e-2)
    with pytest.raises(ValueError):
        TrainConfig(lr_end=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_train_config_from_env(monkeypatch):
    monkeypatch.setenv("FORCESIM_WORKERS", "3")
    monkeypatch.setenv("FORCESIM_REPRODUCIBLE", "false")
    cfg = TrainConfig.from_env(iterations=5)
    assert cfg.workers == 3 and not cfg.reproducible and cfg.iterations == 5


def test_smoothed_moving_average():
    out = smoothed([1.0, 2.0, 3.0, 4.0], window=2)
    assert out.tolist() == [1.5, 2.5, 3.5]
    assert len(smoothed([1.0], window=100)) == 0


@pytest.mark.parametrize("seed", range(6))
def test_overfit_single_sample(seed):
    model = preset("tiny", image_size=16)
    sample = _sample(seed, VelocitySequence((2,) * 6))
    cfg = TrainConfig(batch_size=1, iterations=200, lr_start=0.1, lr_end=0.1, seed=seed)
    result = train([sample], model, cfg)

    assert len(result.loss_history) == 200
    assert result.loss_history[0] == pytest.approx(math.log(18.0), rel=0.2)
    assert result.loss_history[-1] < 0.05
    assert result.params.version == 200
    outputs, _ = forward(result.params, sample)
    assert decode_greedy(outputs).tokens == (2,) * 6


def test_rectified_head_starts_with_every_class_active():
    model = preset("tiny", image_size=16)
    for seed in range(6):
        params = init_params(seed, model)
        _, trace = forward(params, _sample(seed, VelocitySequence((STOP,))))
        assert np.all(trace.logits_pre > 0.0)


def test_first_loss_near_ln_18_with_rectifier_head():
    model = preset("tiny", image_size=16)
    data = [_sample(i, VelocitySequence((i % 8, STOP))) for i in range(4)]
    result = train(data, model, TrainConfig(batch_size=4, iterations=1))
    q = result.weights.q
    level = np.mean([sum(q[t, v] for t, v in enumerate(s.label.padded(6))) / 6 for s in data]) * math.log(18.0)
    assert result.loss_history[0] == pytest.approx(level, rel=0.2)


def test_training_is_reproducible():
    model = preset("tiny", image_size=16)
    data = [_sample(i, VelocitySequence((i % 3, STOP))) for i in range(6)]
    cfg = TrainConfig(batch_size=3, iterations=8, seed=5)
    first = train(data, model, cfg)
    second = train(data, model, cfg)
    threaded = train(data, model, TrainConfig(batch_size=3, iterations=8, seed=5, workers=3))
    assert first.loss_history == second.loss_history == threaded.loss_history
    for name in first.params.names():
        assert np.array_equal(first.params[name], threaded.params[name])


def test_nan_loss_aborts_with_diagnostics():
    model = preset("tiny", image_size=16)
    bad = _sample(0, VelocitySequence((STOP,)))
    bad.rgbm[0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        train([bad], model, TrainConfig(batch_size=1, iterations=3))
    assert info.value.iteration == 0
    assert info.value.batch_ids == [0]
    assert info.value.lr == pytest.approx(1e-2)


def test_empty_dataset_is_rejected():
    with pytest.raises(ValueError):
        train([], preset("tiny", image_size=16))


@pytest.mark.parametrize("workers", [1, 3])
def test_clamped_probabilities_are_counted_per_sample(monkeypatch, workers):
    import learning.train as train_module

    real_forward = train_module.forward

    def stop_never_predicted(params, sample):
        outputs, trace = real_forward(params, sample)
        outputs = outputs.copy()
        outputs[:, STOP] = 0.0
        return outputs, trace

    monkeypatch.setattr(train_module, "forward", stop_never_predicted)
    model = preset("tiny", image_size=16)
    data = [_sample(i, VelocitySequence((STOP,))) for i in range(5)]
    result = train(data, model, TrainConfig(batch_size=5, iterations=2, workers=workers))
    # six padded steps per sample, five samples, two iterations
    assert result.stats.clamped == 60
