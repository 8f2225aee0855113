#!/usr/bin/env python3
"""
Training Tests
Loss compositions, GradNorm balancing, windowed derivative loss, metrics,
short deterministic training runs and a reduced ablation run
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import tempfile

import numpy as np
import pandas as pd
import torch
import yaml

from src.cli import run
from src.equation_normalizer import compute_en_weights
from src.operator_model import Architecture, flatten_parameters, init_model
from src.oracle import build_dataset
from src.physics_losses import LossWeights, gradnorm_update, rlse, rlse_per_dof_mean, window_mask
from src.system_core import ParameterSpace, SystemTemplate
from src.trainer import ROW_PRESETS, OperatorTrainer, TrainConfig, evaluate, predict, train

TWO_MASS = {
    'masses': [{'name': 'a', 'value': 1.0}, {'name': 'b', 'value': 1.0}],
    'connections': [
        {'name': 'ka', 'type': 'spring', 'a': 'a', 'value': 30.0},
        {'name': 'kab', 'type': 'spring', 'a': 'a', 'b': 'b', 'value': 20.0},
        {'name': 'ca', 'type': 'dashpot', 'a': 'a', 'value': 0.5},
    ],
    'loads': [{'channel': 0, 'at': 'b'}],
}
SPACE = {
    'parameters': [{'name': 'kab', 'dist': 'uniform', 'lo': 15.0, 'hi': 25.0}],
    'excitation': {'kind': 'band_limited_noise', 'channels': 1, 'band': [0.5, 5.0], 'psd': {'S0': 1.0}},
}


def fixture(n_train=12, n_test=4, n_virtual=4):
    template = SystemTemplate(TWO_MASS)
    space = ParameterSpace.from_config(SPACE, {'dt': 0.02, 'T': 1.0})
    dataset = build_dataset(template, space, n_train, n_test, n_virtual, 21)
    arch = Architecture.from_config(
        {'width': 8, 'depth_spectral': 2, 'k_modes': 6, 'depth_fc': 2, 'fc_width': 16, 'dtype': 'float64'},
        n_p=1, n_channels=1, n_out=2, n_t=dataset.n_t)
    return template, dataset, arch


def config_for(row=None, **kwargs) -> TrainConfig:
    cfg = {'epochs': 3, 'batch_size': 4, 'learning_rate': 0.005, 'decay_steps': 2, 'decay_ratio': 0.5,
           'seed': 0, 'row': row}
    cfg.update(kwargs)
    return TrainConfig.from_config(cfg)


def test_row_presets():
    assert set(ROW_PRESETS) == {'T1', 'T2', 'T3', 'T4', 'T5', 'T6', 'T7', 'A1'}
    t7 = config_for('T7')
    assert t7.active == [True, False, False, False] and not t7.en
    a1 = config_for('A1')
    assert a1.losses['data'] is False and a1.dde_window == 0.025
    assert config_for('T5').en is False and config_for('T2').losses['dde'] is True


def test_custom_preset_and_unknown_row():
    presets = {'X': {'losses': {'data': True, 'eq': False, 'dde': True, 'veq': False}, 'en': False,
                     'dde_window': None}}
    config = TrainConfig.from_config({'row': 'X'}, presets)
    assert config.dde_window is None and config.losses['dde']
    try:
        TrainConfig.from_config({'row': 'T99'})
    except ValueError:
        return
    raise AssertionError("expected ValueError")


def test_window_mask():
    mask = window_mask(101, 0.01, 0.025)
    assert int(mask.sum()) == 6
    assert bool(mask[0]) and bool(mask[3]) is False and bool(mask[-1])
    assert bool(window_mask(11, 0.1, None).all())


def test_loss_weights_normalized():
    w = LossWeights(np.array([2.0, 1.0, 1.0, 5.0]), [True, True, True, False]).normalized()
    assert abs(w.omega[:3].sum() - 3.0) < 1e-12 and w.omega[3] == 0.0


def test_gradnorm_moves_toward_balance():
    w = LossWeights(np.ones(4), [True, True, False, False])
    out = gradnorm_update(w, np.array([10.0, 1.0, 0.0, 0.0]), np.ones(4), np.ones(4), 0.1)
    assert out.omega[0] < 1.0 < out.omega[1]
    assert abs(out.omega[:2].sum() - 2.0) < 1e-12
    try:
        gradnorm_update(LossWeights(np.ones(4), [True, False, False, False]), np.ones(4), np.ones(4),
                        np.ones(4), 0.1)
    except ValueError:
        return
    raise AssertionError("expected ValueError")


def test_rlse_metrics():
    truth = np.ones((2, 4, 3))
    assert rlse(truth, truth) == 0.0
    assert abs(rlse(1.1 * truth, truth) - 10.0) < 1e-9
    pred = truth.copy()
    pred[..., 0] *= 1.3
    assert abs(rlse_per_dof_mean(pred, truth) - 10.0) < 1e-9


def test_training_reduces_loss():
    template, dataset, arch = fixture()
    weights = compute_en_weights(dataset, template, 0.02, seed=0)
    model = init_model(arch, 0)
    config = config_for('T2', epochs=8, decay_steps=4, dde_window=0.1)
    model, report = train(model, dataset, template, config, weights)
    frame = report.to_frame()
    assert len(frame) == 8
    assert frame['loss_total'].iloc[-1] < frame['loss_total'].iloc[0]
    for column in ('lr', 'loss_data', 'loss_eq', 'loss_dde', 'omega_data', 'omega_veq', 'rlse_u'):
        assert column in frame.columns
    assert np.isnan(frame['loss_veq']).all()
    assert frame['lr'].iloc[-1] < frame['lr'].iloc[0]


def test_first_epoch_is_reproducible():
    template, dataset, arch = fixture()
    losses = []
    for _ in range(2):
        _, report = train(init_model(arch, 4), dataset, template, config_for('T7', epochs=1))
        losses.append(report.final['loss_total'])
    assert losses[0] == losses[1]


def test_virtual_and_no_data_rows():
    template, dataset, arch = fixture()
    weights = compute_en_weights(dataset, template, 0.02, seed=1)
    _, report = train(init_model(arch, 2), dataset, template, config_for('A1', epochs=2, dde_window=0.1),
                      weights)
    frame = report.to_frame()
    assert np.isnan(frame['loss_data']).all()
    assert np.isfinite(frame['loss_veq']).all()


def test_en_requires_weights():
    template, dataset, arch = fixture()
    try:
        OperatorTrainer(init_model(arch, 0), dataset, template, config_for('T1'))
    except ValueError:
        return
    raise AssertionError("expected ValueError")


def test_virtual_loss_requires_virtual_pairs():
    template, dataset, arch = fixture(n_virtual=0)
    try:
        OperatorTrainer(init_model(arch, 0), dataset, template, config_for('T6'))
    except ValueError:
        return
    raise AssertionError("expected ValueError")


def test_backward_returns_all_gradients():
    template, dataset, arch = fixture()
    trainer = OperatorTrainer(init_model(arch, 0), dataset, template, config_for('T7'))
    grads = trainer.backward(np.arange(4))
    names = {name for name, _ in trainer.model.named_parameters()}
    assert set(grads) == names
    assert all(torch.isfinite(g).all() for g in grads.values())


def test_predict_and_evaluate():
    template, dataset, arch = fixture()
    model = init_model(arch, 0)
    out = predict(model, dataset.p[:3], dataset.f[:3], dataset.norm, dataset.dt)
    assert out['u'].shape == (3, dataset.n_t, 2) and out['ddu'].shape == out['u'].shape
    metrics = evaluate(model, dataset)
    for key in ('solutions', 'first_derivatives', 'second_derivatives', 'average', 'solutions_per_dof'):
        assert key in metrics and np.isfinite(metrics[key])
    expected = np.mean([metrics['solutions'], metrics['first_derivatives'], metrics['second_derivatives']])
    assert abs(metrics['average'] - expected) < 1e-9


def test_gradnorm_fixed_point_at_equal_rates():
    w = LossWeights(np.array([0.5, 1.5, 1.0, 0.0]), [True, True, True, False]).normalized()
    initial = np.array([4.0, 2.0, 1.0, 0.0])
    out = gradnorm_update(w, np.array([2.0, 2.0, 2.0, 0.0]), 0.5 * initial, initial, 0.1)
    assert np.allclose(out.omega, w.omega)


def test_gradnorm_alpha_zero_ignores_training_rates():
    w = LossWeights(np.ones(4), [True, True, False, False], alpha=0.0)
    norms = np.array([3.0, 1.0, 0.0, 0.0])
    slow = gradnorm_update(w, norms, np.array([1.0, 0.1, 0.0, 0.0]), np.ones(4), 0.1)
    fast = gradnorm_update(w, norms, np.array([0.1, 1.0, 0.0, 0.0]), np.ones(4), 0.1)
    assert np.array_equal(slow.omega, fast.omega)
    assert slow.omega[0] < 1.0 < slow.omega[1]


def test_total_is_omega_weighted_sum():
    template, dataset, arch = fixture()
    weights = compute_en_weights(dataset, template, 0.02, seed=0)
    trainer = OperatorTrainer(init_model(arch, 0), dataset, template, config_for('T2', dde_window=0.1), weights)
    trainer.weights = LossWeights(np.array([0.4, 1.1, 1.5, 0.0]), [True, True, True, False])
    losses = trainer.compute_losses(np.arange(4))
    assert set(losses) == {'data', 'eq', 'dde'}
    expected = 0.4 * losses['data'] + 1.1 * losses['eq'] + 1.5 * losses['dde']
    assert torch.allclose(trainer.total(losses), expected, rtol=1e-12)


def test_zero_learning_rate_keeps_parameters():
    template, dataset, arch = fixture()
    model = init_model(arch, 5)
    before = flatten_parameters(model)
    model, report = train(model, dataset, template, config_for('T7', epochs=2, learning_rate=0.0))
    assert np.array_equal(flatten_parameters(model), before)
    assert np.isclose(report.rows[0]['loss_total'], report.rows[1]['loss_total'], rtol=1e-10)


def test_ablate_smoke_run():
    config = {
        'run': {'name': 'ablate-smoke', 'jobs': 1},
        'system': TWO_MASS,
        'space': SPACE,
        'dataset': {'n_train': 4, 'n_test': 2, 'n_virtual': 2, 'dt': 0.02, 'T': 1.0, 'seed': 3},
        'en': {'r': 0.02, 'seed': 1},
        'architecture': {'width': 4, 'depth_spectral': 1, 'k_modes': 4, 'depth_fc': 1, 'fc_width': 8,
                         'dtype': 'float64'},
        'training': {'epochs': 1, 'batch_size': 4, 'decay_steps': 1},
        'ablate': {'rows': ['T7'], 'seeds': [0, 1]},
        'logging': {'level': 'WARNING'},
    }
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'ablate.yaml')
        with open(path, 'w') as f:
            yaml.safe_dump(config, f)
        run_dir = os.path.join(tmp, 'run')
        for command in ('gen-data', 'en-weights'):
            assert run([command, '--config', path, '--run-dir', run_dir]) == 0, command
        assert run(['ablate', '--config', path, '--run-dir', run_dir, '--rows', 'T2,T5,T7,A1']) == 0
        report = pd.read_csv(os.path.join(run_dir, 'reports', 'ablate.csv'))
    assert report['label'].tolist() == ['T2', 'T5', 'T7', 'A1']
    assert report['n_seeds'].tolist() == [2, 2, 2, 2]
    assert np.isfinite(report[['solutions', 'first_derivatives', 'second_derivatives']].values).all()


if __name__ == "__main__":
    failures = 0
    for name, func in list(globals().items()):
        if name.startswith('test_') and callable(func):
            try:
                func()
                print(f"✅ {name}")
            except Exception as e:
                failures += 1
                print(f"❌ {name}: {e}")
    sys.exit(1 if failures else 0)
