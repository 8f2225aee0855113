#!/usr/bin/env python3
"""
System Core Tests
Assembly, parameter sampling, excitation synthesis and equation residuals
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import tempfile

import numpy as np
import pandas as pd
import yaml
from scipy import signal

from src.system_core import (
    ExcitationSpec, ParameterSample, ParameterSpace, ShapeMismatchError, SystemConfigError,
    SystemTemplate, build_system, excitation_from_unit, export_excitation_csv, generate_excitation,
    random_function_phases, residual, sample_parameters
)

ROOT = os.path.dirname(os.path.abspath(__file__))

SDOF = {
    'masses': [{'name': 'm', 'value': 1.0}],
    'connections': [{'name': 'k', 'type': 'spring', 'a': 'm', 'value': 4.0},
                    {'name': 'c', 'type': 'dashpot', 'a': 'm', 'value': 0.0}],
    'loads': [{'channel': 0, 'at': 'm'}],
}


def expect(error, func, *args, **kwargs):
    try:
        func(*args, **kwargs)
    except error:
        return
    raise AssertionError(f"expected {error.__name__}")


def test_single_mass_assembly():
    system = build_system(SDOF)
    assert np.allclose(system.M, [[1.0]])
    assert np.allclose(system.K, [[4.0]])
    assert np.allclose(system.C, [[0.0]])
    assert system.labels == ['m.x']


def test_two_mass_chain_is_psd():
    config = {
        'masses': [{'name': 'a', 'value': 1.0}, {'name': 'b', 'value': 1.0}],
        'connections': [{'type': 'spring', 'a': 'a', 'b': 'b', 'value': 1.0}],
    }
    system = build_system(config)
    assert np.allclose(system.K, [[1.0, -1.0], [-1.0, 1.0]])
    assert np.linalg.eigvalsh(system.K).min() > -1e-12


def test_assembly_errors():
    bad_mass = {'masses': [{'name': 'm', 'value': 0.0}]}
    expect(SystemConfigError, build_system, bad_mass)
    unknown = {'masses': [{'name': 'm', 'value': 1.0}],
               'connections': [{'type': 'spring', 'a': 'm', 'b': 'nowhere', 'value': 1.0}]}
    expect(SystemConfigError, build_system, unknown)
    assert issubclass(SystemConfigError, ValueError)


def test_desk_configuration():
    with open(os.path.join(ROOT, 'config', 'config.yaml')) as f:
        config = yaml.safe_load(f)
    template = SystemTemplate(config['system'], n_channels=2)
    assert template.n_dof == 11
    system = template.nominal
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.normal(size=system.n_dof)
        assert x @ system.M @ x > 0
    assert np.allclose(system.K, system.K.T)
    assert np.allclose(system.C, system.C.T)


def test_toy_configuration_has_43_dofs():
    with open(os.path.join(ROOT, 'config', 'toy43.yaml')) as f:
        config = yaml.safe_load(f)
    template = SystemTemplate(config['system'], n_channels=3)
    assert template.n_dof == 43
    assert template.labels[:3] == ['b1.x', 'b1.y', 'b1.z']
    assert template.labels[18] == 'beam.q1'
    assert template.labels[-1] == 'plate.q10'


def test_instantiate_overrides_elements():
    template = SystemTemplate(SDOF)
    system = template.instantiate(['m', 'k'], np.array([2.0, 9.0]))
    assert np.allclose(system.M, [[2.0]])
    assert np.allclose(system.K, [[9.0]])
    assert np.allclose(template.nominal.K, [[4.0]])


def _space(parameters, kind='band_limited_noise', band=(1.0, 50.0), T=2.0, dt=0.005):
    space_cfg = {'parameters': parameters,
                 'excitation': {'kind': kind, 'channels': 1, 'band': list(band),
                                'psd': {'S0': 1.0, 'omega_g': 15.0, 'zeta_g': 0.6}}}
    return ParameterSpace.from_config(space_cfg, {'dt': dt, 'T': T})


def test_fixed_parameters_ignore_seed():
    space = _space([{'name': 'k', 'dist': 'fixed', 'value': 3.0}])
    for seed in (0, 1, 99):
        assert np.allclose(sample_parameters(space, seed).p, [3.0])


def test_sampling_is_deterministic():
    space = _space([{'name': 'k', 'dist': 'uniform', 'lo': 1.0, 'hi': 2.0}])
    a = sample_parameters(space, 42)
    b = sample_parameters(space, 42)
    assert np.array_equal(a.p, b.p)
    assert np.array_equal(a.f, b.f)
    assert a.f.shape == (401, 1)


def test_uniform_mean():
    space = _space([{'name': 'k', 'dist': 'uniform', 'lo': 1.0, 'hi': 2.0}], T=0.02)
    draws = np.array([sample_parameters(space, s).p[0] for s in range(10000)])
    assert np.all((draws >= 1.0) & (draws <= 2.0))
    assert 1.49 <= draws.mean() <= 1.51


def test_invalid_bounds():
    expect(SystemConfigError, _space, [{'name': 'k', 'dist': 'uniform', 'lo': 2.0, 'hi': 1.0}])


def test_zero_psd_gives_zero_signal():
    spec = ExcitationSpec(kind='band_limited_noise', channels=2, band=(1.0, 10.0), psd={'S0': 0.0})
    assert np.allclose(generate_excitation(spec, 0.01, 2.0, 3), 0.0)


def test_white_band_is_zero_mean():
    spec = ExcitationSpec(kind='band_limited_noise', channels=1, band=(1.0, 50.0), psd={'S0': 1.0})
    x = generate_excitation(spec, 0.005, 4.0, 5)[:, 0]
    assert abs(x.mean()) <= 3 * x.std() / np.sqrt(x.size)


def test_excitation_is_pure():
    spec = ExcitationSpec(kind='kanai_tajimi', channels=2, band=(0.2, 40.0))
    assert np.array_equal(generate_excitation(spec, 0.005, 3.0, 8), generate_excitation(spec, 0.005, 3.0, 8))


def test_kanai_tajimi_welch_estimate():
    dt, T = 0.005, 1000.0
    spec = ExcitationSpec(kind='kanai_tajimi', channels=1, band=(0.5, 20.0),
                          psd={'S0': 0.3, 'omega_g': 15.0, 'zeta_g': 0.6})
    x = generate_excitation(spec, dt, T, 12)[:-1, 0]
    freqs, estimate = signal.welch(x, fs=1.0 / dt, nperseg=1024)
    target = spec.one_sided_psd(freqs)
    for lo in np.arange(1.0, 19.0, 2.0):
        band = (freqs >= lo) & (freqs < lo + 2.0)
        ratio = estimate[band].mean() / target[band].mean()
        assert abs(ratio - 1.0) < 0.1, f"[{lo}, {lo + 2.0}) Hz: ratio {ratio:.3f}"


def test_random_function_excitation_follows_theta():
    spec = ExcitationSpec(kind='band_limited_noise', channels=2, band=(1.0, 5.0),
                          representation='random_function')
    assert spec.n_random == 2
    a = excitation_from_unit(spec, 0.01, 4.0, [0.2, 0.7])
    assert np.array_equal(a, excitation_from_unit(spec, 0.01, 4.0, [0.2, 0.7]))
    assert not np.allclose(a[:, 0], a[:, 1])
    draws = np.random.default_rng(9).uniform(0.0, 1.0, size=2)
    assert np.array_equal(generate_excitation(spec, 0.01, 4.0, 9), excitation_from_unit(spec, 0.01, 4.0, draws))
    expect(ShapeMismatchError, excitation_from_unit, spec, 0.01, 4.0, [0.2])
    expect(SystemConfigError, excitation_from_unit,
           ExcitationSpec(kind='band_limited_noise', channels=1, band=(1.0, 5.0)), 0.01, 4.0, [0.2])
    expect(SystemConfigError, ExcitationSpec(representation='karhunen').validate, 0.01)
    assert ExcitationSpec(kind='harmonic', representation='random_function').n_random == 0


def test_random_function_phases_use_distinct_indices():
    active = np.zeros(40, dtype=bool)
    active[5:22] = True
    base = random_function_phases(0.0, active, mapping_seed=3)
    assert np.allclose(base[active], -0.25 * np.pi) and np.all(base[~active] == 0.0)
    index = -(random_function_phases(0.3, active, mapping_seed=3)[active] + 0.25 * np.pi) / 0.3
    assert np.allclose(np.sort(index), np.arange(1, 18))
    assert not np.allclose(index, np.arange(1, 18))


def test_random_function_ensemble_has_target_covariance():
    dt, T = 0.01, 4.0
    spec = ExcitationSpec(kind='band_limited_noise', channels=1, band=(1.0, 5.0), psd={'S0': 2.0},
                          representation='random_function', mapping_seed=5)
    n = 256
    x = np.stack([excitation_from_unit(spec, dt, T, [(q + 0.5) / n])[:, 0] for q in range(n)])
    N = x.shape[1] - 1
    freqs = np.fft.rfftfreq(N, dt)
    S = spec.one_sided_psd(freqs)
    S[0] = S[-1] = 0.0
    df = 1.0 / (N * dt)
    assert np.abs(x.mean(axis=0)).max() < 1e-9
    assert np.allclose((x ** 2).mean(axis=0), (S * df).sum(), rtol=1e-9)
    for lag in (7, 31):
        cov = (x[:, :N - lag] * x[:, lag:N]).mean(axis=0)
        expected = (S * df * np.cos(2.0 * np.pi * freqs * lag * dt)).sum()
        assert np.allclose(cov, expected, atol=1e-9)


def test_band_above_nyquist_rejected():
    spec = ExcitationSpec(kind='band_limited_noise', channels=1, band=(1.0, 60.0))
    expect(SystemConfigError, generate_excitation, spec, 0.01, 1.0, 0)


def test_residual_zero_state():
    system = build_system(SDOF)
    sample = ParameterSample(p=np.zeros(0), f=np.zeros((11, 1)), dt=0.1)
    z = np.zeros((11, 1))
    assert np.allclose(residual(system, sample, z, z, z).values, 0.0)


def test_residual_exact_free_vibration():
    system = build_system(SDOF)
    t = np.linspace(0, 3, 301)
    w = 2.0
    u = np.cos(w * t)[:, None]
    du = -w * np.sin(w * t)[:, None]
    ddu = -w ** 2 * np.cos(w * t)[:, None]
    sample = ParameterSample(p=np.zeros(0), f=np.zeros((t.size, 1)), dt=0.01)
    assert np.abs(residual(system, sample, u, du, ddu).values).max() < 1e-12


def test_residual_linearity():
    config = {
        'masses': [{'name': 'a', 'value': 1.5}, {'name': 'b', 'value': 0.7}],
        'connections': [{'type': 'spring', 'a': 'a', 'b': 'b', 'value': 3.0},
                        {'type': 'spring', 'a': 'a', 'value': 2.0},
                        {'type': 'dashpot', 'a': 'b', 'value': 0.4}],
        'loads': [{'channel': 0, 'at': 'a'}],
    }
    system = build_system(config)
    rng = np.random.default_rng(1)
    f = rng.normal(size=(50, 1))
    sample = ParameterSample(p=np.zeros(0), f=f, dt=0.01)
    zero = ParameterSample(p=np.zeros(0), f=np.zeros_like(f), dt=0.01)
    s1 = [rng.normal(size=(50, 2)) for _ in range(3)]
    s2 = [rng.normal(size=(50, 2)) for _ in range(3)]
    a, b = 0.3, -1.7
    combo = [a * x + b * y for x, y in zip(s1, s2)]
    lhs = residual(system, sample, *combo).values
    rhs = (a * residual(system, zero, *s1).values + b * residual(system, zero, *s2).values
           + residual(system, sample, *[np.zeros((50, 2))] * 3).values)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_residual_shape_mismatch():
    system = build_system(SDOF)
    sample = ParameterSample(p=np.zeros(0), f=np.zeros((5, 1)), dt=0.1)
    expect(ShapeMismatchError, residual, system, sample, np.zeros((4, 1)), np.zeros((5, 1)), np.zeros((5, 1)))


def test_excitation_csv():
    space = _space([], band=(1.0, 20.0), T=0.1, dt=0.01)
    sample = sample_parameters(space, 1)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'f.csv')
        export_excitation_csv(sample, path)
        df = pd.read_csv(path)
    assert list(df.columns) == ['time', 'channel_0']
    assert len(df) == 11
    assert np.allclose(df['channel_0'].to_numpy(), sample.f[:, 0])


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
