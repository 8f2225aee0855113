#!/usr/bin/env python3
"""
Pipeline Command Line Tests
Exit codes, reproducible data generation and an end-to-end run of every
subcommand on a two-mass system
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import filecmp
import json
import tempfile

import pandas as pd
import yaml

from src.cli import build_parser, run
from src.oracle import dataset_hash, load_dataset
from src.run_registry import RunRegistry

SMALL_CONFIG = {
    'run': {'name': 'small', 'jobs': 1},
    'system': {
        'masses': [{'name': 'a', 'value': 1.0}, {'name': 'b', 'value': 1.0}],
        'connections': [
            {'name': 'ka', 'type': 'spring', 'a': 'a', 'value': 30.0},
            {'name': 'kab', 'type': 'spring', 'a': 'a', 'b': 'b', 'value': 20.0},
            {'name': 'ca', 'type': 'dashpot', 'a': 'a', 'value': 0.5},
        ],
        'loads': [{'channel': 0, 'at': 'b'}],
    },
    'space': {
        'parameters': [{'name': 'kab', 'dist': 'uniform', 'lo': 15.0, 'hi': 25.0}],
        'excitation': {'kind': 'band_limited_noise', 'channels': 1, 'band': [0.5, 5.0], 'psd': {'S0': 0.01}},
    },
    'dataset': {'n_train': 6, 'n_test': 2, 'n_virtual': 2, 'dt': 0.02, 'T': 1.0, 'seed': 3},
    'en': {'r': 0.02, 'seed': 1},
    'architecture': {'width': 4, 'depth_spectral': 1, 'k_modes': 4, 'depth_fc': 1, 'fc_width': 8,
                     'dtype': 'float64'},
    'training': {'row': 'T2', 'epochs': 2, 'batch_size': 4, 'decay_steps': 1},
    'pdem': {'n_sel': 8, 'provider': 'oracle', 'quantity': {'dof': 'b.x'},
             'x_grid': {'lo': -0.2, 'hi': 0.2, 'n': 201}, 'dt_pde': 0.0005, 'on_range': 'widen'},
    'mc': {'n': 40, 'provider': 'oracle', 'batch_size': 16, 'threshold': 0.01},
    'compare': {'times': [0.5, 1.0], 'threshold': 0.01},
    'sweep': {'grid': {'width': [4, 6]}, 'epochs': 1},
    'ablate': {'rows': ['T7'], 'seeds': [0, 1]},
    'export': {'pair': 0, 'dofs': ['b.x'], 'times': [0.2, 0.5, 1.0]},
    'logging': {'level': 'WARNING'},
}


def write_config(directory: str, config=None) -> str:
    path = os.path.join(directory, 'small.yaml')
    with open(path, 'w') as f:
        yaml.safe_dump(config or SMALL_CONFIG, f)
    return path


def invoke(command: str, config: str, run_dir: str, *extra) -> int:
    return run([command, '--config', config, '--run-dir', run_dir, *extra])


def test_parser_knows_every_command():
    parser = build_parser()
    for command in ('gen-data', 'en-weights', 'train', 'eval', 'predict', 'recover', 'pdem', 'mc',
                    'compare', 'sweep', 'ablate', 'export'):
        args = parser.parse_args([command] + (['--body', 'beam'] if command == 'recover' else [])
                                 + (['--kind', 'pdf'] if command == 'export' else []))
        assert args.command == command


def test_help_exits_zero():
    assert run(['--help']) == 0
    assert run(['train', '--help']) == 0


def test_unknown_flag_exits_one_without_touching_disk():
    with tempfile.TemporaryDirectory() as tmp:
        run_dir = os.path.join(tmp, 'run')
        assert run(['gen-data', '--bogus', '--run-dir', run_dir]) == 1
        assert not os.path.exists(run_dir)


def test_missing_subcommand_exits_one():
    assert run([]) == 1


def test_bad_override_and_config_exit_one():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp)
        run_dir = os.path.join(tmp, 'run')
        assert invoke('gen-data', config, run_dir, '--set', 'dataset.nope=3') == 1
        assert invoke('gen-data', config, run_dir, '--set', 'dataset.dt') == 1
        assert invoke('gen-data', os.path.join(tmp, 'missing.yaml'), run_dir) == 1
        assert not os.path.exists(run_dir)


def test_gen_data_is_reproducible():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp)
        first, second = os.path.join(tmp, 'first'), os.path.join(tmp, 'second')
        assert invoke('gen-data', config, first) == 0
        assert invoke('gen-data', config, second, '--jobs', '2') == 0
        assert dataset_hash(load_dataset(os.path.join(first, 'dataset'))) == \
            dataset_hash(load_dataset(os.path.join(second, 'dataset')))
        assert os.path.exists(os.path.join(first, 'config.snapshot.yaml'))
        artifacts = RunRegistry(os.path.join(first, 'registry.db')).get_artifacts('dataset')
        assert len(artifacts) == 1


def test_override_reaches_the_run():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp)
        run_dir = os.path.join(tmp, 'run')
        assert invoke('gen-data', config, run_dir, '--set', 'dataset.n_test=3') == 0
        assert load_dataset(os.path.join(run_dir, 'dataset')).n_test == 3
        with open(os.path.join(run_dir, 'config.snapshot.yaml')) as f:
            assert yaml.safe_load(f)['dataset']['n_test'] == 3


def test_steps_out_of_order_exit_one():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp)
        run_dir = os.path.join(tmp, 'run')
        assert invoke('en-weights', config, run_dir) == 1
        assert invoke('compare', config, run_dir) == 1
        assert invoke('export', config, run_dir, '--kind', 'losses') == 1


def test_no_training_split_is_rejected_downstream():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp)
        run_dir = os.path.join(tmp, 'run')
        assert invoke('gen-data', config, run_dir, '--set', 'dataset.n_train=0') == 0
        assert invoke('en-weights', config, run_dir) == 1


def test_full_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp)
        run_dir = os.path.join(tmp, 'run')
        reports = os.path.join(run_dir, 'reports')

        for command in ('gen-data', 'en-weights', 'train', 'eval'):
            assert invoke(command, config, run_dir) == 0, command
        table = pd.read_csv(os.path.join(reports, 'eval.csv'))
        assert table['row_name'].tolist() == ['T2']
        assert (table['average'] >= 0).all()
        report = pd.read_csv(os.path.join(reports, 'train_report.csv'))
        assert len(report) == 2 and 'epoch' in report.columns

        assert invoke('predict', config, run_dir, '--n', '3', '--seed', '5') == 0
        with open(os.path.join(reports, 'predict', 'manifest.json')) as f:
            manifest = json.load(f)
        assert manifest['arrays']['u']['shape'] == [3, 51, 2]

        assert invoke('recover', config, run_dir, '--body', 'beam') == 1

        for command in ('pdem', 'mc', 'compare'):
            assert invoke(command, config, run_dir) == 0, command
        compare = pd.read_csv(os.path.join(reports, 'compare.csv'))
        assert compare['t'].tolist() == [0.5, 1.0]
        damage = pd.read_csv(os.path.join(reports, 'damage.csv'))
        assert damage['channel'].tolist() == ['b.x']
        assert 0.0 <= damage['dp'].iloc[0] <= 1.0

        assert invoke('export', config, run_dir, '--kind', 'pdf') == 0
        plots = os.path.join(run_dir, 'plots')
        slices = sorted(f for f in os.listdir(plots) if f.startswith('pdf_t'))
        assert slices == ['pdf_t0.200.csv', 'pdf_t0.500.csv', 'pdf_t1.000.csv']
        copies = os.path.join(tmp, 'copies')
        os.makedirs(copies)
        for name in slices:
            os.replace(os.path.join(plots, name), os.path.join(copies, name))
        assert invoke('export', config, run_dir, '--kind', 'pdf') == 0
        for name in slices:
            assert filecmp.cmp(os.path.join(plots, name), os.path.join(copies, name), shallow=False)
        columns = pd.read_csv(os.path.join(plots, slices[0])).columns.tolist()
        assert columns == ['x', 'p_pdem', 'p_mc']

        for kind in ('trajectory', 'losses', 'omega', 'damage'):
            assert invoke('export', config, run_dir, '--kind', kind) == 0, kind
        trajectory = pd.read_csv(os.path.join(plots, 'trajectory_pair0.csv'))
        assert trajectory.columns.tolist() == ['t', 'truth_dof_1', 'pred_dof_1']

        assert invoke('sweep', config, run_dir) == 0
        sweep = pd.read_csv(os.path.join(reports, 'sweep.csv'))
        assert sorted(sweep['width'].tolist()) == [4, 6]

        assert invoke('ablate', config, run_dir) == 0
        ablate = pd.read_csv(os.path.join(reports, 'ablate.csv'))
        assert ablate['label'].tolist() == ['T7'] and ablate['n_seeds'].tolist() == [2]

        kinds = set(RunRegistry(os.path.join(run_dir, 'registry.db')).get_artifacts()['kind'])
        assert {'dataset', 'weights', 'model', 'report', 'density', 'prediction', 'plot'} <= kinds


def test_sweep_rejects_unknown_keys():
    with tempfile.TemporaryDirectory() as tmp:
        config = dict(SMALL_CONFIG, sweep={'grid': {'depth': [1, 2]}})
        path = write_config(tmp, config)
        run_dir = os.path.join(tmp, 'run')
        assert invoke('gen-data', path, run_dir) == 0
        assert invoke('sweep', path, run_dir) == 1


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
