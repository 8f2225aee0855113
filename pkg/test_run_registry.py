#!/usr/bin/env python3
"""
Run Registry Tests
Artifact hashing, evaluation replacement and seed-averaged reports
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import hashlib
import tempfile

import pandas as pd

from src.run_registry import RunRegistry


def evaluation(label, seed, solutions, split='test', width=8):
    return {
        'label': label, 'row_name': label, 'seed': seed, 'epochs': 10, 'width': width,
        'depth_spectral': 2, 'k_modes': 4, 'depth_fc': 1, 'fc_width': 8, 'split': split,
        'solutions': solutions, 'first_derivatives': 2 * solutions, 'second_derivatives': 3 * solutions,
        'average': 2 * solutions, 'solutions_per_dof': solutions, 'first_derivatives_per_dof': solutions,
        'second_derivatives_per_dof': solutions,
    }


def test_artifact_hash_and_refresh():
    with tempfile.TemporaryDirectory() as tmp:
        registry = RunRegistry(os.path.join(tmp, 'nested', 'registry.db'))
        path = os.path.join(tmp, 'a.bin')
        with open(path, 'wb') as f:
            f.write(b'abc')
        sha = registry.record_artifact('dataset', path)
        assert sha == hashlib.sha256(b'abc').hexdigest()
        with open(path, 'wb') as f:
            f.write(b'abcd')
        registry.record_artifact('dataset', path)
        artifacts = registry.get_artifacts('dataset')
        assert len(artifacts) == 1
        assert artifacts['sha256'].iloc[0] == hashlib.sha256(b'abcd').hexdigest()
        assert registry.get_artifacts('model').empty


def test_missing_artifact_rejected():
    with tempfile.TemporaryDirectory() as tmp:
        registry = RunRegistry(os.path.join(tmp, 'registry.db'))
        try:
            registry.record_artifact('model', os.path.join(tmp, 'nothing'))
        except FileNotFoundError:
            return
        raise AssertionError("expected FileNotFoundError")


def test_evaluations_replace_same_label_seed_split():
    with tempfile.TemporaryDirectory() as tmp:
        registry = RunRegistry(os.path.join(tmp, 'registry.db'))
        registry.save_evaluations([evaluation('T1', 0, 1.0), evaluation('T1', 0, 1.0, split='train')])
        registry.save_evaluations([evaluation('T1', 0, 4.0)])
        test_rows = registry.get_evaluations(['T1'])
        assert len(test_rows) == 1 and test_rows['solutions'].iloc[0] == 4.0
        assert len(registry.get_evaluations(['T1'], split='train')) == 1
        assert registry.save_evaluations([]) == 0


def test_summary_averages_seeds_in_label_order():
    with tempfile.TemporaryDirectory() as tmp:
        registry = RunRegistry(os.path.join(tmp, 'registry.db'))
        registry.save_evaluations([
            evaluation('T7', 0, 2.0), evaluation('T7', 1, 4.0),
            evaluation('T1', 0, 1.0), evaluation('T1', 1, 1.0), evaluation('T1', 2, 4.0),
        ])
        report = registry.summary_report(['T7', 'T1'])
        assert report['label'].tolist() == ['T7', 'T1']
        assert report['solutions'].tolist() == [3.0, 2.0]
        assert report['average'].tolist() == [6.0, 4.0]
        assert report['n_seeds'].tolist() == [2, 3]
        assert registry.summary_report(['none']).empty


def test_export_report_formats():
    with tempfile.TemporaryDirectory() as tmp:
        registry = RunRegistry(os.path.join(tmp, 'registry.db'))
        df = pd.DataFrame({'label': ['a', 'b'], 'solutions': [1.25, 2.5]})
        csv = registry.export_report(df, os.path.join(tmp, 'r.csv'))
        assert pd.read_csv(csv).equals(df)
        parquet = registry.export_report(df, os.path.join(tmp, 'r.csv'), 'parquet')
        assert parquet.endswith('r.parquet')
        assert pd.read_parquet(parquet).equals(df)


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
