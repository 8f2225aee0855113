#!/usr/bin/env python3
"""
Pipeline Command Line
Subcommands for data generation, equation weights, training, evaluation,
prediction, field recovery, density evolution, Monte Carlo, comparison,
sweeps, ablations and plot export
"""

import argparse
import copy
import itertools
import json
import logging
import os
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .config_loader import default_run_root, load_config, setup_logging, write_snapshot
from .equation_normalizer import compute_en_weights, load_en_weights, save_en_weights
from .modal import ModeShapeTable, euler_beam_modes, recover_field
from .monte_carlo import (
    OracleProvider, QuantitySelector, SurrogateProvider, damage_probability, damage_probability_at,
    mc_propagate, pdf_estimate
)
from .operator_model import Architecture, init_model, load_checkpoint, save_checkpoint
from .oracle import Dataset, build_dataset, dataset_hash, load_dataset, save_dataset, write_blob
from .pdem import PDEMSolver, PDFGrid, compare_pdf, make_x_grid
from .plot_export import export_plotdata
from .run_registry import RunRegistry
from .system_core import ParameterSpace, SystemTemplate, sample_parameters
from .trainer import TrainConfig, evaluate, predict, train

logger = logging.getLogger(__name__)

COMMANDS = ('gen-data', 'en-weights', 'train', 'eval', 'predict', 'recover', 'pdem', 'mc',
            'compare', 'sweep', 'ablate', 'export')
RUN_LAYOUT = ('dataset', 'weights', 'model', 'reports', 'plots')


class CLIUsageError(ValueError):
    """Raised for invalid command lines"""


class PipelineArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting on bad input"""

    def error(self, message):
        raise CLIUsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = PipelineArgumentParser(prog='run_pipeline', description='Coupled-dynamics operator pipeline')
    common = PipelineArgumentParser(add_help=False)
    common.add_argument('--config', default='config/config.yaml', help='Path to configuration file')
    common.add_argument('--run-dir', help='Run directory (default: <run root>/<run.name>)')
    common.add_argument('--jobs', type=int, default=None, help='Worker threads (default: logical cores)')
    common.add_argument('--set', dest='overrides', action='append', default=[],
                        metavar='SECTION.KEY=VALUE', help='Override a scalar configuration field')

    sub = parser.add_subparsers(dest='command', parser_class=PipelineArgumentParser)
    sub.add_parser('gen-data', parents=[common], help='Build and save the dataset')
    sub.add_parser('en-weights', parents=[common], help='Compute equation-normalization weights')

    p = sub.add_parser('train', parents=[common], help='Train the operator model')
    p.add_argument('--row', help='Named loss composition (T1..T7, A1)')

    p = sub.add_parser('eval', parents=[common], help='rLSE table of the trained model')
    p.add_argument('--split', choices=['train', 'test'], default='test')

    p = sub.add_parser('predict', parents=[common], help='Predict fresh samples with the trained model')
    p.add_argument('--n', type=int, default=10, help='Number of samples')
    p.add_argument('--seed', type=int, default=0, help='Sampling seed')

    p = sub.add_parser('recover', parents=[common], help='Recover a flexible-body field from modal responses')
    p.add_argument('--body', required=True, help='Flexible body name')
    p.add_argument('--shapes', help='Mode-shape table CSV (analytic beam modes when omitted)')
    p.add_argument('--points', default='', help='Comma-separated coordinates for analytic modes')
    p.add_argument('--pair', type=int, default=None, help='Dataset pair (default: export.pair)')
    p.add_argument('--source', choices=['truth', 'model'], default='truth')

    p = sub.add_parser('pdem', parents=[common], help='Density evolution of the monitored quantity')
    p.add_argument('--provider', choices=['oracle', 'surrogate'])

    p = sub.add_parser('mc', parents=[common], help='Monte Carlo propagation and damage probability')
    p.add_argument('--provider', choices=['oracle', 'surrogate'])

    sub.add_parser('compare', parents=[common], help='Compare density-evolution and Monte Carlo densities')
    sub.add_parser('sweep', parents=[common], help='Architecture sweep report')

    p = sub.add_parser('ablate', parents=[common], help='Train and evaluate named loss rows')
    p.add_argument('--rows', help='Comma-separated rows (default: ablate.rows)')

    p = sub.add_parser('export', parents=[common], help='Export plot data')
    p.add_argument('--kind', required=True, choices=['trajectory', 'losses', 'omega', 'pdf', 'damage'])
    return parser


class Pipeline:
    """One command invocation against a run directory"""

    def __init__(self, config: Dict, run_dir: str, jobs: int):
        self.config = config
        self.run_dir = run_dir
        self.jobs = jobs
        self.registry: Optional[RunRegistry] = None
        self._template: Optional[SystemTemplate] = None
        self._space: Optional[ParameterSpace] = None

    def path(self, *parts) -> str:
        return os.path.join(self.run_dir, *parts)

    def prepare(self):
        """Create the run layout, snapshot the configuration and open the registry"""
        for name in RUN_LAYOUT:
            os.makedirs(self.path(name), exist_ok=True)
        write_snapshot(self.config, self.path('config.snapshot.yaml'))
        self.registry = RunRegistry(self.path('registry.db'))

    @property
    def template(self) -> SystemTemplate:
        if self._template is None:
            channels = int(self.config['space']['excitation']['channels'])
            self._template = SystemTemplate(self.config['system'], n_channels=channels)
        return self._template

    @property
    def space(self) -> ParameterSpace:
        if self._space is None:
            self._space = ParameterSpace.from_config(self.config['space'], self.config['dataset'])
            self.template.check_space(self._space)
        return self._space

    def dataset(self) -> Dataset:
        dataset = load_dataset(self.path('dataset'))
        if dataset.norm is None:
            raise ValueError("Dataset has no training split, run gen-data with dataset.n_train > 0")
        return dataset

    def record(self, kind: str, path: str):
        self.registry.record_artifact(kind, path)

    # gen-data / en-weights

    def gen_data(self):
        ds_cfg = self.config['dataset']
        dataset = build_dataset(self.template, self.space, int(ds_cfg['n_train']), int(ds_cfg['n_test']),
                                int(ds_cfg['n_virtual']), int(ds_cfg['seed']), self.jobs)
        manifest = save_dataset(dataset, self.path('dataset'))
        self.record('dataset', manifest)
        logger.info(f"Dataset hash {dataset_hash(dataset)}")

    def en_weights(self):
        dataset = self.dataset()
        en = self.config['en']
        weights = compute_en_weights(dataset, self.template, float(en['r']), int(en['seed']),
                                     float(en['cap']), int(en['draws']), self.jobs)
        self.record('weights', save_en_weights(weights, self.path('weights')))

    # training and evaluation

    def _architecture(self, dataset: Dataset, overrides: Optional[Dict] = None) -> Architecture:
        cfg = dict(self.config['architecture'])
        cfg.update(overrides or {})
        return Architecture.from_config(cfg, len(dataset.param_names), dataset.n_channels,
                                        dataset.n_dof, dataset.n_t)

    def _train_once(self, dataset: Dataset, training: Dict, arch_overrides: Optional[Dict] = None,
                    model_dir: Optional[str] = None, report_path: Optional[str] = None):
        config = TrainConfig.from_config(training, self.config['ablate']['presets'])
        weights = None
        if config.en and (config.losses['eq'] or config.losses['veq']):
            weights = load_en_weights(self.path('weights'), dataset_hash(dataset))
        arch = self._architecture(dataset, arch_overrides)
        model = init_model(arch, int(self.config['architecture']['seed']))
        model, report = train(model, dataset, self.template, config, weights)
        if model_dir:
            self.record('model', save_checkpoint(model, model_dir, {
                'dataset_hash': dataset_hash(dataset), 'row': config.row,
                'epochs': config.epochs, 'seed': config.seed,
            }))
        if report_path:
            report.to_csv(report_path)
            self.record('report', report_path)
        return model, config

    def train(self, row: Optional[str] = None):
        training = copy.deepcopy(self.config['training'])
        if row:
            training['row'] = row
        self._train_once(self.dataset(), training, model_dir=self.path('model'),
                         report_path=self.path('reports', 'train_report.csv'))

    def _evaluation_row(self, model, dataset: Dataset, label: str, config: TrainConfig,
                        split: str = 'test') -> Dict:
        idx = dataset.test_idx if split == 'test' else dataset.train_idx
        metrics = evaluate(model, dataset, idx)
        arch = model.arch
        row = {
            'label': label, 'row_name': config.row or 'custom', 'seed': int(config.seed),
            'epochs': int(config.epochs), 'width': arch.width, 'depth_spectral': arch.depth_spectral,
            'k_modes': arch.k_modes, 'depth_fc': arch.depth_fc, 'fc_width': arch.fc_width,
            'split': split,
        }
        row.update(metrics)
        return row

    def eval(self, split: str = 'test'):
        dataset = self.dataset()
        model, manifest = load_checkpoint(self.path('model'))
        if manifest.get('dataset_hash') != dataset_hash(dataset):
            raise ValueError("Model was trained on a different dataset")
        config = TrainConfig.from_config(self.config['training'], self.config['ablate']['presets'])
        config.row = manifest.get('row') or config.row
        row = self._evaluation_row(model, dataset, 'eval', config, split)
        self.registry.save_evaluations([row])
        table = pd.DataFrame([{k: row[k] for k in (
            'row_name', 'split', 'solutions', 'first_derivatives', 'second_derivatives', 'average',
            'solutions_per_dof', 'first_derivatives_per_dof', 'second_derivatives_per_dof')}])
        path = self.registry.export_report(table, self.path('reports', 'eval.csv'))
        self.record('report', path)
        logger.info(
            f"rLSE ({split}): solutions {row['solutions']:.2f}%, 1st {row['first_derivatives']:.2f}%, "
            f"2nd {row['second_derivatives']:.2f}%, average {row['average']:.2f}%"
        )

    def predict(self, n: int, seed: int):
        if n < 1:
            raise ValueError("--n must be at least 1")
        dataset = self.dataset()
        model, _ = load_checkpoint(self.path('model'))
        seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]
        samples = [sample_parameters(self.space, s) for s in seeds]
        p = np.stack([s.p for s in samples])
        f = np.stack([s.f for s in samples])
        out = predict(model, p, f, dataset.norm, dataset.dt)
        directory = self.path('reports', 'predict')
        os.makedirs(directory, exist_ok=True)
        arrays = {'p': p, 'f': f, **out}
        manifest = {
            'seed': seed, 'seeds': seeds, 'dt': dataset.dt, 'dof_labels': dataset.dof_labels,
            'arrays': {k: {'file': f"{k}.bin", 'shape': list(v.shape),
                           'sha256': write_blob(v, os.path.join(directory, f"{k}.bin"))}
                       for k, v in arrays.items()},
        }
        path = os.path.join(directory, 'manifest.json')
        with open(path, 'w') as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        self.record('prediction', path)

    def recover(self, body: str, shapes: Optional[str], points: str, pair: Optional[int], source: str):
        dataset = self.dataset()
        pair = int(self.config['export']['pair'] if pair is None else pair)
        if not 0 <= pair < dataset.n_labeled:
            raise ValueError(f"Pair {pair} is not a labeled pair")
        body_cfg = self.template.body_config(body)
        sl = self.template.body_slices[body]
        if shapes:
            table = ModeShapeTable.from_csv(shapes)
        else:
            coords = [float(x) for x in points.split(',') if x.strip()]
            if not coords:
                coords = list(np.linspace(0.0, float(body_cfg['length']), 11))
            table = euler_beam_modes(float(body_cfg['m_r']), float(body_cfg['length']),
                                     int(body_cfg['n_modes']), coords)
        if source == 'model':
            model, _ = load_checkpoint(self.path('model'))
            u = predict(model, dataset.p[pair:pair + 1], dataset.f[pair:pair + 1], dataset.norm, dataset.dt)['u'][0]
        else:
            u = dataset.u[pair]
        field = recover_field(table, u[:, sl])
        df = pd.DataFrame({'t': np.arange(dataset.n_t) * dataset.dt})
        for k in range(field.shape[1]):
            df[f"x_{table.points[k, 0]:.6g}"] = field[:, k]
        path = self.path('reports', f"recover_{body}_pair{pair}.csv")
        df.to_csv(path, index=False, float_format='%.10g')
        self.record('report', path)

    # uncertainty propagation

    def _provider(self, kind: str, dataset: Optional[Dataset] = None):
        if kind == 'oracle':
            return OracleProvider(self.template, self.space, self.jobs)
        dataset = dataset or self.dataset()
        model, _ = load_checkpoint(self.path('model'))
        return SurrogateProvider(model, dataset.norm, dataset.dt, int(self.config['mc']['batch_size']))

    def _selector(self) -> QuantitySelector:
        return QuantitySelector.from_config(self.template, self.config['pdem']['quantity'])

    def _x_grid(self) -> np.ndarray:
        existing = self.path('reports', 'pdem.json')
        if os.path.exists(existing):
            return PDFGrid.load(self.path('reports'), 'pdem').x_grid
        g = self.config['pdem']['x_grid']
        return make_x_grid(float(g['lo']), float(g['hi']), int(g['n']))

    def pdem(self, provider: Optional[str]):
        cfg = self.config['pdem']
        g = cfg['x_grid']
        solver = PDEMSolver(self._provider(provider or cfg['provider']), self._selector(),
                            float(cfg['dt_pde']), cfg['limiter'], cfg['on_range'], self.jobs,
                            int(cfg['excitation_seed']))
        grid = solver.run(self.space, int(cfg['n_sel']), make_x_grid(float(g['lo']), float(g['hi']), int(g['n'])),
                          search_limit=int(cfg['search_limit']))
        self.record('density', grid.save(self.path('reports'), 'pdem'))
        csv = self.path('reports', 'pdem.csv')
        grid.to_csv(csv)
        self.record('report', csv)

    def mc(self, provider: Optional[str]):
        cfg = self.config['mc']
        ensemble = mc_propagate(self._provider(provider or cfg['provider']), self.space, int(cfg['n']),
                                int(cfg['seed']), self._selector(), int(cfg['batch_size']),
                                bool(cfg['derivatives']))
        grid = pdf_estimate(ensemble, self._x_grid(), kde=bool(cfg['kde']))
        self.record('density', grid.save(self.path('reports'), 'mc'))

        damage = damage_probability(ensemble, float(cfg['threshold']))
        path = self.path('reports', 'damage.csv')
        damage.to_frame().to_csv(path, index=False, float_format='%.10g')
        self.record('report', path)

        dp_t = pd.DataFrame({'t': ensemble.t_grid,
                             'dp_star': damage_probability_at(ensemble, float(cfg['threshold']))})
        path = self.path('reports', 'damage_t.csv')
        dp_t.to_csv(path, index=False, float_format='%.10g')
        self.record('report', path)
        logger.info(f"Damage probability {damage.dp.tolist()} at threshold {cfg['threshold']}")

    def compare(self):
        reports = self.path('reports')
        for name in ('pdem', 'mc'):
            if not os.path.exists(os.path.join(reports, f"{name}.json")):
                raise FileNotFoundError(f"Run '{name}' before 'compare'")
        cfg = self.config['compare']
        result = compare_pdf(PDFGrid.load(reports, 'pdem'), PDFGrid.load(reports, 'mc'),
                             cfg['times'], float(cfg['threshold']))
        path = os.path.join(reports, 'compare.csv')
        result['table'].to_csv(path, index=False, float_format='%.10g')
        self.record('report', path)
        logger.info(f"Density comparison: max slice L1 {result['max_l1']:.4f}, mean {result['mean_l1']:.4f}")

    # sweeps and ablations

    def sweep(self):
        grid = self.config['sweep']['grid']
        if not grid:
            raise ValueError("sweep.grid is empty")
        arch_keys = set(self.config['architecture'])
        unknown = [k for k in grid if k not in arch_keys]
        if unknown:
            raise ValueError(f"sweep.grid keys {unknown} are not architecture fields")
        dataset = self.dataset()
        training = copy.deepcopy(self.config['training'])
        if self.config['sweep']['epochs'] is not None:
            training['epochs'] = int(self.config['sweep']['epochs'])

        keys = sorted(grid)
        labels, rows = [], []
        for values in itertools.product(*[grid[k] for k in keys]):
            overrides = dict(zip(keys, values))
            label = 'sweep:' + ','.join(f"{k}={v}" for k, v in overrides.items())
            logger.info(f"Sweep case {label}")
            model, config = self._train_once(dataset, training, overrides)
            rows.append(self._evaluation_row(model, dataset, label, config))
            labels.append(label)
        self.registry.save_evaluations(rows)
        path = self.registry.export_report(self.registry.summary_report(labels),
                                           self.path('reports', 'sweep.csv'), self.config['run']['format'])
        self.record('report', path)

    def ablate(self, rows: Optional[str]):
        names = [r.strip() for r in rows.split(',')] if rows else list(self.config['ablate']['rows'])
        seeds = [int(s) for s in self.config['ablate']['seeds']]
        dataset = self.dataset()
        results = []
        for name in names:
            for seed in seeds:
                training = copy.deepcopy(self.config['training'])
                training.update({'row': name, 'seed': seed})
                logger.info(f"Ablation row {name}, seed {seed}")
                model, config = self._train_once(dataset, training)
                results.append(self._evaluation_row(model, dataset, name, config))
        self.registry.save_evaluations(results)
        path = self.registry.export_report(self.registry.summary_report(names),
                                           self.path('reports', 'ablate.csv'), self.config['run']['format'])
        self.record('report', path)

    def export(self, kind: str):
        options = self.config['export']
        predictions = None
        if kind == 'trajectory':
            dataset = self.dataset()
            model, _ = load_checkpoint(self.path('model'))
            pair = int(options['pair'])
            if not 0 <= pair < dataset.n_labeled:
                raise ValueError(f"Pair {pair} is not a labeled pair")
            pred = predict(model, dataset.p[pair:pair + 1], dataset.f[pair:pair + 1], dataset.norm, dataset.dt)
            labels = dataset.dof_labels
            dofs = [labels.index(d) if isinstance(d, str) else int(d) for d in options['dofs']]
            options = dict(options, dofs=dofs)
            predictions = {'t': np.arange(dataset.n_t) * dataset.dt, 'truth': dataset.u[pair],
                           'pred': pred['u'][0]}
        for path in export_plotdata(self.run_dir, kind, self.path('plots'), options, predictions):
            self.record('plot', path)


def _resolve(args, config: Dict) -> Tuple[str, int]:
    root = config['run']['root'] or default_run_root()
    run_dir = args.run_dir or os.path.join(root, config['run']['name'])
    jobs = args.jobs if args.jobs is not None else (int(config['run']['jobs']) or os.cpu_count() or 1)
    if jobs < 1:
        raise CLIUsageError("--jobs must be at least 1")
    return run_dir, jobs


def dispatch(args, pipeline: Pipeline):
    command = args.command
    if command == 'gen-data':
        pipeline.gen_data()
    elif command == 'en-weights':
        pipeline.en_weights()
    elif command == 'train':
        pipeline.train(args.row)
    elif command == 'eval':
        pipeline.eval(args.split)
    elif command == 'predict':
        pipeline.predict(args.n, args.seed)
    elif command == 'recover':
        pipeline.recover(args.body, args.shapes, args.points, args.pair, args.source)
    elif command == 'pdem':
        pipeline.pdem(args.provider)
    elif command == 'mc':
        pipeline.mc(args.provider)
    elif command == 'compare':
        pipeline.compare()
    elif command == 'sweep':
        pipeline.sweep()
    elif command == 'ablate':
        pipeline.ablate(args.rows)
    elif command == 'export':
        pipeline.export(args.kind)


def run(argv: Optional[List[str]] = None) -> int:
    """
    Execute one pipeline command

    Args:
        argv: Command-line arguments without the program name

    Returns:
        0 on success, 1 on validation errors, 2 on runtime failures
    """
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise CLIUsageError(f"A subcommand is required: {', '.join(COMMANDS)}")
        config = load_config(args.config, args.overrides)
        run_dir, jobs = _resolve(args, config)
    except SystemExit as e:
        return int(e.code or 0)
    except (ValueError, FileNotFoundError) as e:
        if not logging.getLogger().handlers:
            logging.basicConfig(format='%(asctime)s - %(levelname)s - %(message)s')
        logger.error(f"Invalid invocation: {e}")
        return 1

    setup_logging(config['logging'], log_dir=run_dir)
    pipeline = Pipeline(config, run_dir, jobs)
    try:
        pipeline.prepare()
        dispatch(args, pipeline)
    except (ValueError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed validation: {e}")
        return 1
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        logger.debug("Traceback", exc_info=True)
        return 2
    logger.info(f"{args.command} finished; outputs in {run_dir}")
    return 0
