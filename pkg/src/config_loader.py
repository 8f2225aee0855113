#!/usr/bin/env python3
"""
Configuration Loader
Reads the sectioned YAML run configuration, merges it over defaults and
rejects unknown keys before any work starts
"""

import copy
import logging
import logging.handlers
import os
from typing import Any, Dict, List, Optional

import yaml

logger = logging.getLogger(__name__)

RUN_ROOT_ENV = "CDE_RUN_ROOT"


class ConfigValidationError(ValueError):
    """Raised when a configuration does not match the schema"""


# Sections whose list/dict payloads are validated by their own builders
FREE_FORM = {
    ('system', 'masses'), ('system', 'connections'), ('system', 'flexible_bodies'),
    ('system', 'loads'), ('space', 'parameters'), ('sweep', 'grid'),
    ('ablate', 'presets'), ('training', 'omega'),
}

DEFAULT_CONFIG: Dict[str, Any] = {
    'run': {
        'name': 'desk',
        'root': None,
        'jobs': 0,
        'format': 'csv',
    },
    'system': {
        'masses': [],
        'connections': [],
        'flexible_bodies': [],
        'loads': [],
    },
    'space': {
        'parameters': [],
        'excitation': {
            'kind': 'band_limited_noise',
            'channels': 1,
            'band': [0.5, 10.0],
            'psd': {'S0': 1.0, 'omega_g': 15.0, 'zeta_g': 0.6},
            'harmonic': {'amplitude': 1.0, 'frequency': 1.0, 'phase': 0.0},
            'envelope': {'kind': 'none', 'rise': 1.0, 'hold': 2.0, 'decay': 1.0},
            'representation': 'random_phase',
            'mapping_seed': 0,
        },
    },
    'dataset': {
        'n_train': 800,
        'n_test': 200,
        'n_virtual': 0,
        'dt': 0.005,
        'T': 4.0,
        'seed': 7,
    },
    'en': {
        'r': 0.02,
        'cap': 1.0e6,
        'draws': 1,
        'seed': 11,
    },
    'architecture': {
        'width': 36,
        'depth_spectral': 3,
        'k_modes': 16,
        'depth_fc': 2,
        'fc_width': 64,
        'activation': 'gelu',
        'dtype': 'float32',
        'seed': 0,
    },
    'training': {
        'row': None,
        'epochs': 300,
        'batch_size': 100,
        'learning_rate': 0.001,
        'decay_steps': 75,
        'decay_ratio': 0.5,
        'seed': 0,
        'dde_window': 0.025,
        'losses': {'data': True, 'eq': True, 'dde': True, 'veq': False},
        'en': True,
        'gradnorm': True,
        'gradnorm_alpha': 1.5,
        'gradnorm_lr': 0.025,
        'omega': [1.0, 1.0, 1.0, 1.0],
    },
    'pdem': {
        'n_sel': 64,
        'provider': 'oracle',
        'quantity': {'dof': None, 'body': None, 'x': None},
        'x_grid': {'lo': -0.1, 'hi': 0.1, 'n': 401},
        'dt_pde': 0.001,
        'limiter': 'minmod',
        'on_range': 'error',
        'search_limit': 200,
        'excitation_seed': 0,
    },
    'mc': {
        'n': 10000,
        'seed': 99,
        'provider': 'surrogate',
        'batch_size': 500,
        'threshold': 0.05,
        'kde': False,
        'derivatives': False,
    },
    'compare': {
        'times': [1.0, 2.5, 4.0],
        'threshold': 0.05,
    },
    'sweep': {
        'grid': {},
        'epochs': None,
    },
    'ablate': {
        'rows': ['T1', 'T5', 'T7'],
        'seeds': [0],
        'presets': {},
    },
    'export': {
        'pair': 0,
        'dofs': [],
        'times': [1.0, 2.5, 4.0],
        'html': False,
    },
    'logging': {
        'level': 'INFO',
        'log_file': 'pipeline.log',
        'max_file_size': 10485760,
        'backup_count': 5,
    },
}


class ConfigLoader:
    """Load, merge and validate run configurations"""

    def __init__(self, defaults: Optional[Dict] = None):
        """
        Initialize loader

        Args:
            defaults: Default configuration (DEFAULT_CONFIG when omitted)
        """
        self.defaults = copy.deepcopy(defaults if defaults is not None else DEFAULT_CONFIG)

    def load(self, config_path: str, overrides: Optional[List[str]] = None) -> Dict:
        """
        Load a YAML (or JSON) configuration file

        Args:
            config_path: Path to the configuration file
            overrides: 'section.key=value' strings applied after loading

        Returns:
            Validated configuration dictionary
        """
        if not os.path.exists(config_path):
            raise ConfigValidationError(f"Configuration file not found: {config_path}")

        with open(config_path, 'r') as f:
            try:
                user = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigValidationError(f"Cannot parse {config_path}: {e}") from e

        if not isinstance(user, dict):
            raise ConfigValidationError(f"{config_path}: top level must be a mapping")

        config = self.merge(user)
        for item in overrides or []:
            self.apply_override(config, item)
        self.validate(config)
        return config

    def merge(self, user: Dict) -> Dict:
        """Deep-merge user values over defaults, rejecting unknown keys"""
        config = copy.deepcopy(self.defaults)
        self._merge_into(config, user, ())
        return config

    def _merge_into(self, base: Dict, user: Dict, path: tuple):
        for key, value in user.items():
            where = '.'.join(path + (str(key),))
            if key not in base:
                raise ConfigValidationError(f"Unknown configuration key '{where}'")
            if (path + (key,)) in FREE_FORM:
                base[key] = copy.deepcopy(value)
            elif isinstance(base[key], dict):
                if not isinstance(value, dict):
                    raise ConfigValidationError(f"'{where}' must be a mapping")
                self._merge_into(base[key], value, path + (key,))
            else:
                base[key] = copy.deepcopy(value)

    def apply_override(self, config: Dict, item: str):
        """Apply one 'section.key=value' override to a scalar field"""
        if '=' not in item:
            raise ConfigValidationError(f"Override '{item}' must look like section.key=value")
        dotted, raw = item.split('=', 1)
        keys = dotted.split('.')
        node = config
        for key in keys[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise ConfigValidationError(f"Unknown configuration key '{dotted}'")
            node = node[key]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ConfigValidationError(f"Unknown configuration key '{dotted}'")
        if isinstance(node[keys[-1]], (dict, list)):
            raise ConfigValidationError(f"Only scalar fields can be overridden, '{dotted}' is not")
        node[keys[-1]] = yaml.safe_load(raw)

    def validate(self, config: Dict):
        """Check value types against the defaults and basic ranges"""
        self._check_types(config, self.defaults, ())

        dataset = config['dataset']
        if dataset['dt'] <= 0 or dataset['T'] <= 0:
            raise ConfigValidationError("dataset.dt and dataset.T must be positive")
        for key in ('n_train', 'n_test', 'n_virtual'):
            if dataset[key] < 0:
                raise ConfigValidationError(f"dataset.{key} must be >= 0")

        training = config['training']
        for key in ('epochs', 'batch_size', 'learning_rate', 'decay_steps', 'decay_ratio'):
            if training[key] is not None and training[key] < 0:
                raise ConfigValidationError(f"training.{key} must be nonnegative")
        window = training['dde_window']
        if window is not None and window > dataset['T'] / 2:
            raise ConfigValidationError("training.dde_window must not exceed T/2")
        if len(training['omega']) != 4:
            raise ConfigValidationError("training.omega needs four entries")

        if config['en']['r'] <= 0:
            raise ConfigValidationError("en.r must be positive")
        if config['run']['format'] not in ('csv', 'parquet'):
            raise ConfigValidationError("run.format must be csv or parquet")

    def _check_types(self, value: Any, default: Any, path: tuple):
        where = '.'.join(path)
        if path in FREE_FORM or default is None:
            return
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigValidationError(f"'{where}' must be a mapping")
            for key in value:
                if key not in default:
                    raise ConfigValidationError(f"Unknown configuration key '{where}.{key}'")
                self._check_types(value[key], default[key], path + (key,))
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigValidationError(f"'{where}' must be true or false")
        elif isinstance(default, (int, float)):
            if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
                raise ConfigValidationError(f"'{where}' must be a number")
        elif isinstance(default, str):
            if value is not None and not isinstance(value, str):
                raise ConfigValidationError(f"'{where}' must be a string")
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigValidationError(f"'{where}' must be a list")


def load_config(config_path: str, overrides: Optional[List[str]] = None) -> Dict:
    """Load and validate a configuration with the default schema"""
    return ConfigLoader().load(config_path, overrides)


def write_snapshot(config: Dict, path: str):
    """Write a normalised copy of the configuration (sorted keys)"""
    with open(path, 'w') as f:
        yaml.safe_dump(config, f, sort_keys=True, default_flow_style=False)


def default_run_root() -> str:
    """Run root from the environment, falling back to ./runs"""
    return os.environ.get(RUN_ROOT_ENV, os.path.join('.', 'runs'))


def setup_logging(settings: Dict, log_dir: Optional[str] = None):
    """
    Configure root logging from the 'logging' section

    Args:
        settings: Dictionary with level, log_file, max_file_size, backup_count
        log_dir: Directory for the rotating log file (none: stream only)
    """
    level = getattr(logging, str(settings.get('level', 'INFO')).upper(), logging.INFO)
    formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')

    root = logging.getLogger()
    root.setLevel(level)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    stream = logging.StreamHandler()
    stream.setFormatter(formatter)
    root.addHandler(stream)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            os.path.join(log_dir, settings.get('log_file', 'pipeline.log')),
            maxBytes=settings.get('max_file_size', 10485760),
            backupCount=settings.get('backup_count', 5)
        )
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)
