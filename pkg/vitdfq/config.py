import os
import yaml

from .quantizer import STRATEGIES
from .calibration import CALIB_BATCH
from .exceptions import ConfigurationError

DEFAULTS = {
    'model': 'out/toy_model/manifest.json',
    'samples': None,
    'out': 'out',
    'seed': 0,
    'seeds': [0, 1, 2],
    # toy model / training
    'epochs': 30,
    'num_train': 4000,
    'num_test': 1000,
    # generation
    'steps': 500,
    'lr': 0.05,
    'batch': 32,
    'alpha1': 1.0,
    'alpha2': 0.05,
    'grid_size': 2048,
    'max_points': None,
    # quantization
    'kw': 8,
    'ka': 8,
    'strategy': 'minmax',
    'gamma': 1e-5,
    'beta': 0.9,
    'quant_attn_probs': False,
    'quant_residual': True,
    'calib_batch': CALIB_BATCH,
    'source': 'generated',
    # real images (root/<class>/<image>), replaces the shapes set for evaluation and real calibration
    'data': None,
    'per_class': 5,
    # misc
    'progress': True,
    'log_level': 'INFO',
}

SOURCES = ('generated', 'noise', 'real')


def normalize_key(key):
    return str(key).replace('-', '_')


def load_config(path):
    """
    Read a YAML config file whose keys mirror the command-line flags

    :param path:    path to a .yaml file
    :return:        dict with normalized keys
    """
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    with open(path, 'r') as file:
        data = yaml.safe_load(file) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a mapping")

    data = {normalize_key(k): v for k, v in data.items()}
    unknown = sorted(set(data) - set(DEFAULTS))
    if unknown:
        raise ConfigurationError(f"unknown config key(s) in {path}: {', '.join(unknown)}")
    return data


def resolve(flags: dict, config_path=None):
    """ flags > config file > defaults; flags left as None do not override """
    cfg = dict(DEFAULTS)
    if config_path is not None:
        cfg.update(load_config(config_path))
    for k, v in flags.items():
        k = normalize_key(k)
        if k in DEFAULTS and v is not None:
            cfg[k] = v

    if cfg['strategy'] not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy '{cfg['strategy']}', must be one of {STRATEGIES}")
    if cfg['source'] not in SOURCES:
        raise ConfigurationError(f"unknown calibration source '{cfg['source']}', must be one of {SOURCES}")
    if int(cfg['calib_batch']) != cfg['calib_batch'] or cfg['calib_batch'] < 1:
        raise ConfigurationError(f"calib_batch must be a positive integer, got {cfg['calib_batch']}")
    return cfg
