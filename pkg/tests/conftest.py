import pytest
import torch

from vitdfq.vit import ModelConfig, VisionTransformer, toy_config
from vitdfq.toy_data import toy_splits
from vitdfq.train import train_toy_model
from vitdfq.generator import GenConfig, generate_samples
from vitdfq.similarity import EntropyConfig
from vitdfq.experiments import run_ablation

# (L_PSE, L_OH, L_TV) rows the ordering checks need
ORDERING_GRID = [(False, False, False), (False, True, True), (True, False, False), (True, True, True)]
SLOW_SEEDS = (0, 1, 2)


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: needs the trained toy model or many generation runs')


def slow_gen_config(**kwargs):
    params = dict(batch_size=32, steps=200, seed=0, entropy=EntropyConfig(grid_size=512), progress=False)
    params.update(kwargs)
    return GenConfig(**params)


@pytest.fixture
def tiny_config():
    return ModelConfig(num_layers=2, num_heads=2, head_dim=4, patch_size=8, image_side=32, num_classes=10)


@pytest.fixture
def tiny_model(tiny_config):
    return VisionTransformer(tiny_config, seed=0).eval()


@pytest.fixture
def tiny_model64(tiny_config):
    return VisionTransformer(tiny_config, seed=0).double().eval()


@pytest.fixture
def images():
    g = torch.Generator().manual_seed(123)
    return torch.randn(4, 3, 32, 32, generator=g)


@pytest.fixture(scope='session')
def toy_data():
    return toy_splits(num_train=4000, num_test=1000, image_side=32, seed=0)


@pytest.fixture(scope='session')
def trained_model(toy_data):
    train, _ = toy_data
    model, history = train_toy_model(train, toy_config(), epochs=30, seed=0, progress=False)
    return model


@pytest.fixture(scope='session')
def generated_batch(trained_model):
    return generate_samples(trained_model, slow_gen_config())


@pytest.fixture(scope='session')
def ablation_table(trained_model, toy_data):
    """ W8/A8 MinMax top-1 per loss combination and seed; the no-loss row calibrates on noise """
    _, test = toy_data
    return run_ablation(trained_model, test.images, test.labels, slow_gen_config(), seeds=SLOW_SEEDS,
                        grid=ORDERING_GRID)
