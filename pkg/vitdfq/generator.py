"""
Calibration sample synthesis: optimize a batch of Gaussian-noise images through the frozen
full-precision model against L_G = L_PSE + alpha1 * L_OH + alpha2 * L_TV.
"""
import os
import json
import time
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict
from typing import Optional, List

import numpy as np
import pandas as pd
import torch
import matplotlib.pyplot as plt
from tqdm import tqdm

from .vit import VisionTransformer
from .similarity import EntropyConfig, pse_loss
from .priors import GenLossWeights, one_hot_loss, tv_loss, total_generation_loss
from .exceptions import ConfigurationError, ModelStateError, NumericalError
from . import utils

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ['total', 'pse', 'one_hot', 'tv']


@dataclass
class GenConfig:
    batch_size: int = 32
    steps: int = 500
    lr: float = 0.05
    seed: int = 0
    weights: GenLossWeights = field(default_factory=GenLossWeights)
    labels: Optional[List[int]] = None
    entropy: EntropyConfig = field(default_factory=EntropyConfig)
    log_every: int = 50
    progress: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if self.lr < 0:
            raise ConfigurationError(f"learning rate must be >= 0, got {self.lr}")
        if self.labels is not None and len(self.labels) != self.batch_size:
            raise ConfigurationError(f"{len(self.labels)} labels given for a batch of {self.batch_size}")

    def to_dict(self):
        d = asdict(self)
        d.pop('progress')
        return d


@dataclass
class GeneratedBatch:
    images: torch.Tensor
    labels: torch.Tensor
    loss_history: pd.DataFrame
    seed: int
    provenance: str = 'generated'  # generated | noise | real
    config: dict = field(default_factory=dict)
    seconds: float = 0.0

    def __len__(self):
        return len(self.images)

    def save(self, folder, previews=True):
        os.makedirs(folder, exist_ok=True)
        arr = self.images.detach().cpu().numpy().astype('<f4')
        with open(os.path.join(folder, 'images.bin'), 'wb') as blob:
            blob.write(arr.tobytes())
        manifest = {'shape': list(arr.shape), 'dtype': 'float32', 'blob': 'images.bin',
                    'labels': self.labels.tolist(), 'seed': self.seed, 'provenance': self.provenance,
                    'config': self.config, 'seconds': self.seconds}
        with open(os.path.join(folder, 'manifest.json'), 'w') as file:
            json.dump(manifest, file, indent=4)
        self.loss_history.to_csv(os.path.join(folder, 'loss_history.csv'), index=False, float_format='%.17g')

        if previews:
            preview_folder = os.path.join(folder, 'previews')
            os.makedirs(preview_folder, exist_ok=True)
            for i, img in enumerate(utils.rescale_to_unit(self.images)):
                plt.imsave(os.path.join(preview_folder, f"{i:03d}_c{int(self.labels[i])}.png"), img.transpose(1, 2, 0))
        logger.info(f"saved {len(self)} {self.provenance} images to {folder}")
        return folder

    @classmethod
    def load(cls, folder):
        path = os.path.join(folder, 'manifest.json')
        if not os.path.exists(path):
            raise ConfigurationError(f"no sample batch manifest at {path}")
        with open(path, 'r') as file:
            manifest = json.load(file)
        arr = np.fromfile(os.path.join(folder, manifest['blob']), dtype='<f4')
        shape = tuple(manifest['shape'])
        if arr.size != int(np.prod(shape)):
            raise ConfigurationError(f"sample blob in {folder} holds {arr.size} values, manifest says {shape}")
        history_path = os.path.join(folder, 'loss_history.csv')
        history = pd.read_csv(history_path) if os.path.exists(history_path) else pd.DataFrame(columns=['step'] + LOSS_COLUMNS)
        return cls(images=torch.from_numpy(arr.reshape(shape).astype(np.float32)),
                   labels=torch.tensor(manifest['labels'], dtype=torch.int64),
                   loss_history=history, seed=manifest['seed'], provenance=manifest.get('provenance', 'generated'),
                   config=manifest.get('config', {}), seconds=manifest.get('seconds', 0.0))


@contextmanager
def frozen(model: VisionTransformer):
    flags = [p.requires_grad for p in model.parameters()]
    was_training = model.training
    model.eval()
    model.requires_grad_(False)
    try:
        yield model
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad_(flag)
        model.train(was_training)


class Generator:
    def __init__(self, model: VisionTransformer, config: GenConfig):
        self.model = model
        self.config = config
        self.model_config = model.config
        self.dtype = next(model.parameters()).dtype

        self.images, self.labels = self.init_noise()
        self.images.requires_grad_(True)
        self.optimizer = torch.optim.Adam([self.images], lr=config.lr)
        self.history = []

    def init_noise(self):
        """ i.i.d. N(0, 1) pixels and target categories, both from the seed """
        c = self.model_config
        g = utils.torch_generator(self.config.seed)
        images = torch.randn(self.config.batch_size, c.in_chans, c.image_side, c.image_side, generator=g,
                             dtype=self.dtype)
        if self.config.labels is not None:
            labels = torch.tensor(self.config.labels, dtype=torch.int64)
        else:
            labels = torch.randint(0, c.num_classes, (self.config.batch_size,), generator=g)
        return images, labels

    def losses(self, images):
        result = self.model(images, capture=True)
        pse = pse_loss(result.trace, self.config.entropy)
        oh = one_hot_loss(result.logits, self.labels)
        tv = tv_loss(images)
        total = total_generation_loss(pse, oh, tv, self.config.weights)
        return {'total': torch.as_tensor(total, dtype=pse.dtype), 'pse': pse, 'one_hot': oh, 'tv': tv}

    def step(self):
        """ One forward with trace, one Adam update of the pixels; returns the pre-update losses """
        self.optimizer.zero_grad()
        losses = self.losses(self.images)
        for name in ['pse', 'one_hot', 'tv', 'total']:
            if not torch.isfinite(losses[name]):
                raise NumericalError(f"generation loss '{name}'", f"step {len(self.history) + 1}")
        if self.config.weights.any_active:
            losses['total'].backward()
            self.optimizer.step()

        record = {'step': len(self.history) + 1, **{k: losses[k].item() for k in LOSS_COLUMNS}}
        self.history.append(record)
        return self.images.detach(), record

    def run(self):
        start = time.time()
        digest = utils.state_digest(self.model)
        with frozen(self.model):
            for t in tqdm(range(self.config.steps), desc='generate', disable=not self.config.progress):
                _, record = self.step()
                if self.config.log_every and (t + 1) % self.config.log_every == 0:
                    logger.info(f"step {t + 1}: L_G {record['total']:.4f}, L_PSE {record['pse']:.4f}, "
                                f"L_OH {record['one_hot']:.4f}, L_TV {record['tv']:.4f}")
        if utils.state_digest(self.model) != digest:
            raise ModelStateError("model weights changed during sample generation")

        history = pd.DataFrame(self.history, columns=['step'] + LOSS_COLUMNS)
        return GeneratedBatch(images=self.images.detach().clone(), labels=self.labels.clone(), loss_history=history,
                              seed=self.config.seed, provenance='generated', config=self.config.to_dict(),
                              seconds=time.time() - start)


def init_noise(model: VisionTransformer, config: GenConfig):
    return Generator(model, config).init_noise()[0]


def generation_step(generator: Generator):
    return generator.step()


def generate_samples(model: VisionTransformer, config: GenConfig):
    return Generator(model, config).run()


def noise_batch(model: VisionTransformer, batch_size=32, seed=0):
    """ Pure Gaussian noise, the data-free baseline """
    config = GenConfig(batch_size=batch_size, steps=0, seed=seed, progress=False)
    batch = Generator(model, config).run()
    batch.provenance = 'noise'
    return batch


def real_batch(images, labels, seed=0):
    return GeneratedBatch(images=images.clone(), labels=labels.clone(),
                          loss_history=pd.DataFrame(columns=['step'] + LOSS_COLUMNS), seed=seed, provenance='real')
