import logging
import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .vit import ModelConfig, VisionTransformer
from .exceptions import ConfigurationError
from . import utils

logger = logging.getLogger(__name__)


def check_geometry(images, labels, config: ModelConfig):
    expected = (config.in_chans, config.image_side, config.image_side)
    if images.dim() != 4 or tuple(images.shape[1:]) != expected:
        raise ConfigurationError(f"dataset images {tuple(images.shape)} do not match model geometry {expected}")
    if len(labels) != len(images):
        raise ConfigurationError("dataset images and labels differ in length")
    if len(labels) and (labels.min() < 0 or labels.max() >= config.num_classes):
        raise ConfigurationError(f"dataset labels outside [0, {config.num_classes})")


def train_toy_model(dataset, config: ModelConfig, epochs=30, seed=0, lr=1e-3, weight_decay=0.05,
                    batch_size=64, progress=True):
    """
    Mini-batch AdamW with cross-entropy and a cosine schedule. Deterministic per seed;
    epochs=0 returns the initialization.

    :param dataset:     anything with .images [n, 3, side, side] and .labels [n]
    :return:            (trained VisionTransformer, per-epoch history DataFrame)
    """
    images, labels = dataset.images, dataset.labels
    check_geometry(images, labels, config)

    model = VisionTransformer(config, seed=seed)
    history = pd.DataFrame(columns=['epoch', 'loss', 'accuracy'])
    if epochs == 0:
        return model.eval(), history

    g = utils.torch_generator(seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    steps_per_epoch = -(-len(images) // batch_size)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=epochs * steps_per_epoch)

    rows = []
    for epoch in tqdm(range(epochs), desc='train', disable=not progress):
        model.train()
        order = torch.randperm(len(images), generator=g)
        total_loss, correct = 0.0, 0
        for sl in utils.batches(len(images), batch_size):
            idx = order[sl]
            x, y = images[idx], labels[idx]
            logits = model(x).logits
            loss = F.cross_entropy(logits, y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            total_loss += loss.item() * len(idx)
            correct += (logits.argmax(dim=-1) == y).sum().item()

        rows.append({'epoch': epoch + 1, 'loss': total_loss / len(images), 'accuracy': correct / len(images)})
        logger.debug(f"epoch {epoch + 1}: loss {rows[-1]['loss']:.4f}, accuracy {rows[-1]['accuracy']:.3f}")

    history = pd.DataFrame(rows)
    logger.info(f"trained {epochs} epochs, final train loss {history['loss'].iloc[-1]:.4f}")
    return model.eval(), history
