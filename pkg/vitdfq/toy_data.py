"""
Bundled desk-scale dataset: colored geometric shapes on textured backgrounds, 10 classes.
Deterministic per seed, no downloads.
"""
import os
import logging
import numpy as np
import torch

from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

CLASSES = ['circle', 'square', 'triangle', 'plus', 'ring', 'hbar', 'vbar', 'diamond', 'xcross', 'frame']

PIXEL_MEAN = 0.5
PIXEL_STD = 0.1  # shapes span [-5, 5] after normalization

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])


def shape_mask(label, dx, dy, r):
    d = np.sqrt(dx ** 2 + dy ** 2)
    ax, ay = np.abs(dx), np.abs(dy)
    if not 0 <= label < len(CLASSES):
        raise ConfigurationError(f"unknown class index {label}")
    name = CLASSES[label]
    if name == 'circle':
        return d <= r
    if name == 'square':
        return (ax <= 0.8 * r) & (ay <= 0.8 * r)
    if name == 'triangle':
        return (dy >= -r) & (dy <= r) & (ax <= (dy + r) / 2)
    if name == 'plus':
        return ((ax <= r / 3) & (ay <= r)) | ((ay <= r / 3) & (ax <= r))
    if name == 'ring':
        return (d >= 0.55 * r) & (d <= r)
    if name == 'hbar':
        return (ax <= r) & (ay <= r / 3.5)
    if name == 'vbar':
        return (ay <= r) & (ax <= r / 3.5)
    if name == 'diamond':
        return ax + ay <= r
    if name == 'xcross':
        return ((np.abs(dx - dy) <= r / 2.5) | (np.abs(dx + dy) <= r / 2.5)) & (ax <= 0.8 * r) & (ay <= 0.8 * r)
    if name == 'frame':
        m = np.maximum(ax, ay)
        return (m >= 0.5 * r) & (m <= 0.85 * r)


def render(label, side, rng: np.random.Generator):
    """ One [3, side, side] image in [0, 1] """
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)

    dark_background = rng.random() < 0.5
    bg_lo, bg_hi = (0.0, 0.35) if dark_background else (0.65, 1.0)
    fg_lo, fg_hi = (0.65, 1.0) if dark_background else (0.0, 0.35)

    # background: two-color linear gradient plus fine texture
    c0 = rng.uniform(bg_lo, bg_hi, size=3)
    c1 = rng.uniform(bg_lo, bg_hi, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    t = ((np.cos(theta) * xx + np.sin(theta) * yy) / side + 1) / 2
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    img += rng.normal(0, 0.04, size=img.shape)

    r = rng.uniform(0.25, 0.42) * side
    cx = rng.uniform(r, side - r)
    cy = rng.uniform(r, side - r)
    mask = shape_mask(label, xx - cx, yy - cy, r)
    fg = rng.uniform(fg_lo, fg_hi, size=3)
    img = np.where(mask[None], fg[:, None, None] + rng.normal(0, 0.02, size=img.shape), img)
    return np.clip(img, 0, 1)


def normalize(pixels):
    return (pixels - PIXEL_MEAN) / PIXEL_STD


class ShapesDataset:
    def __init__(self, num_images, image_side=32, seed=0, name='shapes'):
        self.num_images = num_images
        self.image_side = image_side
        self.seed = seed
        self.name = name
        self.num_classes = len(CLASSES)
        self.images, self.labels = self.build()

    def build(self):
        rng = np.random.default_rng(self.seed)
        labels = rng.integers(0, self.num_classes, size=self.num_images)
        images = np.stack([render(int(c), self.image_side, rng) for c in labels]) if self.num_images else \
            np.zeros((0, 3, self.image_side, self.image_side))
        images = torch.from_numpy(normalize(images).astype(np.float32))
        return images, torch.from_numpy(labels.astype(np.int64))

    def __len__(self):
        return self.num_images

    def subset(self, n, seed=0):
        """ n images drawn uniformly without replacement """
        idx = np.random.default_rng(seed).permutation(self.num_images)[:n]
        idx = torch.from_numpy(np.sort(idx))
        return self.images[idx], self.labels[idx]


def toy_splits(num_train=4000, num_test=1000, image_side=32, seed=0):
    train = ShapesDataset(num_train, image_side, seed=seed, name='shapes-train')
    test = ShapesDataset(num_test, image_side, seed=seed + 10_000, name='shapes-test')
    return train, test


def load_image_folder(root, image_side=224, per_class=5, seed=0):
    """
    Real-image path (e.g. ImageNet val arranged as root/<class>/<image>): sample per_class images
    uniformly from every class folder with a fixed seed; resize, center-crop, ImageNet-normalize.
    Class indices follow the sorted folder names.
    """
    from PIL import Image

    if not os.path.isdir(root):
        raise ConfigurationError(f"image folder not found: {root}")
    rng = np.random.default_rng(seed)
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    images, labels = [], []
    for c, cls in enumerate(classes):
        files = sorted(os.listdir(os.path.join(root, cls)))
        for f in rng.permutation(files)[:per_class]:
            with Image.open(os.path.join(root, cls, f)) as im:
                im = im.convert('RGB')
                scale = (image_side * 256 / 224) / min(im.size)
                im = im.resize((max(1, round(im.size[0] * scale)), max(1, round(im.size[1] * scale))),
                               Image.BICUBIC)
                left = (im.size[0] - image_side) // 2
                top = (im.size[1] - image_side) // 2
                im = im.crop((left, top, left + image_side, top + image_side))
                arr = np.asarray(im, dtype=np.float64) / 255.0
            arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
            images.append(arr.transpose(2, 0, 1))
            labels.append(c)
    logger.info(f"loaded {len(images)} images from {len(classes)} classes in {root}")
    return torch.from_numpy(np.stack(images).astype(np.float32)), torch.tensor(labels, dtype=torch.int64)
