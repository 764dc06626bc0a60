import os
import logging
import numpy as np
import pandas as pd
import torch

from .similarity import EntropyConfig, DensityCurve, density_curve, layer_entropies

pd.set_option('display.max_columns', 999)
pd.set_option('display.width', 1000)
pd.set_option('display.float_format', lambda x: '%.4f' % x)

logger = logging.getLogger(__name__)

DENSITY_WINDOW = (-1.2, 1.2)
DENSITY_POINTS = 512


def trace_of(model, images, batch_size=64):
    """ Attention trace of a batch, computed without gradients and concatenated over chunks """
    dtype = next(model.parameters()).dtype
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append(model(images[start:start + batch_size].to(dtype), capture=True).trace)
    return [torch.cat([c[l] for c in chunks]) for l in range(len(chunks[0]))]


def density_curves(model, images, cfg: EntropyConfig = None):
    grid = np.linspace(*DENSITY_WINDOW, DENSITY_POINTS)
    return {l + 1: density_curve(o, grid, cfg) for l, o in enumerate(trace_of(model, images))}


def export_density_report(model, images, out_path, cfg: EntropyConfig = None):
    """
    Per-layer similarity density curves on [-1.2, 1.2] (512 points) for a batch of images.
    Written as one CSV with columns layer, x, density.
    """
    curves = density_curves(model, images, cfg)
    df = pd.concat([pd.DataFrame({'layer': layer, 'x': c.grid, 'density': c.density}) for layer, c in curves.items()])
    folder = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(folder, exist_ok=True)
    df.to_csv(out_path, index=False, float_format='%.10g')
    logger.info(f"density curves of {len(curves)} layers written to {out_path}")
    return curves


def read_density_report(path):
    df = pd.read_csv(path)
    return {int(layer): DensityCurve(grid=g['x'].to_numpy(), density=g['density'].to_numpy())
            for layer, g in df.groupby('layer')}


def density_summary(curves: dict, prominence=0.05):
    rows = [{'layer': layer, 'modes': c.num_modes(prominence), 'integral': c.integral(),
             'peak_x': float(c.grid[np.argmax(c.density)])} for layer, c in curves.items()]
    return pd.DataFrame(rows, columns=['layer', 'modes', 'integral', 'peak_x'])


def mean_mode_count(curves: dict, prominence=0.05):
    return float(np.mean([c.num_modes(prominence) for c in curves.values()]))


def unimodal_fraction(curves: dict, prominence=0.05):
    """ Share of layers whose density curve has a single mode """
    return float(np.mean([c.num_modes(prominence) == 1 for c in curves.values()]))


def entropy_table(model, batches: dict, cfg: EntropyConfig = None):
    """ Batch-averaged patch-similarity entropy per layer for several named image batches """
    rows = []
    for name, images in batches.items():
        with torch.no_grad():
            h = layer_entropies(trace_of(model, images), cfg)
        for layer, value in enumerate(h.tolist()):
            rows.append({'source': name, 'layer': layer + 1, 'entropy': value})
    return pd.DataFrame(rows).pivot(index='layer', columns='source', values='entropy')
