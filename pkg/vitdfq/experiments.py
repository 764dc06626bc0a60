"""
Experiment drivers: calibration-source comparison, loss ablation, strategy sweep
"""
import logging
from dataclasses import replace

import numpy as np
import pandas as pd

from .generator import GenConfig, generate_samples, noise_batch, real_batch
from .priors import GenLossWeights
from .calibration import wrap_model, run_calibration, evaluate_top1, CALIB_BATCH
from .quantizer import STRATEGIES

logger = logging.getLogger(__name__)

# (L_PSE, L_OH, L_TV)
ABLATION_GRID = [
    (False, False, False),
    (False, True, True),
    (True, False, False),
    (True, True, False),
    (True, False, True),
    (True, True, True),
]


def calibrate_and_evaluate(model, samples, eval_images, eval_labels, k_w=8, k_a=8, strategy='minmax',
                           dataset='shapes-test', calib_batch=CALIB_BATCH, **quant_kwargs):
    qmodel = wrap_model(model, k_w, k_a, strategy, **quant_kwargs)
    calib = run_calibration(qmodel, samples, calib_batch)
    report = evaluate_top1(qmodel, eval_images, eval_labels, dataset=dataset)
    return report, calib


def samples_for(model, config: GenConfig):
    if not config.weights.any_active:
        return noise_batch(model, config.batch_size, config.seed)
    return generate_samples(model, config)


def compare_sources(model, eval_images, eval_labels, gen_config: GenConfig, seeds=(0, 1, 2), precisions=((8, 8),),
                    real_images=None, strategy='minmax', dataset='shapes-test', calib_batch=CALIB_BATCH,
                    **quant_kwargs):
    """
    Top-1 of the quantized model calibrated on Gaussian noise, generated samples and (optionally) real
    images, per seed and precision.

    :param real_images:     (images, labels) pool to draw real calibration batches from
    """
    rows = []
    for seed in seeds:
        config = replace(gen_config, seed=seed)
        batches = {'noise': noise_batch(model, config.batch_size, seed), 'generated': generate_samples(model, config)}
        if real_images is not None:
            images, labels = real_images
            idx = np.random.default_rng(seed).permutation(len(images))[:config.batch_size]
            batches['real'] = real_batch(images[idx], labels[idx], seed)
        for source, samples in batches.items():
            for k_w, k_a in precisions:
                report, _ = calibrate_and_evaluate(model, samples, eval_images, eval_labels, k_w, k_a, strategy,
                                                   dataset, calib_batch, **quant_kwargs)
                rows.append({'seed': seed, 'source': source, 'precision': f"W{k_w}/A{k_a}",
                             'accuracy': report.accuracy})
                logger.info(f"seed {seed}, {source}, W{k_w}/A{k_a}: top-1 {report.accuracy:.4f}")
    return pd.DataFrame(rows, columns=['seed', 'source', 'precision', 'accuracy'])


def source_summary(df):
    return df.pivot_table(index='precision', columns='source', values='accuracy', aggfunc='mean')


def run_ablation(model, eval_images, eval_labels, gen_config: GenConfig, seeds=(0, 1, 2), k_w=8, k_a=8,
                 strategy='minmax', grid=ABLATION_GRID, dataset='shapes-test', calib_batch=CALIB_BATCH,
                 **quant_kwargs):
    """ One row per (L_PSE, L_OH, L_TV) combination of grid; accuracy per seed and the mean """
    base = gen_config.weights
    rows = []
    for use_pse, use_oh, use_tv in grid:
        weights = GenLossWeights(alpha1=base.alpha1 if use_oh else 0.0, alpha2=base.alpha2 if use_tv else 0.0,
                                 use_pse=use_pse)
        row = {'PSE': use_pse, 'OH': use_oh, 'TV': use_tv, 'precision': f"W{k_w}/A{k_a}"}
        for seed in seeds:
            samples = samples_for(model, replace(gen_config, seed=seed, weights=weights))
            report, _ = calibrate_and_evaluate(model, samples, eval_images, eval_labels, k_w, k_a, strategy, dataset,
                                               calib_batch, **quant_kwargs)
            row[f"seed{seed}"] = report.accuracy
            logger.info(f"ablation {weights.label()} seed {seed}: top-1 {report.accuracy:.4f}")
        row['mean'] = float(np.mean([row[f"seed{s}"] for s in seeds]))
        rows.append(row)
    return pd.DataFrame(rows)


def compare_strategies(model, samples, eval_images, eval_labels, k_w=8, k_a=8, strategies=STRATEGIES,
                       dataset='shapes-test', calib_batch=CALIB_BATCH, **quant_kwargs):
    rows = []
    for strategy in strategies:
        report, calib = calibrate_and_evaluate(model, samples, eval_images, eval_labels, k_w, k_a, strategy,
                                               dataset, calib_batch, **quant_kwargs)
        rows.append({'strategy': strategy, 'precision': f"W{k_w}/A{k_a}", 'accuracy': report.accuracy,
                     'calibration_seconds': calib.seconds})
    return pd.DataFrame(rows)
