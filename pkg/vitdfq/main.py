"""
Command line entry point

    vitdfq train-toy --epochs 30 --out out
    vitdfq generate --model out/toy_model/manifest.json --steps 200 --out out
    vitdfq calibrate --samples out/samples/seed0 --kw 8 --ka 8 --strategy omse
    vitdfq evaluate --samples out/samples/seed0 --kw 4 --ka 8
    vitdfq density --samples out/samples/seed0
    vitdfq ablate --seeds 0 1 2
    vitdfq compare --strategies
    vitdfq evaluate --model out/deit_tiny_patch16_224/manifest.json --data imagenet/val --source real
    vitdfq fetch deit_tiny_patch16_224 --out out

Every flag can also come from a YAML file given with --config (flags win over the file).
"""
import os
import sys
import logging
import argparse
import numpy as np

from . import config as cfg_module
from . import graphs, results
from .checkpoint import load_checkpoint, save_checkpoint, fetch_external, EXTERNAL_MODELS
from .calibration import wrap_model, run_calibration, evaluate_top1
from .experiments import compare_sources, source_summary, run_ablation, compare_strategies
from .generator import GenConfig, GeneratedBatch, generate_samples, noise_batch, real_batch
from .priors import GenLossWeights
from .similarity import EntropyConfig
from .toy_data import ShapesDataset, toy_splits, load_image_folder
from .train import train_toy_model
from .vit import toy_config
from .exceptions import VitDfqError

logger = logging.getLogger(__name__)

DATA_SEED = 0
PRECISIONS = ((8, 8), (4, 8))


def store_true():
    return dict(action='store_const', const=True, default=None)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML file with flag values')
    common.add_argument('--model', help='checkpoint manifest')
    common.add_argument('--out', help='output folder')
    common.add_argument('--seed', type=int)
    common.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    common.add_argument('--no-progress', dest='progress', action='store_const', const=False, default=None)

    gen = argparse.ArgumentParser(add_help=False)
    gen.add_argument('--samples', help='folder of a saved sample batch (generated on the fly when absent)')
    gen.add_argument('--steps', type=int)
    gen.add_argument('--lr', type=float)
    gen.add_argument('--batch', type=int)
    gen.add_argument('--alpha1', type=float, help='one-hot loss weight')
    gen.add_argument('--alpha2', type=float, help='total variation loss weight')
    gen.add_argument('--grid-size', type=int, help='entropy quadrature points')
    gen.add_argument('--max-points', type=int, help='subsample similarities above this count')

    quant = argparse.ArgumentParser(add_help=False)
    quant.add_argument('--kw', type=int, help='weight bits')
    quant.add_argument('--ka', type=int, help='activation bits')
    quant.add_argument('--strategy', choices=cfg_module.STRATEGIES)
    quant.add_argument('--gamma', type=float, help='percentile tail fraction')
    quant.add_argument('--beta', type=float, help='EMA decay')
    quant.add_argument('--quant-attn-probs', **store_true())
    quant.add_argument('--no-quant-residual', dest='quant_residual', action='store_const', const=False, default=None)
    quant.add_argument('--calib-batch', type=int, help='images per calibration forward pass')
    quant.add_argument('--data', help='real image folder (root/<class>/<image>) for evaluation and real calibration')
    quant.add_argument('--per-class', type=int, help='images drawn from every class folder of --data')

    source = argparse.ArgumentParser(add_help=False)
    source.add_argument('--source', choices=cfg_module.SOURCES, help='calibration source')

    parser = argparse.ArgumentParser(prog='vitdfq', description='Data-free calibration and quantization of ViTs')
    sub = parser.add_subparsers(dest='cmd', required=True)

    p = sub.add_parser('train-toy', parents=[common], help='train the toy ViT on the synthetic shapes set')
    p.add_argument('--epochs', type=int)
    p.add_argument('--num-train', type=int)
    p.add_argument('--num-test', type=int)

    sub.add_parser('generate', parents=[common, gen], help='synthesize a calibration batch')
    sub.add_parser('calibrate', parents=[common, gen, quant, source], help='calibrate clipping values')
    p = sub.add_parser('evaluate', parents=[common, gen, quant, source], help='top-1 of the FP and quantized model')
    p.add_argument('--num-test', type=int)
    sub.add_parser('density', parents=[common, gen], help='patch similarity density report')
    p = sub.add_parser('ablate', parents=[common, gen, quant], help='loss combination ablation')
    p.add_argument('--seeds', type=int, nargs='+')
    p.add_argument('--num-test', type=int)
    p = sub.add_parser('compare', parents=[common, gen, quant], help='real vs noise vs generated calibration')
    p.add_argument('--seeds', type=int, nargs='+')
    p.add_argument('--num-test', type=int)
    p.add_argument('--strategies', **store_true(), help='also sweep the four clipping strategies')

    p = sub.add_parser('fetch', parents=[common], help='download a published DeiT checkpoint')
    p.add_argument('name', choices=sorted(EXTERNAL_MODELS))
    return parser


def gen_config(cfg):
    return GenConfig(batch_size=cfg['batch'], steps=cfg['steps'], lr=cfg['lr'],
                     seed=cfg['seed'], weights=GenLossWeights(alpha1=cfg['alpha1'], alpha2=cfg['alpha2']),
                     entropy=EntropyConfig(grid_size=cfg['grid_size'], max_points=cfg['max_points'], seed=cfg['seed']),
                     progress=cfg['progress'])


def quant_kwargs(cfg):
    return dict(k_w=cfg['kw'], k_a=cfg['ka'], strategy=cfg['strategy'], beta=cfg['beta'], gamma=cfg['gamma'],
                quant_attn_probs=cfg['quant_attn_probs'], quant_residual=cfg['quant_residual'])


def eval_set(cfg, model_config):
    """ (images, labels, dataset name) from --data when given, else the shapes test split """
    if cfg['data']:
        images, labels = load_image_folder(cfg['data'], model_config.image_side, cfg['per_class'], seed=DATA_SEED)
        return images, labels, os.path.basename(os.path.normpath(cfg['data']))
    _, test = toy_splits(num_train=0, num_test=cfg['num_test'], image_side=model_config.image_side, seed=DATA_SEED)
    return test.images, test.labels, test.name


def real_pool(cfg, model_config):
    """ (images, labels) that real calibration batches are drawn from """
    if cfg['data']:
        return load_image_folder(cfg['data'], model_config.image_side, cfg['per_class'], seed=DATA_SEED + 1)
    pool = ShapesDataset(max(8 * cfg['batch'], 256), model_config.image_side, seed=DATA_SEED + 1, name='shapes-pool')
    return pool.images, pool.labels


def get_samples(cfg, model):
    if cfg['source'] == 'noise':
        return noise_batch(model, cfg['batch'], cfg['seed'])
    if cfg['source'] == 'real':
        images, labels = real_pool(cfg, model.config)
        idx = np.random.default_rng(cfg['seed']).permutation(len(images))[:cfg['batch']]
        return real_batch(images[idx], labels[idx], cfg['seed'])
    if cfg['samples']:
        samples = GeneratedBatch.load(cfg['samples'])
        logger.info(f"loaded {len(samples)} {samples.provenance} samples from {cfg['samples']}")
        return samples
    config = gen_config(cfg)
    if config.steps == 0:
        return noise_batch(model, config.batch_size, config.seed)
    return generate_samples(model, config)


def out_path(cfg, *parts):
    path = os.path.join(cfg['out'], *parts)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    return path


def cmd_train_toy(cfg):
    config = toy_config()
    train, test = toy_splits(cfg['num_train'], cfg['num_test'], config.image_side, seed=DATA_SEED)
    model, history = train_toy_model(train, config, epochs=cfg['epochs'], seed=cfg['seed'], progress=cfg['progress'])

    manifest = save_checkpoint(model, out_path(cfg, 'toy_model', 'manifest.json'))
    history.to_csv(out_path(cfg, 'toy_model', 'history.csv'), index=False)
    train_report = evaluate_top1(model, train.images, train.labels, dataset=train.name)
    test_report = evaluate_top1(model, test.images, test.labels, dataset=test.name)
    test_report.extra = {'train_accuracy': train_report.accuracy, 'epochs': cfg['epochs'], 'seed': cfg['seed']}
    test_report.save(out_path(cfg, 'toy_model', 'eval_report.json'))
    print(f"train top-1 {train_report.accuracy:.4f}, test top-1 {test_report.accuracy:.4f}")
    print(f"checkpoint: {manifest}")


def cmd_generate(cfg):
    _, model = load_checkpoint(cfg['model'])
    config = gen_config(cfg)
    batch = generate_samples(model, config) if config.steps > 0 else noise_batch(model, config.batch_size, config.seed)
    folder = batch.save(os.path.join(cfg['out'], 'samples', f"seed{config.seed}"))

    gr = graphs.DensityGraphs()
    graphs.save(gr.samples(batch.images, batch.labels), os.path.join(folder, 'samples.png'))
    if len(batch.loss_history):
        ax = gr.loss_history(batch.loss_history)
        graphs.save(ax.figure, os.path.join(folder, 'loss_history.png'))
        print(batch.loss_history.tail(1).to_string(index=False))
    print(f"{len(batch)} {batch.provenance} images written to {folder}")


def cmd_calibrate(cfg):
    _, model = load_checkpoint(cfg['model'])
    samples = get_samples(cfg, model)
    qmodel = wrap_model(model, **quant_kwargs(cfg))
    report = run_calibration(qmodel, samples, cfg['calib_batch'])

    path = report.save(out_path(cfg, 'calibration', f"quant_params_{cfg['strategy']}.csv"))
    errors = qmodel.site_errors()
    if len(errors):
        errors.to_csv(out_path(cfg, 'calibration', f"site_errors_{cfg['strategy']}.csv"), index=False)
    print(report.table.to_string(index=False))
    print(f"quant params written to {path}")


def cmd_evaluate(cfg):
    config, model = load_checkpoint(cfg['model'])
    images, labels, dataset = eval_set(cfg, config)
    samples = get_samples(cfg, model)

    fp = evaluate_top1(model, images, labels, dataset=dataset)
    qmodel = wrap_model(model, **quant_kwargs(cfg))
    run_calibration(qmodel, samples, cfg['calib_batch'])
    report = evaluate_top1(qmodel, images, labels, dataset=dataset)
    report.extra = {'fp_accuracy': fp.accuracy, 'precision': f"W{cfg['kw']}/A{cfg['ka']}",
                    'strategy': cfg['strategy'], 'provenance': samples.provenance, 'seed': cfg['seed']}
    path = report.save(out_path(cfg, 'eval_report.json'))
    print(f"FP top-1 {fp.accuracy:.4f}, W{cfg['kw']}/A{cfg['ka']} ({cfg['strategy']}, {samples.provenance}) "
          f"top-1 {report.accuracy:.4f}")
    print(f"report written to {path}")


def cmd_density(cfg):
    _, model = load_checkpoint(cfg['model'])
    samples = get_samples(cfg, model)
    entropy = EntropyConfig(grid_size=cfg['grid_size'], max_points=cfg['max_points'], seed=cfg['seed'])
    batches = {'noise': noise_batch(model, len(samples), cfg['seed']), samples.provenance: samples}

    curves = {}
    for source, batch in batches.items():
        curves[source] = results.export_density_report(model, batch.images, out_path(cfg, 'density', f"{source}.csv"),
                                                       entropy)
        print(f"{source}: mean mode count {results.mean_mode_count(curves[source]):.2f}")
        print(results.density_summary(curves[source]).to_string(index=False))

    fig = graphs.DensityGraphs().all_layers(curves)
    graphs.save(fig, out_path(cfg, 'density', 'density.png'))
    print(results.entropy_table(model, {s: b.images for s, b in batches.items()}, entropy))


def cmd_ablate(cfg):
    config, model = load_checkpoint(cfg['model'])
    images, labels, dataset = eval_set(cfg, config)
    kwargs = quant_kwargs(cfg)
    df = run_ablation(model, images, labels, gen_config(cfg), seeds=cfg['seeds'], dataset=dataset,
                      calib_batch=cfg['calib_batch'], **kwargs)
    path = out_path(cfg, 'ablation.csv')
    df.to_csv(path, index=False)
    print(df.to_string(index=False))
    print(f"ablation written to {path}")


def cmd_compare(cfg):
    config, model = load_checkpoint(cfg['model'])
    images, labels, dataset = eval_set(cfg, config)
    kwargs = quant_kwargs(cfg)
    for key in ('k_w', 'k_a'):
        kwargs.pop(key)

    df = compare_sources(model, images, labels, gen_config(cfg), seeds=cfg['seeds'], precisions=PRECISIONS,
                         real_images=real_pool(cfg, config), dataset=dataset, calib_batch=cfg['calib_batch'],
                         **kwargs)
    df.to_csv(out_path(cfg, 'compare_sources.csv'), index=False)
    print(source_summary(df))

    if cfg.get('strategies'):
        samples = get_samples(cfg, model)
        kwargs = quant_kwargs(cfg)
        kwargs.pop('strategy')
        sweep = compare_strategies(model, samples, images, labels, dataset=dataset, calib_batch=cfg['calib_batch'],
                                   **kwargs)
        sweep.to_csv(out_path(cfg, 'compare_strategies.csv'), index=False)
        print(sweep.to_string(index=False))


def cmd_fetch(cfg):
    path = fetch_external(cfg['name'], out_path(cfg, cfg['name'], 'manifest.json'))
    print(f"checkpoint: {path}")


COMMANDS = {
    'train-toy': cmd_train_toy,
    'generate': cmd_generate,
    'calibrate': cmd_calibrate,
    'evaluate': cmd_evaluate,
    'density': cmd_density,
    'ablate': cmd_ablate,
    'compare': cmd_compare,
    'fetch': cmd_fetch,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    flags = {k: v for k, v in vars(args).items() if k not in ('cmd', 'config')}
    try:
        cfg = cfg_module.resolve(flags, args.config)
    except VitDfqError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    cfg.update({k: v for k, v in flags.items() if k not in cfg_module.DEFAULTS})

    logging.basicConfig(level=cfg['log_level'], format='%(asctime)s - %(levelname)s - %(message)s', force=True)
    try:
        COMMANDS[args.cmd](cfg)
    except (VitDfqError, OSError) as e:
        logger.error(f"{args.cmd} failed: {type(e).__name__}: {e}")
        return 1
    return 0
