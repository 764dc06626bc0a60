"""
Post-training quantization of a ViT from a batch of calibration samples.

Weights of every MSA / MLP matrix multiplication are fake-quantized once (symmetric MinMax, k_w
bits). Activation sites in front of every matmul operand collect statistics on full-precision
values flowing through the weight-quantized model, then switch to asymmetric fake quantization
(k_a bits) with the finalized clipping values. The residual stream (token embeddings and the output of
every residual add) carries sites too unless quant_residual is off. No weight is updated during
calibration.
"""
import copy
import json
import time
import logging
from dataclasses import dataclass, field

import pandas as pd
import torch
import torch.nn as nn

from .vit import VisionTransformer
from .quantizer import (Observer, make_params, fake_quantize, quant_table, quantization_mse,
                        SYMMETRIC, ASYMMETRIC, BYPASS_BITS, STRATEGIES)
from .exceptions import ConfigurationError, ContractError, ModelStateError
from . import utils

logger = logging.getLogger(__name__)

ATTN_SITES = ['qkv_in', 'q_site', 'k_site', 'v_site', 'proj_in']
MLP_SITES = ['fc1_in', 'fc2_in']
RESIDUAL_SITES = ['attn_res', 'mlp_res']
CALIB_BATCH = 8
WEIGHT_LAYERS = ['attn.qkv', 'attn.proj', 'mlp.fc1', 'mlp.fc2']


class ActivationQuantizer(nn.Module):
    """ observe: record and pass through; quant: fake-quantize; bypass: identity """

    def __init__(self, name, bit_width, observer: Observer):
        super().__init__()
        self.name = name
        self.bit_width = bit_width
        self.observer = observer
        self.qparams = None
        self.mode = 'bypass'

    def forward(self, x):
        if self.mode == 'observe':
            self.observer.observe(x)
            return x
        if self.mode == 'quant':
            if self.qparams is None:
                raise ContractError(f"activation site {self.name} is not calibrated")
            return fake_quantize(x, self.qparams)
        return x

    def extra_repr(self):
        return f"{self.name}, bits={self.bit_width}, mode={self.mode}"


class QuantizedModel(nn.Module):
    def __init__(self, model: VisionTransformer, k_w=8, k_a=8, strategy='minmax', beta=0.9, gamma=1e-5,
                 quant_attn_probs=False, quant_residual=True):
        super().__init__()
        if strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown calibration strategy {strategy!r}, must be one of {STRATEGIES}")
        for name, k in [('k_w', k_w), ('k_a', k_a)]:
            if int(k) != k or not 2 <= k <= BYPASS_BITS:
                raise ConfigurationError(f"{name} must be an integer in [2, {BYPASS_BITS}], got {k}")
        if not model.loaded:
            raise ModelStateError("cannot wrap a model without weights")

        self.model = copy.deepcopy(model).freeze()
        self.config = model.config
        self.k_w = int(k_w)
        self.k_a = int(k_a)
        self.strategy = strategy
        self.beta = beta
        self.gamma = gamma
        self.quant_attn_probs = quant_attn_probs
        self.quant_residual = quant_residual

        self.weight_params = self.quantize_weights()
        self.sites = self.install_sites()
        self.calibrated = False

    @property
    def weights_bypassed(self):
        return self.k_w >= BYPASS_BITS

    @property
    def activations_bypassed(self):
        return self.k_a >= BYPASS_BITS

    def quantize_weights(self):
        params = {}
        if self.weights_bypassed:
            return params
        with torch.no_grad():
            for i, block in enumerate(self.model.blocks):
                for path in WEIGHT_LAYERS:
                    linear = block.get_submodule(path)
                    w = linear.weight
                    qp = make_params(w.min().item(), w.max().item(), self.k_w, SYMMETRIC)
                    w.copy_(fake_quantize(w, qp))
                    params[f"layer{i + 1}.{path}.weight"] = qp
        return params

    def new_observer(self):
        return Observer(self.strategy, beta=self.beta, gamma=self.gamma)

    def add_site(self, sites, parent, attr, name):
        site = ActivationQuantizer(name, self.k_a, self.new_observer())
        setattr(parent, attr, site)
        sites[name] = site

    def install_sites(self):
        sites = {}
        if self.quant_residual:
            self.add_site(sites, self.model, 'embed_out', 'embed_out')
        attn_sites = ATTN_SITES + (['probs_site'] if self.quant_attn_probs else [])
        for i, block in enumerate(self.model.blocks):
            for parent, names in [(block.attn, attn_sites), (block.mlp, MLP_SITES)]:
                prefix = 'attn' if parent is block.attn else 'mlp'
                for attr in names:
                    self.add_site(sites, parent, attr, f"layer{i + 1}.{prefix}.{attr}")
            if self.quant_residual:
                for attr in RESIDUAL_SITES:
                    self.add_site(sites, block, attr, f"layer{i + 1}.{attr}")
        return sites

    def set_mode(self, mode):
        for site in self.sites.values():
            site.mode = 'bypass' if self.activations_bypassed else mode

    def reset_observers(self):
        for site in self.sites.values():
            site.observer = self.new_observer()
            site.qparams = None

    @property
    def activation_params(self):
        return {name: site.qparams for name, site in self.sites.items() if site.qparams is not None}

    def forward(self, image, capture=False):
        if not self.activations_bypassed and not self.calibrated:
            raise ContractError("quantized model used before calibration")
        return self.model(image, capture=capture)

    def site_errors(self):
        """ Buffer MSE of the chosen clipping vs MinMax clipping per site (buffered strategies only) """
        rows = []
        for name, site in self.sites.items():
            if not site.observer.keeps_buffer or site.qparams is None:
                continue
            values = site.observer.values()
            rows.append({'site': name, 'mse': quantization_mse(values, site.qparams),
                         'minmax_mse': quantization_mse(values, site.observer.finalize_minmax(self.k_a))})
        return pd.DataFrame(rows, columns=['site', 'mse', 'minmax_mse'])


def wrap_model(model: VisionTransformer, k_w=8, k_a=8, strategy='minmax', beta=0.9, gamma=1e-5,
               quant_attn_probs=False, quant_residual=True):
    return QuantizedModel(model, k_w, k_a, strategy, beta, gamma, quant_attn_probs, quant_residual)


@dataclass
class CalibrationReport:
    activation_params: dict
    weight_params: dict
    provenance: str
    strategy: str
    num_samples: int
    seconds: float = 0.0

    @property
    def table(self):
        df = quant_table({**self.weight_params, **self.activation_params})
        df['kind'] = ['weight' if s in self.weight_params else 'activation' for s in df['site']]
        return df

    def save(self, path):
        self.table.to_csv(path, index=False, float_format='%.17g')
        return path


def run_calibration(qmodel: QuantizedModel, samples, batch_size=CALIB_BATCH):
    """
    Feed the calibration samples through the weight-quantized model in batches of batch_size and
    finalize every activation observer into clipping values. Streaming strategies (EMA) see one
    update per batch.
    """
    if int(batch_size) != batch_size or batch_size < 1:
        raise ConfigurationError(f"calibration batch size must be a positive integer, got {batch_size}")
    if len(samples) == 0:
        raise ContractError("calibration needs at least one sample")
    start = time.time()
    digest = utils.state_digest(qmodel.model)

    qmodel.reset_observers()
    qmodel.set_mode('observe')
    images = samples.images.to(next(qmodel.model.parameters()).dtype)
    with torch.no_grad():
        for sl in utils.batches(len(images), batch_size):
            qmodel.model(images[sl])

    if not qmodel.activations_bypassed:
        for name, site in qmodel.sites.items():
            site.qparams = site.observer.finalize(qmodel.k_a, ASYMMETRIC)
        missing = [name for name, site in qmodel.sites.items() if site.qparams is None]
        if missing:
            raise ContractError(f"uncalibrated activation sites: {missing}")
    qmodel.set_mode('quant')
    qmodel.calibrated = True

    if utils.state_digest(qmodel.model) != digest:
        raise ModelStateError("weights changed during calibration")

    report = CalibrationReport(activation_params=qmodel.activation_params, weight_params=dict(qmodel.weight_params),
                               provenance=samples.provenance, strategy=qmodel.strategy, num_samples=len(images),
                               seconds=time.time() - start)
    logger.info(f"calibrated {len(report.activation_params)} activation sites ({qmodel.strategy}, W{qmodel.k_w}/A"
                f"{qmodel.k_a}) on {len(images)} {samples.provenance} samples in {report.seconds:.2f}s")
    return report


@dataclass
class EvalReport:
    accuracy: float
    dataset: str
    num_images: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.accuracy <= 1:
            raise ContractError(f"accuracy {self.accuracy} outside [0, 1]")

    def to_dict(self):
        return {'accuracy': self.accuracy, 'dataset': self.dataset, 'num_images': self.num_images, **self.extra}

    def save(self, path):
        with open(path, 'w') as file:
            json.dump(self.to_dict(), file, indent=4, sort_keys=True)
        return path


def predict(model, images, batch_size=256):
    preds = []
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for sl in utils.batches(len(images), batch_size):
            # argmax returns the first maximal index, so ties go to the lower class
            preds.append(model(images[sl].to(dtype)).logits.argmax(dim=-1))
    return torch.cat(preds) if preds else torch.zeros(0, dtype=torch.int64)


def evaluate_top1(model, images, labels, dataset='shapes-test', batch_size=256):
    if len(images) == 0:
        raise ContractError("evaluation set is empty")
    preds = predict(model, images, batch_size)
    accuracy = (preds == labels).double().mean().item()
    return EvalReport(accuracy=accuracy, dataset=dataset, num_images=len(images))
