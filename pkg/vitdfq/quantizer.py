"""
Uniform quantization with clipping pair (q_0, q_{2^k-1}):

    code = round_half_away((clip(v, q_0, q_hi) - q_0) / step),   step = (q_hi - q_0) / (2^k - 1)

Weights use the symmetric scheme (q_0 = -q_hi), activations the asymmetric one. Quantization is
simulated: `fake_quantize` returns floats on the quantization grid.
"""
import logging
from dataclasses import dataclass, asdict

import numpy as np
import pandas as pd
import torch

from .exceptions import ConfigurationError, ContractError, ModelStateError

logger = logging.getLogger(__name__)

SYMMETRIC = 'symmetric'
ASYMMETRIC = 'asymmetric'
BYPASS_BITS = 32

STRATEGIES = ('minmax', 'ema', 'percentile', 'omse')
OMSE_SCALES = tuple(np.round(np.arange(100, 49, -1) / 100, 2))  # 1.00, 0.99, ..., 0.50


@dataclass(frozen=True)
class QuantParams:
    bit_width: int
    clip_lo: float
    clip_hi: float
    scheme: str = ASYMMETRIC

    def __post_init__(self):
        if int(self.bit_width) != self.bit_width or not 2 <= self.bit_width < BYPASS_BITS:
            raise ConfigurationError(f"bit width must be an integer in [2, {BYPASS_BITS}), got {self.bit_width}")
        if self.scheme not in (SYMMETRIC, ASYMMETRIC):
            raise ConfigurationError(f"unknown quantization scheme {self.scheme!r}")
        if not (np.isfinite(self.clip_lo) and np.isfinite(self.clip_hi)):
            raise ConfigurationError(f"clipping values must be finite, got ({self.clip_lo}, {self.clip_hi})")
        if not self.clip_lo < self.clip_hi:
            raise ConfigurationError(f"clip_lo {self.clip_lo} must be below clip_hi {self.clip_hi}")
        if self.scheme == SYMMETRIC and self.clip_lo != -self.clip_hi:
            raise ConfigurationError(f"symmetric scheme needs clip_lo == -clip_hi, got ({self.clip_lo}, {self.clip_hi})")

    @property
    def levels(self):
        return 2 ** self.bit_width - 1

    @property
    def step(self):
        return (self.clip_hi - self.clip_lo) / self.levels

    def grid(self, dtype=torch.float64):
        return dequantize(torch.arange(self.levels + 1), self, dtype=dtype)

    def to_dict(self):
        d = asdict(self)
        d['step'] = self.step
        return d


def make_params(lo, hi, bit_width, scheme=ASYMMETRIC):
    """ QuantParams from an observed range; degenerate ranges are widened around their center """
    lo, hi = float(lo), float(hi)
    if scheme == SYMMETRIC:
        m = max(abs(lo), abs(hi))
        lo, hi = -m, m
    if hi <= lo:
        c = (lo + hi) / 2
        eps = max(abs(c), 1.0) * 1e-6
        lo, hi = c - eps, c + eps
    return QuantParams(int(bit_width), lo, hi, scheme)


def quantize(values: torch.Tensor, qp: QuantParams):
    x = (values.clamp(qp.clip_lo, qp.clip_hi) - qp.clip_lo) / qp.step
    # x >= 0, so floor(x + 0.5) rounds half away from zero
    return torch.floor(x + 0.5).clamp(0, qp.levels).to(torch.int64)


def dequantize(codes: torch.Tensor, qp: QuantParams, dtype=torch.float32):
    if codes.numel() and (codes.min() < 0 or codes.max() > qp.levels):
        raise ContractError(f"codes outside [0, {qp.levels}]")
    return codes.to(dtype) * qp.step + qp.clip_lo


def fake_quantize(values: torch.Tensor, qp: QuantParams):
    return dequantize(quantize(values, qp), qp, dtype=values.dtype)


def quantization_mse(values, qp: QuantParams):
    values = torch.as_tensor(values, dtype=torch.float64)
    return ((values - fake_quantize(values, qp)) ** 2).mean().item()


class Observer:
    """
    Streaming activation statistics for one quantization site.

    minmax:     running min / max
    ema:        m_t = beta * m_{t-1} + (1 - beta) * batch extreme, seeded with the first batch
    percentile: full sample buffer, clips at the gamma / 1 - gamma quantiles
    omse:       full sample buffer, clips minimizing squared quantization error over scaled MinMax ranges
    """

    def __init__(self, strategy='minmax', beta=0.9, gamma=1e-5, omse_scales=OMSE_SCALES):
        if strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown calibration strategy {strategy!r}, must be one of {STRATEGIES}")
        if not 0 < beta < 1:
            raise ConfigurationError(f"ema decay beta must be in (0, 1), got {beta}")
        if not 0 <= gamma < 0.5:
            raise ConfigurationError(f"percentile gamma must be in [0, 0.5), got {gamma}")
        self.strategy = strategy
        self.beta = beta
        self.gamma = gamma
        self.omse_scales = tuple(sorted(omse_scales, reverse=True))

        self.min_val = None
        self.max_val = None
        self.num_batches = 0
        self.buffer = []

    @property
    def keeps_buffer(self):
        return self.strategy in ('percentile', 'omse')

    def observe(self, batch: torch.Tensor):
        if batch.numel() == 0:
            return self
        batch = batch.detach()
        lo, hi = batch.min().item(), batch.max().item()

        if self.min_val is None:
            self.min_val, self.max_val = lo, hi
        elif self.strategy == 'ema':
            self.min_val = self.beta * self.min_val + (1 - self.beta) * lo
            self.max_val = self.beta * self.max_val + (1 - self.beta) * hi
        else:
            self.min_val = min(self.min_val, lo)
            self.max_val = max(self.max_val, hi)

        if self.keeps_buffer:
            self.buffer.append(batch.flatten().cpu().to(torch.float64))
        self.num_batches += 1
        return self

    def values(self):
        if not self.buffer:
            raise ModelStateError(f"{self.strategy} observer has no buffered values")
        return torch.cat(self.buffer)

    def finalize(self, bit_width, scheme=ASYMMETRIC):
        if self.min_val is None:
            raise ModelStateError("observer has seen no values")
        if self.strategy == 'percentile':
            return self.finalize_percentile(bit_width, scheme)
        if self.strategy == 'omse':
            return self.finalize_omse(bit_width, scheme)
        return self.finalize_minmax(bit_width, scheme)

    def finalize_minmax(self, bit_width, scheme=ASYMMETRIC):
        if self.min_val is None:
            raise ModelStateError("observer has seen no values")
        return make_params(self.min_val, self.max_val, bit_width, scheme)

    def finalize_percentile(self, bit_width, scheme=ASYMMETRIC):
        values = self.values().numpy()
        lo, hi = np.quantile(values, [self.gamma, 1 - self.gamma])
        return make_params(lo, hi, bit_width, scheme)

    def finalize_omse(self, bit_width, scheme=ASYMMETRIC):
        values = self.values()
        lo, hi = values.min().item(), values.max().item()
        best, best_mse = None, np.inf
        for s in self.omse_scales:
            qp = make_params(s * lo, s * hi, bit_width, scheme)
            mse = quantization_mse(values, qp)
            # ties keep the larger range
            if mse < best_mse:
                best, best_mse = qp, mse
        return best


def observe(state: Observer, batch):
    return state.observe(batch)


def quant_table(params: dict):
    """ site name -> QuantParams as a DataFrame (one row per site, sorted by name) """
    rows = [{'site': name, **qp.to_dict()} for name, qp in sorted(params.items())]
    return pd.DataFrame(rows, columns=['site', 'bit_width', 'clip_lo', 'clip_hi', 'step', 'scheme'])


def save_quant_table(params: dict, path):
    quant_table(params).to_csv(path, index=False, float_format='%.17g')


def load_quant_table(path):
    df = pd.read_csv(path, float_precision='round_trip')
    return {row['site']: QuantParams(int(row['bit_width']), float(row['clip_lo']), float(row['clip_hi']),
                                     row['scheme'])
            for _, row in df.iterrows()}
