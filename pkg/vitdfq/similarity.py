"""
Patch similarity metric

For every layer, the per-patch attention output vectors u_i (heads x head_dim flattened) are compared
pairwise by cosine similarity. The off-diagonal similarities are treated as samples of a 1-D
distribution, smoothed by a normal-kernel KDE, and summarized by its differential entropy. The
patch-similarity entropy loss is minus the sum of the per-layer entropies.

Everything here is differentiable w.r.t. the attention outputs and so w.r.t. the input pixels.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy.integrate import trapezoid
from scipy.signal import find_peaks

from .exceptions import ConfigurationError, ContractError

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-8
DENSITY_FLOOR = 1e-12


@dataclass
class EntropyConfig:
    grid_size: int = 2048
    tail: float = 6.0  # grid spans [min - tail*h, max + tail*h]
    min_bandwidth: float = 0.01
    max_points: Optional[int] = None  # subsample the similarities above this count
    seed: int = 0

    def __post_init__(self):
        if self.grid_size < 2:
            raise ConfigurationError("entropy grid needs at least 2 points")
        if self.min_bandwidth <= 0:
            raise ConfigurationError("min_bandwidth must be positive")
        if self.max_points is not None and self.max_points < 1:
            raise ConfigurationError("max_points must be positive")


def reduction_factor(num_heads, head_dim, num_patches):
    """ H*N*d values of an attention output vs N*N similarities """
    return num_heads * head_dim * num_patches / num_patches ** 2


def cosine_similarity_matrix(o):
    """
    :param o:   attention outputs [..., H, N, d]
    :return:    [..., N, N] cosine similarities between the per-patch vectors (H*d each)
    """
    u = o.transpose(-3, -2).flatten(-2)
    norms = u.norm(dim=-1)
    return (u @ u.transpose(-1, -2)) / (norms[..., :, None] * norms[..., None, :] + COSINE_EPS)


def extract_training_points(gamma):
    """ Strict upper triangle of [..., N, N] -> [..., N(N-1)/2] """
    n = gamma.shape[-1]
    if n < 2:
        raise ContractError(f"need at least 2 patches for pairwise similarities, got {n}")
    i, j = torch.triu_indices(n, n, offset=1, device=gamma.device)
    return gamma[..., i, j]


def subsample_points(points, max_points, seed=0):
    m = points.shape[-1]
    if max_points is None or m <= max_points:
        return points
    g = torch.Generator()
    g.manual_seed(seed)
    idx = torch.randperm(m, generator=g)[:max_points].sort().values.to(points.device)
    return points[..., idx]


def normal_kernel(u):
    return torch.exp(-0.5 * u ** 2) / math.sqrt(2 * math.pi)


def silverman_bandwidth(points, min_bandwidth=0.01):
    """ h = 1.06 * std * M^(-1/5) with the sample (M - 1) std, floored; a single point gets the floor """
    m = points.shape[-1]
    if m < 2:
        var = torch.zeros(points.shape[:-1], dtype=points.dtype, device=points.device)
    else:
        var = points.var(dim=-1, unbiased=True)
    std = var.clamp_min(1e-24).sqrt()
    return (1.06 * std * m ** (-0.2)).clamp_min(min_bandwidth)


class DensityModel:
    """ f(x) = 1/(M h) sum_m K((x - x_m) / h), batched over leading dimensions of the points """

    def __init__(self, points, bandwidth=None, kernel=normal_kernel, min_bandwidth=0.01):
        points = torch.as_tensor(points)
        if points.dim() == 0:
            points = points.reshape(1)
        if points.shape[-1] < 1:
            raise ContractError("density model needs at least one training point")
        self.points = points
        self.kernel = kernel

        if bandwidth is None:
            h = silverman_bandwidth(points, min_bandwidth)
        else:
            h = torch.as_tensor(bandwidth, dtype=points.dtype, device=points.device)
            if (h <= 0).any():
                raise ConfigurationError(f"bandwidth must be positive, got {bandwidth}")
            h = h.expand(points.shape[:-1])
        self.bandwidth = h

    @property
    def num_points(self):
        return self.points.shape[-1]

    def density(self, x):
        """ x: [..., G] (same leading dims as the points, or broadcastable) -> [..., G] """
        x = torch.as_tensor(x, dtype=self.points.dtype, device=self.points.device)
        scalar = x.dim() == 0
        if scalar:
            x = x.reshape(1)
        h = self.bandwidth[..., None, None]
        u = (x[..., :, None] - self.points[..., None, :]) / h
        f = self.kernel(u).sum(dim=-1) / (self.num_points * self.bandwidth[..., None])
        return f[..., 0] if scalar else f

    def support(self, grid_size=2048, tail=6.0):
        lo = self.points.amin(dim=-1) - tail * self.bandwidth
        hi = self.points.amax(dim=-1) + tail * self.bandwidth
        t = torch.linspace(0, 1, grid_size, dtype=self.points.dtype, device=self.points.device)
        return lo[..., None] + (hi - lo)[..., None] * t


def kde_density(model: DensityModel, x):
    return model.density(x)


def differential_entropy(model: DensityModel, grid_size=2048, tail=6.0):
    """ -int f log f by trapezoidal quadrature on a fixed grid over the support, [...] """
    grid = model.support(grid_size, tail)
    f = model.density(grid)
    integrand = torch.where(f > DENSITY_FLOOR, -f * torch.log(f.clamp_min(DENSITY_FLOOR)), torch.zeros_like(f))
    return torch.trapezoid(integrand, grid, dim=-1)


def layer_entropy(o, cfg: EntropyConfig = None):
    """ Per-image entropy of one layer's patch similarities, o: [B, H, N, d] -> [B] """
    cfg = cfg or EntropyConfig()
    points = extract_training_points(cosine_similarity_matrix(o))
    points = subsample_points(points, cfg.max_points, cfg.seed)
    model = DensityModel(points, min_bandwidth=cfg.min_bandwidth)
    return differential_entropy(model, cfg.grid_size, cfg.tail)


def layer_entropies(trace, cfg: EntropyConfig = None):
    """ Batch-averaged entropy per layer, [L] """
    if trace is None or len(trace) == 0:
        raise ContractError("patch similarity needs a non-empty attention trace")
    return torch.stack([layer_entropy(o, cfg).mean() for o in trace])


def pse_loss(trace, cfg: EntropyConfig = None):
    """ L_PSE = -sum_l H_l, layers reduced in order """
    return -layer_entropies(trace, cfg).sum()


@dataclass
class DensityCurve:
    grid: np.ndarray
    density: np.ndarray

    def integral(self):
        return float(trapezoid(self.density, self.grid))

    def num_modes(self, prominence=0.05):
        return count_modes(self.density, prominence)


def density_curve(o, grid=None, cfg: EntropyConfig = None):
    """
    Similarity density of one layer on a fixed window, averaged over the images of the batch
    and renormalized on the window.
    """
    cfg = cfg or EntropyConfig()
    grid = np.linspace(-1.2, 1.2, 512) if grid is None else np.asarray(grid)
    with torch.no_grad():
        points = extract_training_points(cosine_similarity_matrix(o.detach().double()))
        points = subsample_points(points, cfg.max_points, cfg.seed)
        model = DensityModel(points, min_bandwidth=cfg.min_bandwidth)
        x = torch.from_numpy(grid).to(points.dtype).expand(points.shape[0], -1)
        density = model.density(x).mean(dim=0).numpy()
    mass = trapezoid(density, grid)
    if mass > 0:
        density = density / mass
    return DensityCurve(grid=grid, density=density)


def count_modes(density, prominence=0.05):
    """ Local maxima whose prominence is at least `prominence` times the global peak """
    density = np.asarray(density, dtype=np.float64)
    peak = density.max() if density.size else 0
    if peak <= 0:
        return 0
    padded = np.concatenate([[0.0], density, [0.0]])
    peaks, _ = find_peaks(padded, prominence=prominence * peak)
    return len(peaks)
