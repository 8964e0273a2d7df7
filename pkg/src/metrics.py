'''
Sample-based evaluation: Gaussian KDEs with Scott's rule, the
control-variate KL estimator, log-density error statistics, the 2D
checkerboard target and CSV grid dumps.
'''
import math
import os
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from errors import ConfigError, ZeroDensity
from likelihood import Estimate
from streams import DTYPE, integers, normal, uniform

LOG_FLOOR = -745.0
CHUNK_ROWS = 1024
CV_BATCHES = 10

LogDensity = Callable[[torch.Tensor], torch.Tensor]


def project(x, dims:Sequence[int]=(0, 1)) -> torch.Tensor:
    '''
    Coordinates `dims` of every row of x.
    '''
    x = torch.as_tensor(x, dtype=DTYPE)
    if max(dims) >= x.shape[1]:
        raise ConfigError('cannot project {}-dimensional points on {}'.format(
            x.shape[1], list(dims)))
    return x[:, list(dims)]


class KdeModel:
    def __init__(self, samples, dims:Optional[Sequence[int]]=None):
        '''
        Gaussian KDE with a diagonal bandwidth, Scott's factor
        n^(-1/(k+4)) times the per-coordinate sample std.

        Input arguments:
        * samples (Tensor): A [n, d] batch of samples
        * dims (list): Coordinates to keep, all of them by default
        '''
        samples = torch.as_tensor(samples, dtype=DTYPE)
        if dims is not None:
            samples = project(samples, dims)
        n, k = samples.shape
        if n < 2:
            raise ConfigError('a KDE needs at least two samples')
        self.dims = None if dims is None else list(dims)
        self.samples = samples
        self.factor = n ** (-1.0 / (k + 4))
        std = samples.std(0)
        self.bandwidth = self.factor * torch.where(std > 0, std, torch.ones_like(std))
        self.dim = k
        self._log_norm = -0.5 * k * math.log(2 * math.pi) \
            - torch.log(self.bandwidth).sum() - math.log(n)

    def log_prob(self, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=DTYPE)
        if self.dims is not None and x.shape[1] != self.dim:
            x = project(x, self.dims)
        out = []
        scaled = self.samples / self.bandwidth
        for lo in range(0, x.shape[0], CHUNK_ROWS):
            q = x[lo:lo + CHUNK_ROWS] / self.bandwidth
            sq = torch.cdist(q, scaled) ** 2
            out.append(torch.logsumexp(-0.5 * sq, dim=1) + self._log_norm)
        return torch.cat(out) if out else torch.zeros(0, dtype=DTYPE)

    def sample(self, n:int, seed:int, key:Sequence=('kde',), start:int=0) -> torch.Tensor:
        idx = integers(seed, (*key, 'row'), n, self.samples.shape[0], start=start)
        noise = normal(seed, (*key, 'noise'), n, self.dim, start=start)
        return self.samples[idx] + noise * self.bandwidth


def kl_control_variate(p, q, samples, batches:int=CV_BATCHES) -> Estimate:
    '''
    KL(p || q) as the mean over samples of p of
    log p - log q - (q/p - 1), each term nonnegative. Log densities are
    floored at LOG_FLOOR. The standard error comes from batch means.

    Input arguments:
    * p, q: Anything with log_prob (KdeModel, GaussianMixture, Checkerboard)
    * samples (Tensor): Samples of p, independent of any KDE fit samples
    '''
    samples = torch.as_tensor(samples, dtype=DTYPE)
    log_p = p.log_prob(samples)
    if bool((log_p <= LOG_FLOOR).any()) or not bool(torch.isfinite(log_p).all()):
        raise ZeroDensity('p vanishes at some of its own samples')
    log_q = torch.clamp(torch.nan_to_num(q.log_prob(samples), neginf=LOG_FLOOR), min=LOG_FLOOR)
    r = log_p - log_q
    terms = r - torch.expm1(-r)
    n = terms.shape[0]
    batches = max(1, min(batches, n))
    size = n // batches
    means = terms[:size * batches].reshape(batches, size).mean(1)
    err = float(means.std() / math.sqrt(batches)) if batches > 1 else math.nan
    return Estimate(float(terms.mean()), err, n)


def logdensity_error_stats(model_logp:LogDensity, true_logp:LogDensity,
        points) -> Tuple[float, float]:
    '''
    Mean and variance of |model_logp - true_logp| over the points.
    '''
    points = torch.as_tensor(points, dtype=DTYPE)
    diff = torch.abs(torch.as_tensor(model_logp(points), dtype=DTYPE)
        - torch.as_tensor(true_logp(points), dtype=DTYPE))
    return float(diff.mean()), float(diff.var(unbiased=False))


class Checkerboard:
    def __init__(self, cells:int=4, extent:float=2.0):
        '''
        Uniform density on the black squares (i + j even) of a
        cells x cells board covering [-extent, extent]^2.
        '''
        if cells < 1 or extent <= 0:
            raise ConfigError('checkerboard needs cells >= 1 and extent > 0')
        self.cells = cells
        self.extent = float(extent)
        self.width = 2 * self.extent / cells
        ij = [(i, j) for i in range(cells) for j in range(cells) if (i + j) % 2 == 0]
        self.black = torch.tensor(ij, dtype=torch.long)
        self.log_density = -math.log(len(ij) * self.width ** 2)
        self.dim = 2

    def sample(self, n:int, seed:int, key:Sequence=('checkerboard',), start:int=0) -> torch.Tensor:
        square = self.black[integers(seed, (*key, 'square'), n, self.black.shape[0], start=start)]
        offset = torch.stack([uniform(seed, (*key, 'x'), n, start=start),
            uniform(seed, (*key, 'y'), n, start=start)], dim=1)
        return -self.extent + (square.to(DTYPE) + offset) * self.width

    def square_of(self, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=DTYPE)
        return torch.floor((x + self.extent) / self.width).long()

    def log_prob(self, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=DTYPE)
        ij = self.square_of(x)
        inside = ((ij >= 0) & (ij < self.cells)).all(1) & (ij.sum(1) % 2 == 0)
        return torch.where(inside, torch.full_like(x[:, 0], self.log_density),
            torch.full_like(x[:, 0], LOG_FLOOR))

    def mean(self) -> torch.Tensor:
        centers = -self.extent + (self.black.to(DTYPE) + 0.5) * self.width
        return centers.mean(0)


def checkerboard_sampler(n:int, seed:int, cells:int=4, extent:float=2.0) -> torch.Tensor:
    return Checkerboard(cells, extent).sample(n, seed)


def checkerboard_logp(x, cells:int=4, extent:float=2.0) -> torch.Tensor:
    return Checkerboard(cells, extent).log_prob(x)


def density_grid(logp:LogDensity, lo:float, hi:float, resolution:int=200, dim:int=2,
        path:Optional[str]=None) -> pd.DataFrame:
    '''
    Density values on a regular 1D or 2D grid over [lo, hi]^dim, as a
    DataFrame with columns (x, value) or (x, y, value), written to CSV
    when a path is given.
    '''
    axis = torch.linspace(lo, hi, resolution, dtype=DTYPE)
    if dim == 1:
        points = axis[:, None]
        frame = pd.DataFrame({'x': axis.numpy()})
    elif dim == 2:
        gx, gy = torch.meshgrid(axis, axis, indexing='ij')
        points = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1)
        frame = pd.DataFrame({'x': points[:, 0].numpy(), 'y': points[:, 1].numpy()})
    else:
        raise ConfigError('density grids are 1D or 2D, got dim={}'.format(dim))
    frame['value'] = np.exp(torch.as_tensor(logp(points), dtype=DTYPE).numpy())
    if path is not None:
        parent = os.path.dirname(path)
        if parent and not os.path.exists(parent):
            os.makedirs(parent)
        frame.to_csv(path, index=False)
    return frame


def grid_mass(logp:LogDensity, lo:float, hi:float, resolution:int=400, dim:int=2) -> float:
    '''
    Trapezoid integral of exp(logp) over [lo, hi]^dim.
    '''
    frame = density_grid(logp, lo, hi, resolution, dim)
    values = torch.as_tensor(frame['value'].to_numpy(), dtype=DTYPE)
    axis = torch.linspace(lo, hi, resolution, dtype=DTYPE)
    if dim == 1:
        return float(torch.trapezoid(values, axis))
    values = values.reshape(resolution, resolution)
    return float(torch.trapezoid(torch.trapezoid(values, axis, dim=1), axis))
