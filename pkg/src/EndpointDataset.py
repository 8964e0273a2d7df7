import os
import struct
from typing import Sequence, Union

import numpy as np
import pandas as pd
import torch
from torch.utils.data import Dataset

from errors import ConfigError, EmptySource
from streams import DTYPE, integers

HEADER = struct.Struct('<II')

def load_matrix(path:str) -> np.ndarray:
    '''
    A single API to read an endpoint matrix (rows = samples,
    columns = dimensions) from either a headerless CSV file or the
    binary format written by save_matrix.
    '''
    if not os.path.exists(path):
        raise ConfigError('matrix file {} does not exist'.format(path))
    if path.endswith('.csv'):
        return pd.read_csv(path, header=None, dtype=np.float64).to_numpy()
    with open(path, 'rb') as f:
        head = f.read(HEADER.size)
        if len(head) != HEADER.size:
            raise ConfigError('{} is too short to hold a matrix header'.format(path))
        rows, cols = HEADER.unpack(head)
        data = np.frombuffer(f.read(), dtype='<f8')
    if data.size != rows * cols:
        raise ConfigError('{}: header says {}x{} but {} values follow'.format(
            path, rows, cols, data.size))
    return data.reshape(rows, cols).astype(np.float64)


def save_matrix(path:str, matrix:Union[np.ndarray, torch.Tensor]):
    '''
    Write a 2D matrix as a little-endian u32 (rows, cols) header followed
    by the row-major f64 values. A path ending in .csv is written as a
    headerless CSV instead.
    '''
    if isinstance(matrix, torch.Tensor):
        matrix = matrix.detach().cpu().numpy()
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    parent = os.path.dirname(path)
    if parent and not os.path.exists(parent):
        os.makedirs(parent)
    if path.endswith('.csv'):
        pd.DataFrame(matrix).to_csv(path, header=False, index=False,
            float_format='%.17g')
        return
    with open(path, 'wb') as f:
        f.write(HEADER.pack(*matrix.shape))
        f.write(matrix.astype('<f8').tobytes(order='C'))


class EndpointDataset(Dataset):
    def __init__(self, rows:Union[np.ndarray, torch.Tensor]):
        '''
        Input arguments:
        * rows (array): A [n, d] matrix of endpoint samples

        Draws are made with replacement, row indices coming from the
        counter-based stream of the caller.
        '''
        rows = torch.as_tensor(np.asarray(rows, dtype=np.float64)
            if not isinstance(rows, torch.Tensor) else rows, dtype=DTYPE)
        if rows.dim() == 1:
            rows = rows[:, None]
        self.rows = rows
        self.dim = rows.shape[1]

    @classmethod
    def from_file(cls, path:str) -> 'EndpointDataset':
        return cls(load_matrix(path))

    def __len__(self):
        return self.rows.shape[0]

    def __getitem__(self, idx):
        return self.rows[idx]

    def sample(self, n:int, seed:int, key:Sequence=('rows',), start:int=0) -> torch.Tensor:
        if len(self) == 0:
            raise EmptySource('dataset endpoint has no rows')
        idx = integers(seed, key, n, len(self), start=start)
        return self.rows[idx]

    def mean(self) -> torch.Tensor:
        if len(self) == 0:
            raise EmptySource('dataset endpoint has no rows')
        return self.rows.mean(0)


class PointMass:
    def __init__(self, point:Union[Sequence[float], torch.Tensor]):
        self.point = torch.as_tensor(point, dtype=DTYPE).reshape(-1)
        self.dim = self.point.shape[0]

    def sample(self, n:int, seed:int=0, key:Sequence=(), start:int=0) -> torch.Tensor:
        return self.point.expand(n, self.dim).clone()

    def mean(self) -> torch.Tensor:
        return self.point.clone()


def as_sampler(source):
    '''
    Anything with a sample(n, seed, key, start) method is returned as
    is. A path is read with load_matrix, a 2D array becomes an
    EndpointDataset and a flat list of numbers a PointMass.
    '''
    if hasattr(source, 'sample'):
        return source
    if isinstance(source, str):
        return EndpointDataset.from_file(source)
    rows = torch.as_tensor(source, dtype=DTYPE)
    if rows.dim() == 1:
        return PointMass(rows)
    if rows.dim() == 2:
        return EndpointDataset(rows)
    raise ConfigError('cannot build an endpoint sampler from a {}-dimensional array'.format(
        rows.dim()))
