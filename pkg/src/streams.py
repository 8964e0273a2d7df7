'''
Counter-based random streams.

Every random quantity in the library is addressed by a seed and a stream
key, e.g. (seed, 'draw', 'z') or (seed, 'sde', step). Rows of a stream are
produced in fixed chunks of CHUNK rows, each chunk by its own Philox
generator, so row i of a stream is the same no matter how a caller
partitions a batch or how many workers are involved.
'''
import zlib
from typing import Callable, Sequence, Union

import numpy as np
import torch

__all__ = ['CHUNK', 'DTYPE', 'stream_key', 'generator', 'normal', 'uniform',
    'integers', 'rademacher']

CHUNK = 1024
DTYPE = torch.float64

KeyPart = Union[int, str]


def stream_key(parts:Sequence[KeyPart]) -> list:
    '''
    Map a mixed sequence of ints and string tags to non-negative ints
    usable as SeedSequence entropy.
    '''
    key = []
    for part in parts:
        if isinstance(part, str):
            key.append(zlib.crc32(part.encode('utf-8')))
        else:
            key.append(int(part) & 0xFFFFFFFFFFFFFFFF)
    return key


def generator(seed:int, *parts:KeyPart) -> np.random.Generator:
    '''
    A Philox generator keyed by (seed, *parts).

    Input arguments:
    * seed (int): The run seed
    * parts (int or str): Stream identifiers, e.g. ('sde', step)
    '''
    entropy = stream_key([seed, *parts])
    key = np.random.SeedSequence(entropy).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _rows(seed:int, key:Sequence[KeyPart], start:int, n:int,
        draw:Callable[[np.random.Generator, int], np.ndarray]) -> np.ndarray:
    if n <= 0:
        return draw(generator(seed, *key, 0), 0)
    first, last = start // CHUNK, (start + n - 1) // CHUNK
    blocks = []
    for chunk in range(first, last + 1):
        rows = draw(generator(seed, *key, chunk), CHUNK)
        lo = max(start - chunk * CHUNK, 0)
        hi = min(start + n - chunk * CHUNK, CHUNK)
        blocks.append(rows[lo:hi])
    return np.concatenate(blocks, axis=0)


def normal(seed:int, key:Sequence[KeyPart], n:int, d:int,
        start:int=0) -> torch.Tensor:
    '''
    Rows [start, start+n) of a standard normal stream, shape [n, d].
    '''
    rows = _rows(seed, key, start, n,
        lambda g, m: g.standard_normal((m, d)))
    return torch.from_numpy(rows).to(DTYPE)


def uniform(seed:int, key:Sequence[KeyPart], n:int, start:int=0) -> torch.Tensor:
    '''
    Rows [start, start+n) of a U[0,1) stream, shape [n].
    '''
    rows = _rows(seed, key, start, n, lambda g, m: g.random(m))
    return torch.from_numpy(rows).to(DTYPE)


def integers(seed:int, key:Sequence[KeyPart], n:int, high:int,
        start:int=0) -> torch.Tensor:
    '''
    Rows [start, start+n) of a uniform integer stream on [0, high).
    '''
    rows = _rows(seed, key, start, n,
        lambda g, m: g.integers(0, high, size=m))
    return torch.from_numpy(rows).long()


def rademacher(seed:int, key:Sequence[KeyPart], n:int, d:int,
        start:int=0) -> torch.Tensor:
    rows = _rows(seed, key, start, n,
        lambda g, m: g.integers(0, 2, size=(m, d)) * 2.0 - 1.0)
    return torch.from_numpy(rows).to(DTYPE)
