"""Seeded random substreams and exact Beta / Dirichlet samplers.

Every random quantity in the package comes from a :class:`RandomStream`: a
root seed plus a tuple of integers naming the substream. Work that is split
into chunks draws chunk ``i`` from ``stream.generator(i)``, so results depend
only on the seed and the chunk layout, never on how chunks are scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit


@dataclass(frozen=True)
class RandomStream:
    seed: int
    substream: tuple[int, ...] = ()

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        sub = self.substream
        if isinstance(sub, (int, np.integer)):
            sub = (int(sub),)
        object.__setattr__(self, "substream", tuple(int(s) for s in sub))

    def spawn(self, *index: int) -> "RandomStream":
        """Child stream with ``index`` appended to the substream path."""
        return RandomStream(self.seed, self.substream + tuple(int(i) for i in index))

    def generator(self, *index: int) -> np.random.Generator:
        key = self.substream + tuple(int(i) for i in index)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=key)))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RandomStream):
        return rng.generator()
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    raise TypeError(f"cannot make a generator from {type(rng).__name__}")


def log_gamma_variates(rng: np.random.Generator, shape: np.ndarray, size: int) -> np.ndarray:
    """log of Gamma(shape, 1) draws, shape ``(size, len(shape))``.

    Shapes below 1 use ``G_a = G_{a+1} * U**(1/a)`` in log space, so tiny
    shapes (e.g. epsilon ~ 1e-4) never underflow to an exact zero.
    """
    shape = np.asarray(shape, dtype=float)
    small = shape < 1.0
    g = rng.standard_gamma(shape + small, size=(size, shape.size))
    out = np.log(g)
    if small.any():
        idx = np.flatnonzero(small)
        # log U is minus a standard exponential
        out[:, idx] -= rng.standard_exponential((size, idx.size)) / shape[idx]
    return out


def beta_variates(rng: np.random.Generator, alpha: np.ndarray, beta: np.ndarray, size: int) -> np.ndarray:
    """Beta draws as a ratio of Gamma variates, shape ``(size, len(alpha))``."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    la = log_gamma_variates(rng, alpha, size)
    lb = log_gamma_variates(rng, beta, size)
    # X / (X + Y) = expit(log X - log Y)
    return expit(la - lb)


def dirichlet_variates(rng: np.random.Generator, params: np.ndarray, size: int) -> np.ndarray:
    """Dirichlet draws as normalized Gamma variates, shape ``(size, k)``."""
    params = np.asarray(params, dtype=float)
    lg = log_gamma_variates(rng, params, size)
    lg -= lg.max(axis=1, keepdims=True)
    g = np.exp(lg)
    g /= g.sum(axis=1, keepdims=True)
    return g


def _check_positive(*arrays):
    for arr in arrays:
        arr = np.asarray(arr, dtype=float)
        if arr.size == 0 or not np.all(arr > 0) or not np.all(np.isfinite(arr)):
            raise ValueError("distribution parameters must be finite and > 0")


def sample_beta(alpha: float, beta: float, rng, size: int | None = None):
    """Draw from Beta(alpha, beta); a scalar when ``size`` is None."""
    _check_positive(alpha, beta)
    gen = as_generator(rng)
    out = beta_variates(gen, [alpha], [beta], 1 if size is None else size)[:, 0]
    return float(out[0]) if size is None else out


def sample_dirichlet(params: Sequence[float], rng, size: int | None = None) -> np.ndarray:
    """Draw from Dirichlet(params); a 1-d vector when ``size`` is None."""
    _check_positive(params)
    gen = as_generator(rng)
    out = dirichlet_variates(gen, np.asarray(params, dtype=float), 1 if size is None else size)
    return out[0] if size is None else out
