"""Scaling approximations for the PSM effect posterior when 2**p is large.

Both split the effect into the observed-code part (M1, sampled exactly) and
the part over codes with no data (M0):

* CLT: the M0 partial sum is replaced by one Normal draw with its exact
  mean and SD.
* Random: a uniform subset R of M0 stands in for all of M0, with its
  Dirichlet and Beta parameters scaled up by |M0|/|R| so the total prior
  mass and the per-cell prior means are unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import CellTable
from .posterior import (
    EffectEstimate,
    GammaPosterior,
    OutcomePosterior,
    _check_pair,
    _moment_sums,
    mixture_draws,
)
from .streams import RandomStream, as_generator


class NothingMissingError(ValueError):
    """Every confounder code is observed; use the full PSM instead."""


@dataclass(frozen=True)
class CltMoments:
    mu: float
    sigma: float
    m0_size: int


def _stream(rng) -> RandomStream:
    return rng if isinstance(rng, RandomStream) else RandomStream(int(rng))


def clt_moments_missing(op: OutcomePosterior, gp: GammaPosterior, t: CellTable) -> CltMoments:
    """Mean and SD of ``sum_{c in M0} gamma_c theta*_c``."""
    _check_pair(op, gp)
    if t.m0_size == 0:
        raise NothingMissingError("no missing confounder codes to approximate")
    sums = _moment_sums(op, gp, observed=False, missing=True)
    return CltMoments(mu=sums.mean, sigma=math.sqrt(max(sums.variance, 0.0)), m0_size=t.m0_size)


def _clamped(out: np.ndarray) -> int:
    n = int(np.count_nonzero((out < -1.0) | (out > 1.0)))
    np.clip(out, -1.0, 1.0, out=out)
    return n


def sample_effect_clt(
    op: OutcomePosterior,
    gp: GammaPosterior,
    t: CellTable,
    draws: int = 10_000,
    rng: RandomStream | int = 0,
    workers: int = 1,
) -> EffectEstimate:
    """Exact draws over M1 plus an independent Normal for the M0 sum.

    The Dirichlet is drawn over the M1 codes and one lumped component of
    mass ``eps*|M0|`` (aggregation keeps the M1 marginals exact); the lumped
    weight itself is dropped in favour of the Normal term.
    """
    mom = clt_moments_missing(op, gp, t)
    m1 = t.codes
    a1, b1, a0, b0 = op.arm_params(m1)
    dir_params = np.append(gp.weights(m1), gp.epsilon * t.m0_size)
    out = mixture_draws(dir_params, a1, b1, a0, b0, draws, _stream(rng), workers,
                        extra=(mom.mu, mom.sigma))
    clamped = _clamped(out)
    return EffectEstimate.from_draws(
        out, "PSM-CLT",
        diagnostics=dict(mu=mom.mu, sigma=mom.sigma, m0_size=mom.m0_size,
                         beta_cells=2 * len(m1), clamped=clamped),
    )


@dataclass(frozen=True, eq=False)
class MissingSample:
    codes: np.ndarray
    m0_size: int
    epsilon: float

    @property
    def size(self) -> int:
        return len(self.codes)

    @property
    def scale(self) -> float:
        return self.m0_size / self.size

    @property
    def epsilon_prime(self) -> float:
        return self.epsilon * self.scale


def sample_missing_cells(t: CellTable, r_size: int, rng, epsilon: float = 1.0) -> MissingSample:
    """Uniform sample of ``r_size`` distinct codes from M0, ascending.

    Rejection against the M1 set when M0 is the clear majority; otherwise M0
    is enumerated and sampled directly. ``r_size`` above ``|M0|`` is clamped.
    """
    m0 = t.m0_size
    if m0 == 0:
        raise NothingMissingError("no missing confounder codes to sample")
    if r_size < 1:
        raise ValueError("r_size must be >= 1")
    r_size = min(int(r_size), m0)
    if r_size == m0:
        return MissingSample(t.missing_codes(), m0, epsilon)
    gen = as_generator(rng)
    if m0 < 2 * t.m1_size:
        pool = t.missing_codes()
        picked = gen.choice(pool, size=r_size, replace=False)
        return MissingSample(np.sort(picked), m0, epsilon)
    total = t.n_codes
    chosen = np.empty(0, dtype=np.int64)
    while len(chosen) < r_size:
        need = r_size - len(chosen)
        cand = gen.integers(0, total, size=2 * need + 16, dtype=np.int64)
        cand = cand[~t.contains(cand)]
        # keep first occurrences, in draw order
        _, first = np.unique(cand, return_index=True)
        cand = cand[np.sort(first)]
        cand = cand[~np.isin(cand, chosen)]
        chosen = np.concatenate([chosen, cand[:need]])
    return MissingSample(np.sort(chosen), m0, epsilon)


def random_params(op: OutcomePosterior, gp: GammaPosterior, t: CellTable, ms: MissingSample):
    """Codes ``M1 u R`` (ascending) and their Dirichlet and Beta parameters."""
    codes = np.union1d(t.codes, ms.codes)
    in_r = np.isin(codes, ms.codes, assume_unique=True)
    scale = ms.scale
    dir_params = gp.weights(codes)
    dir_params[in_r] = gp.epsilon * scale
    a1, b1, a0, b0 = op.arm_params(codes)
    for arr in (a1, b1, a0, b0):
        arr[in_r] *= scale
    return codes, dir_params, a1, b1, a0, b0


def sample_effect_random(
    op: OutcomePosterior,
    gp: GammaPosterior,
    t: CellTable,
    ms: MissingSample,
    draws: int = 10_000,
    rng: RandomStream | int = 0,
    workers: int = 1,
) -> EffectEstimate:
    """Effect draws over ``M1 u R`` with R standing in for all of M0."""
    _check_pair(op, gp)
    if ms.epsilon != gp.epsilon:
        ms = MissingSample(ms.codes, ms.m0_size, gp.epsilon)
    codes, dir_params, a1, b1, a0, b0 = random_params(op, gp, t, ms)
    out = mixture_draws(dir_params, a1, b1, a0, b0, draws, _stream(rng), workers)
    clamped = _clamped(out)
    return EffectEstimate.from_draws(
        out, "PSM-Random",
        diagnostics=dict(r_size=ms.size, m0_size=ms.m0_size, scale=ms.scale,
                         beta_cells=2 * len(codes), clamped=clamped),
    )
