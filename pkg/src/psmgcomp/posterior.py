"""Conjugate posteriors for the saturated (BSAT) and partially saturated (PSM)
outcome models, closed-form effect moments, and Monte Carlo effect draws.

The effect is the standardized contrast

    delta = sum_c gamma_c * (theta_{1,c} - theta_{0,c})

with gamma ~ Dirichlet(a + eps) and independent Beta posteriors for every
treatment-by-confounder cell. Cells with no data keep the prior, which for
the PSM carries ``b*n/2**(p+1)`` pseudo-observations split by the fitted
main-effects model.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import numpy as np

from .data import CellTable, Hyperparams
from .parametric import LogisticModel
from .streams import RandomStream, beta_variates, dirichlet_variates

MAX_ENUM_P = 24
DEFAULT_DRAWS = 10_000
# Elements per (draws x cells) chunk; fixed so chunking never depends on threads.
CHUNK_ELEMENTS = 1 << 21
CODE_BLOCK = 1 << 18

METHODS = ("BSAT", "PSM", "PSM-CLT", "PSM-Random", "Parametric")


class EnumerationError(ValueError):
    """Full enumeration of 2**p confounder codes is beyond the guard."""


@dataclass(frozen=True, eq=False)
class OutcomePosterior:
    """Beta posteriors for every (x, c) cell.

    Parameters are stored explicitly for the observed codes (``codes``, the
    M1 set); any other code follows the prior rule in :meth:`prior_params`.
    """

    mode: str
    phi: float
    b: float
    n: int
    p: int
    codes: np.ndarray
    alpha1: np.ndarray
    beta1: np.ndarray
    alpha0: np.ndarray
    beta0: np.ndarray
    model: LogisticModel | None = None

    @property
    def pseudo(self) -> float:
        """Pseudo-observations per cell, ``b*n / 2**(p+1)``."""
        return math.ldexp(self.b * self.n, -(self.p + 1))

    def theta_hat(self, x: int, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if self.model is None:
            return np.full(codes.shape, 0.5)
        return self.model.predict(x, codes)

    def prior_params(self, x: int, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Beta parameters of cells with no data (the prior)."""
        codes = np.asarray(codes, dtype=np.int64)
        if self.mode == "BSAT":
            full = np.full(codes.shape, float(self.phi))
            return full, full.copy()
        th = self.theta_hat(x, codes)
        w = self.pseudo
        return self.phi + w * th, self.phi + w * (1.0 - th)

    def arm_params(self, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """``(alpha1, beta1, alpha0, beta0)`` for arbitrary codes."""
        codes = np.asarray(codes, dtype=np.int64)
        a1, b1 = self.prior_params(1, codes)
        a0, b0 = self.prior_params(0, codes)
        if len(self.codes):
            pos = np.minimum(np.searchsorted(self.codes, codes), len(self.codes) - 1)
            hit = self.codes[pos] == codes
            a1[hit] = self.alpha1[pos[hit]]
            b1[hit] = self.beta1[pos[hit]]
            a0[hit] = self.alpha0[pos[hit]]
            b0[hit] = self.beta0[pos[hit]]
        return a1, b1, a0, b0

    @property
    def observed(self) -> dict[tuple[int, int], tuple[float, float]]:
        out = {}
        for i, code in enumerate(self.codes.tolist()):
            out[(1, code)] = (float(self.alpha1[i]), float(self.beta1[i]))
            out[(0, code)] = (float(self.alpha0[i]), float(self.beta0[i]))
        return out


def bsat_posterior(t: CellTable, phi: float) -> OutcomePosterior:
    """Independent Beta(phi, phi) priors updated by the raw cell counts."""
    if not phi > 0:
        raise ValueError("phi must be > 0")
    return OutcomePosterior(
        mode="BSAT", phi=float(phi), b=0.0, n=t.n, p=t.p, codes=t.codes,
        alpha1=phi + t.y1, beta1=phi + (t.n1 - t.y1),
        alpha0=phi + t.y0, beta0=phi + (t.n0 - t.y0),
    )


def psm_posterior(t: CellTable, g: LogisticModel, h: Hyperparams) -> OutcomePosterior:
    """Data-driven prior from ``g`` plus the (1-b)-weighted cell counts."""
    if g.p != t.p:
        raise ValueError(f"model has p={g.p}, table has p={t.p}")
    op = OutcomePosterior(
        mode="PSM", phi=float(h.phi), b=float(h.b), n=t.n, p=t.p, codes=t.codes,
        alpha1=np.empty(0), beta1=np.empty(0), alpha0=np.empty(0), beta0=np.empty(0), model=g,
    )
    keep = 1.0 - h.b
    a1, b1 = op.prior_params(1, t.codes)
    a0, b0 = op.prior_params(0, t.codes)
    return replace(
        op,
        alpha1=a1 + keep * t.y1, beta1=b1 + keep * (t.n1 - t.y1),
        alpha0=a0 + keep * t.y0, beta0=b0 + keep * (t.n0 - t.y0),
    )


def pseudo_count_identity(t: CellTable, h: Hyperparams, g: LogisticModel) -> float:
    """Total pseudo plus down-weighted real observations over all cells.

    Observed codes are summed from the posterior parameters; the M0 cells all
    carry exactly ``pseudo`` each, so they are added as ``2*|M0|*pseudo``.
    """
    op = psm_posterior(t, g, h)
    observed = np.sum(op.alpha1 + op.beta1 - 2 * op.phi) + np.sum(op.alpha0 + op.beta0 - 2 * op.phi)
    return float(observed + 2 * t.m0_size * op.pseudo)


@dataclass(frozen=True, eq=False)
class GammaPosterior:
    """Dirichlet(a + eps) posterior over confounder-code probabilities."""

    estimand: str
    epsilon: float
    p: int
    codes: np.ndarray
    counts: np.ndarray

    @property
    def a0(self) -> float:
        return float(self.counts.sum()) + math.ldexp(self.epsilon, self.p)

    def weights(self, codes: np.ndarray) -> np.ndarray:
        """Dirichlet parameters ``a_c + eps`` for arbitrary codes."""
        codes = np.asarray(codes, dtype=np.int64)
        out = np.full(codes.shape, float(self.epsilon))
        if len(self.codes):
            pos = np.minimum(np.searchsorted(self.codes, codes), len(self.codes) - 1)
            hit = self.codes[pos] == codes
            out[hit] = self.counts[pos[hit]] + self.epsilon
        return out

    @property
    def mapping(self) -> dict[int, int]:
        return {c: int(a) for c, a in zip(self.codes.tolist(), self.counts.tolist()) if a}


def dirichlet_posterior(t: CellTable, epsilon: float, estimand: str = "ATT") -> GammaPosterior:
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    estimand = estimand.upper()
    if estimand == "ATT":
        if t.n_treated == 0:
            raise ValueError("ATT is undefined without treated rows")
        counts = t.n1
    elif estimand == "ATE":
        counts = t.n1 + t.n0
    else:
        raise ValueError(f"unknown estimand {estimand!r}")
    return GammaPosterior(estimand=estimand, epsilon=float(epsilon), p=t.p,
                          codes=t.codes, counts=np.asarray(counts, dtype=float))


@dataclass(eq=False)
class EffectEstimate:
    draws: np.ndarray
    mean: float
    sd: float
    method: str
    closed_mean: float | None = None
    closed_sd: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def from_draws(cls, draws: np.ndarray, method: str, **kw) -> "EffectEstimate":
        draws = np.asarray(draws, dtype=float)
        sd = float(draws.std(ddof=1)) if draws.size > 1 else 0.0
        return cls(draws=draws, mean=float(draws.mean()), sd=sd, method=method, **kw)

    def interval(self, level: float = 0.95) -> tuple[float, float]:
        """Central credible interval from the draws (not coverage-calibrated)."""
        if self.draws.size == 0:
            return (math.nan, math.nan)
        lo = (1.0 - level) / 2
        q = np.quantile(self.draws, [lo, 1.0 - lo])
        return float(q[0]), float(q[1])


def _check_pair(op: OutcomePosterior, gp: GammaPosterior):
    if op.p != gp.p:
        raise ValueError(f"outcome posterior has p={op.p}, Dirichlet posterior has p={gp.p}")


def _guard(p: int):
    if p > MAX_ENUM_P:
        raise EnumerationError(
            f"p={p} exceeds the full-enumeration limit {MAX_ENUM_P}; "
            "use approx.sample_effect_clt or approx.sample_effect_random")


def beta_moments(alpha: np.ndarray, beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = alpha + beta
    return alpha / s, alpha * beta / (s * s * (s + 1.0))


def cell_contrast_moments(op: OutcomePosterior, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of ``theta_1c - theta_0c`` for each code."""
    a1, b1, a0, b0 = op.arm_params(codes)
    m1, v1 = beta_moments(a1, b1)
    m0, v0 = beta_moments(a0, b0)
    return m1 - m0, v1 + v0


@dataclass
class _MomentSums:
    """Running sums for the effect mean and variance.

    ``var_terms`` is sum_c V(gamma_c theta*_c); ``s`` and ``q`` are
    sum_c w_c E(theta*_c) and sum_c w_c**2 E(theta*_c)**2, which give the
    pairwise Dirichlet covariance sum as -(s**2 - q) / (a0**2 (a0 + 1)).
    """

    a0: float
    var_terms: float = 0.0
    s: float = 0.0
    q: float = 0.0

    def add(self, w: np.ndarray, e: np.ndarray, v: np.ndarray):
        a0 = self.a0
        eg = w / a0
        vg = w * (a0 - w) / (a0 * a0 * (a0 + 1.0))
        self.var_terms += float(np.sum(vg * v + vg * e * e + v * eg * eg))
        we = w * e
        self.s += float(np.sum(we))
        self.q += float(np.sum(we * we))

    @property
    def mean(self) -> float:
        return self.s / self.a0

    @property
    def variance(self) -> float:
        a0 = self.a0
        return self.var_terms - (self.s * self.s - self.q) / (a0 * a0 * (a0 + 1.0))


def _moment_sums(op: OutcomePosterior, gp: GammaPosterior,
                 observed: bool = True, missing: bool = True) -> _MomentSums:
    """Accumulate over M1 and/or M0 (codes outside both posteriors' tables)."""
    sums = _MomentSums(gp.a0)
    m1 = np.union1d(op.codes, gp.codes)
    if observed and len(m1):
        e, v = cell_contrast_moments(op, m1)
        sums.add(gp.weights(m1), e, v)
    n_missing = (1 << op.p) - len(m1)
    if not missing or n_missing == 0:
        return sums
    if op.mode == "BSAT":
        # Missing cells are identical Beta(phi, phi) pairs with E(theta*) = 0,
        # so only the variance terms survive and they are all equal.
        _, v = beta_moments(np.array([op.phi]), np.array([op.phi]))
        one = _MomentSums(gp.a0)
        one.add(np.array([gp.epsilon]), np.zeros(1), 2 * v)
        sums.var_terms += n_missing * one.var_terms
        return sums
    _guard(op.p)
    table = _CodeSet(m1)
    total = 1 << op.p
    for start in range(0, total, CODE_BLOCK):
        codes = np.arange(start, min(start + CODE_BLOCK, total), dtype=np.int64)
        codes = codes[~table.contains(codes)]
        if len(codes):
            e, v = cell_contrast_moments(op, codes)
            sums.add(gp.weights(codes), e, v)
    return sums


class _CodeSet:
    def __init__(self, codes: np.ndarray):
        self.codes = np.asarray(codes, dtype=np.int64)

    def contains(self, codes: np.ndarray) -> np.ndarray:
        if len(self.codes) == 0:
            return np.zeros(len(codes), dtype=bool)
        pos = np.minimum(np.searchsorted(self.codes, codes), len(self.codes) - 1)
        return self.codes[pos] == codes


def closed_form_mean(op: OutcomePosterior, gp: GammaPosterior) -> float:
    """Exact posterior mean of the effect."""
    _check_pair(op, gp)
    return _moment_sums(op, gp).mean


def closed_form_variance(op: OutcomePosterior, gp: GammaPosterior) -> float:
    """Exact posterior variance of the effect, in O(2**p)."""
    _check_pair(op, gp)
    return _moment_sums(op, gp).variance


def closed_form_moments(op: OutcomePosterior, gp: GammaPosterior) -> tuple[float, float]:
    _check_pair(op, gp)
    sums = _moment_sums(op, gp)
    return sums.mean, sums.variance


def chunk_layout(draws: int, n_cells: int) -> list[tuple[int, int]]:
    """Fixed ``(start, size)`` chunks for ``draws`` draws over ``n_cells`` cells."""
    size = max(1, min(draws, CHUNK_ELEMENTS // max(n_cells, 1)))
    return [(s, min(size, draws - s)) for s in range(0, draws, size)]


def mixture_draws(
    dir_params: np.ndarray,
    alpha1: np.ndarray,
    beta1: np.ndarray,
    alpha0: np.ndarray,
    beta0: np.ndarray,
    draws: int,
    stream: RandomStream,
    workers: int = 1,
    extra: tuple[float, float] | None = None,
) -> np.ndarray:
    """Draws of ``sum_k gamma_k (theta_1k - theta_0k)``.

    ``dir_params`` may be longer than the Beta arrays; trailing Dirichlet
    components then carry mass but no contrast. ``extra = (mu, sigma)`` adds
    an independent Normal summand per draw.
    """
    k = len(alpha1)
    layout = chunk_layout(draws, len(dir_params))

    def run(i):
        _, m = layout[i]
        rng = stream.generator(i)
        gamma = dirichlet_variates(rng, dir_params, m)[:, :k]
        diff = beta_variates(rng, alpha1, beta1, m)
        diff -= beta_variates(rng, alpha0, beta0, m)
        out = np.einsum("ij,ij->i", gamma, diff)
        if extra is not None:
            out += extra[0] + extra[1] * rng.standard_normal(m)
        return out

    if workers > 1 and len(layout) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(layout))))
    else:
        parts = [run(i) for i in range(len(layout))]
    return np.concatenate(parts) if parts else np.empty(0)


def sample_effect(
    op: OutcomePosterior,
    gp: GammaPosterior,
    draws: int = DEFAULT_DRAWS,
    rng: RandomStream | int = 0,
    workers: int = 1,
    closed_form: bool = True,
) -> EffectEstimate:
    """Monte Carlo posterior of the effect over all 2**p confounder codes."""
    _check_pair(op, gp)
    _guard(op.p)
    stream = rng if isinstance(rng, RandomStream) else RandomStream(int(rng))
    codes = np.arange(1 << op.p, dtype=np.int64)
    a1, b1, a0, b0 = op.arm_params(codes)
    out = mixture_draws(gp.weights(codes), a1, b1, a0, b0, draws, stream, workers)
    np.clip(out, -1.0, 1.0, out=out)
    kw = {}
    if closed_form:
        m, v = closed_form_moments(op, gp)
        kw = dict(closed_mean=m, closed_sd=math.sqrt(max(v, 0.0)))
    return EffectEstimate.from_draws(out, op.mode, **kw)


def parametric_effect(t: CellTable, g: LogisticModel, estimand: str = "ATT") -> EffectEstimate:
    """Plug-in effect from ``g`` standardized over the empirical code frequencies."""
    weights = t.n1 if estimand.upper() == "ATT" else t.n1 + t.n0
    weights = np.asarray(weights, dtype=float)
    if weights.sum() == 0:
        raise ValueError("no rows to standardize over")
    contrast = g.predict(1, t.codes) - g.predict(0, t.codes)
    est = float(np.dot(weights, contrast) / weights.sum())
    return EffectEstimate(draws=np.empty(0), mean=est, sd=math.nan, method="Parametric")
