"""Simulation design with known ATT and main-effects bias.

Confounders are equicorrelated binaries from a latent Gaussian thresholded at
zero, treatment follows ``logit P(X=1|C) = omega.C`` and the outcome is

    logit P(Y=1|X=0,C) = b0 + b1.(C-mu1) + (b2 + l1).(C-mu1)
    logit P(Y=1|X=1,C) = b0 + l0 + b1.(C-mu1) + (b2 - l1).(C-mu1)

with ``mu1 = E(C|X=1)`` and the scalar ``l1`` added elementwise. The exact
confounder distribution comes from a one-factor Gauss-Hermite integral that
depends on a code only through its popcount; the truth (ATT, MEB) is then an
exact sum over the 2**p codes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import expit, ndtr

from .data import BinaryDataset, MAX_P
from .neldermead import NelderMeadOptions, nelder_mead
from .parametric import FitOptions, LogisticModel, fit_main_effects, fit_weighted
from .streams import RandomStream

log = logging.getLogger(__name__)

MAX_EXACT_P = 24
GH_NODES = 96
GH_CHECK = (64, 128)
GH_TOL = 1e-10
ROW_BLOCK = 1 << 18
MC_ROWS = 10_000_000


class QuadratureError(RuntimeError):
    pass


class CalibrationError(RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class DgpSpec:
    p: int
    beta0: float
    beta1: tuple[float, ...]
    beta2: tuple[float, ...]
    omega: tuple[float, ...]
    rho_c: float = 0.3
    lambda0: float = 0.0
    lambda1: float = 0.0
    mu1: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("beta1", "beta2", "omega"):
            vec = tuple(float(v) for v in getattr(self, name))
            if len(vec) != self.p:
                raise ValueError(f"{name} must have length p={self.p}")
            object.__setattr__(self, name, vec)
        if not 0.0 <= self.rho_c < 1.0:
            raise ValueError("rho_c must lie in [0, 1)")
        if not 1 <= self.p <= MAX_P:
            raise ValueError(f"p must lie in [1, {MAX_P}]")
        if self.mu1 is not None:
            mu1 = tuple(float(v) for v in self.mu1)
            if len(mu1) != self.p or not all(0.0 < v < 1.0 for v in mu1):
                raise ValueError("mu1 must have p components inside (0, 1)")
            object.__setattr__(self, "mu1", mu1)

    def with_lambdas(self, lambda0: float, lambda1: float) -> "DgpSpec":
        return replace(self, lambda0=float(lambda0), lambda1=float(lambda1))

    def resolved(self) -> "DgpSpec":
        """Copy with ``mu1`` filled in (it depends only on rho_c and omega)."""
        if self.mu1 is not None:
            return self
        return replace(self, mu1=tuple(mu1(self)))

    def arm_slopes(self) -> tuple[np.ndarray, np.ndarray]:
        """Coefficient vectors on (C - mu1) for the control and treated arms."""
        b1 = np.asarray(self.beta1)
        b2 = np.asarray(self.beta2)
        return b1 + (b2 + self.lambda1), b1 + (b2 - self.lambda1)


# ----------------------------------------------------------------------------
# exact confounder distribution


def all_codes_dot(vec, p: int) -> np.ndarray:
    """``vec . c`` for every code 0..2**p-1 (little-endian bits)."""
    out = np.zeros(1)
    for j in range(p):
        out = np.concatenate([out, out + vec[j]])
    return out


def popcounts(p: int) -> np.ndarray:
    out = np.zeros(1, dtype=np.int64)
    for _ in range(p):
        out = np.concatenate([out, out + 1])
    return out


def _pattern_probs(p: int, rho: float, nodes: int) -> np.ndarray:
    """P(C = c) for a single code with k ones, for k = 0..p."""
    k = np.arange(p + 1)
    if rho == 0.0:
        return np.full(p + 1, 0.5**p)
    z, w = hermegauss(nodes)
    w = w / math.sqrt(2 * math.pi)
    q = ndtr(math.sqrt(rho / (1.0 - rho)) * z)
    terms = q[None, :] ** k[:, None] * (1.0 - q[None, :]) ** (p - k)[:, None]
    return terms @ w


def pattern_probs(p: int, rho: float, nodes: int = GH_NODES) -> np.ndarray:
    lo, hi = (_pattern_probs(p, rho, n) for n in GH_CHECK)
    gap = float(np.max(np.abs(lo - hi)))
    if gap > GH_TOL:
        raise QuadratureError(
            f"Gauss-Hermite check failed for rho={rho}: 64 vs 128 nodes differ by {gap:.3g}")
    return _pattern_probs(p, rho, nodes)


@dataclass(frozen=True, eq=False)
class CellProbs:
    f: np.ndarray
    f_treated: np.ndarray
    propensity: np.ndarray


def cell_probabilities(spec: DgpSpec) -> CellProbs:
    """``f(c)``, ``f(c | X=1)`` and ``P(X=1 | c)`` over all 2**p codes."""
    if spec.p > MAX_EXACT_P:
        raise ValueError(f"exact cell probabilities need p <= {MAX_EXACT_P}")
    f = pattern_probs(spec.p, spec.rho_c)[popcounts(spec.p)]
    e = expit(all_codes_dot(spec.omega, spec.p))
    f1 = f * e
    f1 /= f1.sum()
    return CellProbs(f=f, f_treated=f1, propensity=e)


def _bit_marginals(weights: np.ndarray, p: int) -> np.ndarray:
    # C-order reshape puts bit p-1 on axis 0 and bit 0 on the last axis.
    cube = weights.reshape((2,) * p)
    out = np.empty(p)
    for j in range(p):
        axis = p - 1 - j
        out[j] = np.take(cube, 1, axis=axis).sum()
    return out


def mu1(spec: DgpSpec) -> np.ndarray:
    """``E(C | X=1)``."""
    if spec.p > MAX_EXACT_P:
        return _mc_mu1(spec, MC_ROWS, RandomStream(0, (9,)))
    return _bit_marginals(cell_probabilities(spec).f_treated, spec.p)


# ----------------------------------------------------------------------------
# truth


@dataclass(frozen=True, eq=False)
class TruthSummary:
    delta_t: float
    meb: float
    mu1: np.ndarray
    cell_probs: CellProbs | None = None
    model: LogisticModel | None = None
    se: float = 0.0


class _Truth:
    """Caches everything about a spec that does not depend on the lambdas."""

    def __init__(self, spec: DgpSpec):
        if spec.p > MAX_EXACT_P:
            raise ValueError(f"exact truth needs p <= {MAX_EXACT_P}")
        self.spec = spec.resolved()
        p = spec.p
        self.probs = cell_probabilities(self.spec)
        self.mu1 = np.asarray(self.spec.mu1)
        base = np.asarray(spec.beta1) + np.asarray(spec.beta2)
        self.base_c = all_codes_dot(base, p)
        self.base_mu = float(base @ self.mu1)
        self.k = popcounts(p).astype(float)
        self.k_mu = float(self.mu1.sum())
        codes = np.arange(1 << p, dtype=np.int64)
        self.fit_x = np.concatenate([np.zeros(len(codes)), np.ones(len(codes))])
        self.fit_codes = np.concatenate([codes, codes])
        e = self.probs.propensity
        self.fit_w = np.concatenate([self.probs.f * (1 - e), self.probs.f * e])

    def arm_probs(self, lambda0: float, lambda1: float) -> tuple[np.ndarray, np.ndarray]:
        s = self.spec
        centred = self.base_c - self.base_mu
        shift = self.k - self.k_mu
        eta0 = s.beta0 + centred + lambda1 * shift
        eta1 = s.beta0 + lambda0 + centred - lambda1 * shift
        return expit(eta0), expit(eta1)

    def att(self, lambda0: float, lambda1: float) -> float:
        p0, p1 = self.arm_probs(lambda0, lambda1)
        return float(np.dot(self.probs.f_treated, p1 - p0))

    def meb(self, lambda0: float, lambda1: float, att: float | None = None):
        p0, p1 = self.arm_probs(lambda0, lambda1)
        if att is None:
            att = float(np.dot(self.probs.f_treated, p1 - p0))
        g = fit_weighted(None, FitOptions(), p=self.spec.p, x=self.fit_x, codes=self.fit_codes,
                         weights=self.fit_w, q=np.concatenate([p0, p1]))
        codes = self.fit_codes[: len(p0)]
        plug_in = float(np.dot(self.probs.f_treated, g.predict(1, codes) - g.predict(0, codes)))
        return plug_in - att, g


def true_att(spec: DgpSpec) -> float:
    if spec.p > MAX_EXACT_P:
        return truth_mc(spec).delta_t
    return _Truth(spec).att(spec.lambda0, spec.lambda1)


def population_meb(spec: DgpSpec) -> float:
    """Plug-in ATT of the population main-effects fit minus the true ATT."""
    if spec.p > MAX_EXACT_P:
        return truth_mc(spec).meb
    eng = _Truth(spec)
    return eng.meb(spec.lambda0, spec.lambda1)[0]


def truth(spec: DgpSpec) -> TruthSummary:
    if spec.p > MAX_EXACT_P:
        return truth_mc(spec)
    eng = _Truth(spec)
    att = eng.att(spec.lambda0, spec.lambda1)
    meb, g = eng.meb(spec.lambda0, spec.lambda1, att)
    return TruthSummary(delta_t=att, meb=meb, mu1=eng.mu1, cell_probs=eng.probs, model=g)


# ----------------------------------------------------------------------------
# simulation


def _confounder_block(spec: DgpSpec, m: int, rng: np.random.Generator) -> np.ndarray:
    w = rng.standard_normal(m)
    e = rng.standard_normal((m, spec.p))
    latent = math.sqrt(spec.rho_c) * w[:, None] + math.sqrt(1.0 - spec.rho_c) * e
    return (latent > 0).astype(np.uint8)


def _row_blocks(n: int):
    return [(s, min(ROW_BLOCK, n - s)) for s in range(0, n, ROW_BLOCK)]


def _as_stream(rng) -> RandomStream:
    return rng if isinstance(rng, RandomStream) else RandomStream(int(rng))


def simulate_confounders(spec: DgpSpec, n: int, rng: RandomStream | int = 0) -> np.ndarray:
    """(n, p) bit matrix; identical to the confounders of :func:`simulate_dataset`."""
    stream = _as_stream(rng)
    parts = [_confounder_block(spec, m, stream.generator(i)) for i, (_, m) in enumerate(_row_blocks(n))]
    return np.concatenate(parts) if parts else np.zeros((0, spec.p), dtype=np.uint8)


def _dataset_block(spec: DgpSpec, m: int, rng: np.random.Generator):
    c = _confounder_block(spec, m, rng)
    cf = c.astype(float)
    x = (rng.random(m) < expit(cf @ np.asarray(spec.omega))).astype(np.uint8)
    slope0, slope1 = spec.arm_slopes()
    centred = cf - np.asarray(spec.mu1)
    eta0 = spec.beta0 + centred @ slope0
    eta1 = spec.beta0 + spec.lambda0 + centred @ slope1
    eta = np.where(x == 1, eta1, eta0)
    y = (rng.random(m) < expit(eta)).astype(np.uint8)
    return y, x, c, expit(eta1) - expit(eta0)


def simulate_dataset(spec: DgpSpec, n: int, rng: RandomStream | int = 0) -> BinaryDataset:
    spec = spec.resolved()
    stream = _as_stream(rng)
    parts = [_dataset_block(spec, m, stream.generator(i)) for i, (_, m) in enumerate(_row_blocks(n))]
    y, x, c, _ = (np.concatenate(z) for z in zip(*parts))
    return BinaryDataset(y=y, x=x, c=c)


def _mc_mu1(spec: DgpSpec, n: int, stream: RandomStream) -> np.ndarray:
    total = np.zeros(spec.p)
    count = 0
    for i, (_, m) in enumerate(_row_blocks(n)):
        rng = stream.generator(i)
        c = _confounder_block(spec, m, rng)
        x = rng.random(m) < expit(c.astype(float) @ np.asarray(spec.omega))
        total += c[x].sum(axis=0)
        count += int(x.sum())
    out = total / count
    return np.clip(out, 1e-12, 1 - 1e-12)


def truth_mc(spec: DgpSpec, n: int = MC_ROWS, rng: RandomStream | int = 0,
             meb_rows: int = 1_000_000) -> TruthSummary:
    """Monte Carlo truth for p beyond exact enumeration.

    The ATT is averaged from the exact per-row contrast over treated rows and
    reported with its standard error; the MEB uses a main-effects fit on a
    ``meb_rows`` subsample.
    """
    stream = _as_stream(rng)
    spec = spec if spec.mu1 is not None else replace(spec, mu1=tuple(_mc_mu1(spec, n, stream.spawn(0))))
    s1 = s2 = 0.0
    count = 0
    for i, (_, m) in enumerate(_row_blocks(n)):
        _, x, _, diff = _dataset_block(spec, m, stream.spawn(1).generator(i))
        d = diff[x == 1]
        s1 += float(d.sum())
        s2 += float((d * d).sum())
        count += len(d)
    att = s1 / count
    se = math.sqrt(max(s2 / count - att * att, 0.0) / count)
    d = simulate_dataset(spec, meb_rows, stream.spawn(2))
    g = fit_main_effects(d)
    treated = d.codes[d.x == 1]
    meb = float(np.mean(g.predict(1, treated) - g.predict(0, treated))) - att
    return TruthSummary(delta_t=att, meb=meb, mu1=np.asarray(spec.mu1), model=g, se=se)


# ----------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class CalibrationTarget:
    delta_t: float = 0.3
    meb: float = 0.1
    tolerance: float = 0.005
    max_restarts: int = 20

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")


@dataclass(frozen=True)
class CalibrationResult:
    lambda0: float
    lambda1: float
    delta_t: float
    meb: float
    attempts: int
    spec: DgpSpec

    def residuals(self, target: CalibrationTarget) -> tuple[float, float]:
        return self.delta_t - target.delta_t, self.meb - target.meb


def calibrate(spec: DgpSpec, target: CalibrationTarget, rng: RandomStream | int = 0,
              options: NelderMeadOptions | None = None) -> CalibrationResult:
    """Find (lambda0, lambda1) hitting the target ATT and MEB.

    Starts at (0, 0); each failed attempt restarts Nelder-Mead from a fresh
    point uniform on (-2, 2)**2, up to ``target.max_restarts`` restarts.
    """
    eng = _Truth(spec)
    gen = _as_stream(rng).generator()

    def evaluate(lam):
        att = eng.att(lam[0], lam[1])
        try:
            meb, _ = eng.meb(lam[0], lam[1], att)
        except Exception:  # a failed population fit is just a bad point
            return math.inf, att, math.nan
        return (att - target.delta_t) ** 2 + (meb - target.meb) ** 2, att, meb

    best = None
    start = np.zeros(2)
    for attempt in range(target.max_restarts + 1):
        if attempt:
            start = gen.uniform(-2.0, 2.0, size=2)
        res = nelder_mead(lambda lam: evaluate(lam)[0], start, options)
        _, att, meb = evaluate(res.x)
        cand = CalibrationResult(float(res.x[0]), float(res.x[1]), att, meb, attempt + 1,
                                 eng.spec.with_lambdas(res.x[0], res.x[1]))
        if best is None or res.fun < best[0]:
            best = (res.fun, cand)
        if abs(att - target.delta_t) < target.tolerance and abs(meb - target.meb) < target.tolerance:
            return cand
        log.info("calibration attempt %d missed: delta_t=%.4f meb=%.4f", attempt + 1, att, meb)
    _, cand = best
    raise CalibrationError(
        f"calibration failed after {target.max_restarts} restarts; best residuals "
        f"delta_t={cand.delta_t - target.delta_t:+.4g}, meb={cand.meb - target.meb:+.4g}",
        best=cand,
    )


# ----------------------------------------------------------------------------
# scenarios (flat key-value JSON documents)

DESIGN_GRID = {
    (4, -0.1): dict(beta1_range=(-1, 1), beta2_range=(-2, 2), omega_range=(-2, 2)),
    (4, 0.1): dict(beta1_range=(-2, 2), beta2_range=(-2, 2), omega_range=(-2, 2)),
    (8, -0.1): dict(beta1_range=(-2, 2), beta2_range=(-2, 2), omega_range=(-2, 2)),
    (8, 0.1): dict(beta1_range=(-2, 2), beta2_range=(-2, 2), omega_range=(-2, 2)),
    (12, -0.1): dict(beta1_range=(-3, 1), beta2_range=(-2, 2), omega_range=(-2, 2)),
    (12, 0.1): dict(beta1_range=(-2, 1), beta2_range=(-3, 3), omega_range=(-2, 2)),
    (16, -0.1): dict(beta1_range=(-2, 1), beta2_range=(-2, 2), omega_range=(-2, 2)),
    (16, 0.1): dict(beta1_range=(-2, 1), beta2_range=(-2, 2), omega_range=(-2, 2)),
    (20, -0.1): dict(beta1_range=(-2, 1), beta2_range=(-2, 2), omega_range=(-2, 2)),
    (20, 0.1): dict(beta1_range=(-2, 1), beta2_range=(-2, 2), omega_range=(-2, 2)),
}

SCENARIO_KEYS = ("p", "delta_t", "meb", "rho_c", "beta0", "beta1_range", "beta2_range",
                 "omega_range", "seed")


def design_scenario(p: int, meb: float, seed: int = 0) -> dict:
    ranges = DESIGN_GRID[(p, round(meb, 1))]
    return dict(p=p, delta_t=0.3, meb=meb, rho_c=0.3, beta0=-1.0,
                **{k: list(v) for k, v in ranges.items()}, seed=seed)


def spec_from_scenario(scenario: Mapping) -> DgpSpec:
    """Draw beta1, beta2, omega from the scenario's uniform ranges.

    The coefficients come from ``RandomStream(seed, (1,))`` so the same file
    always yields the same spec; stored lambdas are carried over.
    """
    missing = [k for k in SCENARIO_KEYS if k not in scenario]
    if missing:
        raise KeyError(f"scenario is missing key(s): {', '.join(missing)}")
    p = int(scenario["p"])
    gen = RandomStream(int(scenario["seed"]), (1,)).generator()
    vecs = {}
    for name in ("beta1", "beta2", "omega"):
        lo, hi = scenario[f"{name}_range"]
        vecs[name] = tuple(gen.uniform(float(lo), float(hi), size=p))
    return DgpSpec(
        p=p, beta0=float(scenario["beta0"]), rho_c=float(scenario["rho_c"]),
        lambda0=float(scenario.get("lambda0", 0.0)), lambda1=float(scenario.get("lambda1", 0.0)),
        **vecs,
    )


def is_calibrated(scenario: Mapping) -> bool:
    return "lambda0" in scenario and "lambda1" in scenario


def read_scenario(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("scenario file must hold a flat JSON object")
    return doc


def write_scenario(scenario: Mapping, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dict(scenario), fh, indent=2, sort_keys=False)
        fh.write("\n")
