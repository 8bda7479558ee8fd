"""Main-effects logistic model ``logit g(y | x, c) = a0 + a1*x + psi.c``.

Fitted by iteratively reweighted least squares with step halving. The same
solver handles raw rows (unit weights, 0/1 outcomes) and weighted cells with
fractional outcomes, which is how population-level fits are done.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from .data import BinaryDataset

log = logging.getLogger(__name__)

RIDGE_RETRY = 1e-6
# Newton step bound for convergence of unpenalized fits (separation guard).
STEP_TOL = 1e-6


class FitError(RuntimeError):
    """IRLS failed to converge, even after the ridge retry."""


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 100
    tolerance: float = 1e-8
    ridge: float = 0.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")


@dataclass(frozen=True)
class LogisticModel:
    alpha0: float
    alpha1: float
    psi: tuple[float, ...]
    ridge: float = 0.0
    iterations: int = 0

    def __post_init__(self):
        object.__setattr__(self, "psi", tuple(float(v) for v in self.psi))
        if not np.all(np.isfinite([self.alpha0, self.alpha1, *self.psi])):
            raise FitError("logistic coefficients are not finite")

    @property
    def p(self) -> int:
        return len(self.psi)

    @property
    def coef(self) -> np.ndarray:
        return np.array([self.alpha0, self.alpha1, *self.psi])

    @classmethod
    def from_coef(cls, coef, **kw) -> "LogisticModel":
        coef = np.asarray(coef, dtype=float)
        return cls(float(coef[0]), float(coef[1]), tuple(coef[2:]), **kw)

    def confounder_score(self, codes: np.ndarray) -> np.ndarray:
        """``psi . c`` for each packed code; summed in fixed bit order."""
        codes = np.asarray(codes, dtype=np.int64)
        out = np.zeros(codes.shape, dtype=float)
        for j, w in enumerate(self.psi):
            out += w * ((codes >> j) & 1)
        return out

    def predict(self, x: int, codes: np.ndarray) -> np.ndarray:
        """Vectorized :func:`predict_cell` over packed codes for one arm."""
        return expit(self.alpha0 + self.alpha1 * x + self.confounder_score(codes))


def predict_cell(m: LogisticModel, key: tuple[int, int]) -> float:
    """Model probability for cell ``(x, c)``."""
    x, code = key
    if code < 0 or code >= (1 << m.p):
        raise ValueError(f"code {code} out of range for p={m.p}")
    return float(m.predict(x, np.array([code]))[0])


def design_matrix(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    c = np.asarray(c, dtype=float)
    return np.hstack([np.ones_like(x), x, c])


def _penalized_loglik(X, w, q, beta, ridge):
    eta = X @ beta
    ll = np.sum(w * (q * log_expit(eta) + (1.0 - q) * log_expit(-eta)))
    return ll - 0.5 * ridge * beta @ beta


def _irls(X, w, q, opts: FitOptions):
    """Maximize the ridge-penalized Bernoulli log-likelihood.

    Returns ``(coef, iterations)`` or raises FitError. Converged when the
    largest absolute component of the penalized score is below tolerance;
    without a ridge the Newton step must also be below ``STEP_TOL``, since
    under separation the score vanishes while the coefficients still diverge.
    The final Newton step is applied as a polish.
    """
    k = X.shape[1]
    beta = np.zeros(k)
    ridge = opts.ridge
    ll = _penalized_loglik(X, w, q, beta, ridge)
    eye = np.eye(k)
    for it in range(opts.max_iterations + 1):
        pi = expit(X @ beta)
        score = X.T @ (w * (q - pi)) - ridge * beta
        hess = (X * (w * pi * (1.0 - pi))[:, None]).T @ X + ridge * eye
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            raise FitError("singular information matrix") from None
        if not np.all(np.isfinite(step)):
            raise FitError("non-finite Newton step")
        if np.max(np.abs(score)) < opts.tolerance and (ridge > 0 or np.max(np.abs(step)) < STEP_TOL):
            cand = beta + step
            if _penalized_loglik(X, w, q, cand, ridge) >= ll:
                beta = cand
            return beta, it
        if it == opts.max_iterations:
            break
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            cand_ll = _penalized_loglik(X, w, q, cand, ridge)
            if cand_ll >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            raise FitError("step halving failed to improve the likelihood")
        beta, ll = cand, cand_ll
    raise FitError(f"IRLS did not converge in {opts.max_iterations} iterations "
                   f"(max |score| = {np.max(np.abs(score)):.3g}, max |step| = {np.max(np.abs(step)):.3g})")


def _fit(X, w, q, opts: FitOptions) -> LogisticModel:
    try:
        if opts.ridge == 0 and np.linalg.matrix_rank(X[w > 0]) < X.shape[1]:
            raise FitError("design matrix is rank deficient")
        coef, its = _irls(X, w, q, opts)
        return LogisticModel.from_coef(coef, ridge=opts.ridge, iterations=its)
    except FitError as err:
        if opts.ridge > 0:
            raise
        log.info("unpenalized fit failed (%s); retrying with ridge=%g", err, RIDGE_RETRY)
    retry = FitOptions(opts.max_iterations, opts.tolerance, RIDGE_RETRY)
    coef, its = _irls(X, w, q, retry)
    return LogisticModel.from_coef(coef, ridge=RIDGE_RETRY, iterations=its)


def fit_main_effects(d: BinaryDataset, opts: FitOptions | None = None) -> LogisticModel:
    """Fit the main-effects logistic model to the raw rows of ``d``."""
    opts = opts or FitOptions()
    if d.n == 0:
        raise ValueError("cannot fit an empty dataset")
    X = design_matrix(d.x, d.c)
    return _fit(X, np.ones(d.n), d.y.astype(float), opts)


def fit_weighted(
    cells: Sequence[tuple[tuple[int, int], float, float]] | None = None,
    opts: FitOptions | None = None,
    *,
    p: int | None = None,
    x: np.ndarray | None = None,
    codes: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    q: np.ndarray | None = None,
) -> LogisticModel:
    """Maximize ``sum w * [q log pi + (1-q) log(1-pi)]`` over cells.

    ``cells`` is a sequence of ``((x, code), weight, q)``. For large cell sets
    pass the arrays ``x, codes, weights, q`` (and ``p``) directly instead.
    """
    opts = opts or FitOptions()
    if cells is not None:
        keys = [k for k, _, _ in cells]
        x = np.array([k[0] for k in keys], dtype=float)
        codes = np.array([k[1] for k in keys], dtype=np.int64)
        weights = np.array([w for _, w, _ in cells], dtype=float)
        q = np.array([v for _, _, v in cells], dtype=float)
    if p is None:
        if codes is None or len(codes) == 0:
            raise ValueError("p is required")
        p = max(1, int(np.max(codes)).bit_length())
    weights = np.asarray(weights, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any(weights < 0) or not weights.sum() > 0:
        raise ValueError("weights must be non-negative with a positive sum")
    if np.any((q < 0) | (q > 1)):
        raise ValueError("fractional outcomes must lie in [0, 1]")
    codes = np.asarray(codes, dtype=np.int64)
    c = ((codes[:, None] >> np.arange(p, dtype=np.int64)) & 1).astype(float)
    X = design_matrix(x, c)
    return _fit(X, weights, q, opts)
