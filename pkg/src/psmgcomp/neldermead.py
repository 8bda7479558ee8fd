"""Nelder-Mead downhill simplex minimizer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class NelderMeadOptions:
    reflection: float = 1.0
    expansion: float = 2.0
    contraction: float = 0.5
    shrink: float = 0.5
    initial_step: float = 0.5
    xatol: float = 1e-8
    ftarget: float | None = 1e-10
    max_iterations: int = 2000


@dataclass(frozen=True)
class NelderMeadResult:
    x: np.ndarray
    fun: float
    iterations: int
    evaluations: int
    converged: bool


def nelder_mead(
    objective: Callable[[np.ndarray], float],
    start,
    options: NelderMeadOptions | None = None,
) -> NelderMeadResult:
    """Minimize ``objective`` from ``start``.

    Stops when the simplex diameter drops below ``xatol``, the best value
    drops below ``ftarget``, or after ``max_iterations`` (then flagged as not
    converged and the best vertex is returned).
    """
    o = options or NelderMeadOptions()
    x0 = np.asarray(start, dtype=float)
    dim = x0.size
    evals = 0

    def f(x):
        nonlocal evals
        evals += 1
        v = float(objective(x))
        return v if np.isfinite(v) else np.inf

    simplex = np.vstack([x0] + [x0 + o.initial_step * e for e in np.eye(dim)])
    values = np.array([f(v) for v in simplex])
    if not np.isfinite(values[0]):
        raise ValueError("objective is not finite at the start point")

    it = 0
    converged = False
    while True:
        order = np.argsort(values, kind="stable")
        simplex, values = simplex[order], values[order]
        diameter = max(np.max(np.abs(v - simplex[0])) for v in simplex[1:])
        if (o.ftarget is not None and values[0] < o.ftarget) or diameter < o.xatol:
            converged = True
            break
        if it >= o.max_iterations:
            break
        it += 1

        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + o.reflection * (centroid - worst)
        fr = f(xr)
        if fr < values[0]:
            xe = centroid + o.expansion * (xr - centroid)
            fe = f(xe)
            if fe < fr:
                simplex[-1], values[-1] = xe, fe
            else:
                simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-2]:
            simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-1]:
            xc = centroid + o.contraction * (xr - centroid)
            fc = f(xc)
            if fc <= fr:
                simplex[-1], values[-1] = xc, fc
                continue
        else:
            xc = centroid + o.contraction * (worst - centroid)
            fc = f(xc)
            if fc < values[-1]:
                simplex[-1], values[-1] = xc, fc
                continue
        best = simplex[0]
        for i in range(1, dim + 1):
            simplex[i] = best + o.shrink * (simplex[i] - best)
            values[i] = f(simplex[i])

    return NelderMeadResult(simplex[0].copy(), float(values[0]), it, evals, converged)
