"""Replicate simulations, RMSE / bias / timing tables and output writers."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from html import escape
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from . import approx
from .data import BinaryDataset, CellTable, Hyperparams, default_b, default_hyperparams, tabulate
from .dgp import DgpSpec, simulate_dataset, true_att
from .parametric import FitOptions, LogisticModel, fit_main_effects
from .posterior import (
    DEFAULT_DRAWS,
    METHODS,
    EffectEstimate,
    bsat_posterior,
    dirichlet_posterior,
    parametric_effect,
    psm_posterior,
    sample_effect,
)
from .streams import RandomStream

log = logging.getLogger(__name__)

CSV_HEADER = ("method", "n", "replicate", "estimate", "truth", "sq_error", "seconds")
DEFAULT_R_SIZE = 1000


@dataclass(frozen=True)
class Settings:
    """Resolved hyperparameters for one estimate; ``None`` means the default."""

    b: float | None = None
    phi: float | None = None
    epsilon: float | None = None

    def resolve(self, t: CellTable) -> Hyperparams:
        phi, eps = default_hyperparams(t.n, t.p)
        return Hyperparams(
            phi=phi if self.phi is None else self.phi,
            epsilon=eps if self.epsilon is None else self.epsilon,
            b=default_b(t) if self.b is None else self.b,
        )


def estimate_effect(
    d: BinaryDataset,
    method: str,
    *,
    estimand: str = "ATT",
    settings: Settings = Settings(),
    draws: int = DEFAULT_DRAWS,
    r_size: int = DEFAULT_R_SIZE,
    rng: RandomStream | int = 0,
    workers: int = 1,
    closed_form: bool = True,
    model: LogisticModel | None = None,
    table: CellTable | None = None,
) -> EffectEstimate:
    """Apply one method to a dataset.

    PSM-CLT falls back to the full PSM when no code is missing, and
    PSM-Random does so when ``|M0| <= r_size``; the fallback is recorded in
    ``diagnostics["promoted"]``.
    """
    method = canonical_method(method)
    stream = rng if isinstance(rng, RandomStream) else RandomStream(int(rng))
    t = table if table is not None else tabulate(d)
    h = settings.resolve(t)
    gp = dirichlet_posterior(t, h.epsilon, estimand)
    if method == "BSAT":
        op = bsat_posterior(t, h.phi)
        est = sample_effect(op, gp, draws, stream, workers, closed_form)
        est.method = "BSAT"
        return est
    g = model if model is not None else fit_main_effects(d, FitOptions())
    if method == "Parametric":
        return parametric_effect(t, g, estimand)
    op = psm_posterior(t, g, h)
    promoted = None
    if method == "PSM-CLT":
        if t.m0_size > 0:
            return approx.sample_effect_clt(op, gp, t, draws, stream, workers)
        promoted = "no missing cells; full PSM used"
    elif method == "PSM-Random":
        if t.m0_size > r_size:
            ms = approx.sample_missing_cells(t, r_size, stream.spawn(99), h.epsilon)
            return approx.sample_effect_random(op, gp, t, ms, draws, stream, workers)
        promoted = f"|M0| = {t.m0_size} <= r_size = {r_size}; full PSM used"
    est = sample_effect(op, gp, draws, stream, workers, closed_form)
    if promoted:
        est.diagnostics["promoted"] = promoted
        est.method = method
    return est


_ALIASES = {m.lower(): m for m in METHODS}
_ALIASES.update({"psm-sample": "PSM-Random", "psm_clt": "PSM-CLT", "psm_random": "PSM-Random"})


def canonical_method(name: str) -> str:
    try:
        return _ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}") from None


@dataclass
class Scenario:
    spec: DgpSpec
    n_grid: Sequence[int] = (100,)
    methods: Sequence[str] = ("BSAT", "PSM")
    replicates: int = 10
    draws: int = DEFAULT_DRAWS
    r_size: int = DEFAULT_R_SIZE
    seed: int = 0
    settings: Settings = field(default_factory=Settings)

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not self.methods:
            raise ValueError("at least one method is required")
        self.methods = tuple(canonical_method(m) for m in self.methods)


@dataclass(frozen=True)
class ResultRow:
    method: str
    n: int
    replicate: int
    estimate: float
    truth: float
    sq_error: float
    seconds: float


def run_scenario(s: Scenario, workers: int = 1, failures: list | None = None) -> list[ResultRow]:
    """Simulate, estimate and score every (n, replicate, method).

    Replicate ``r`` at sample size ``n`` uses substream ``(n, r)`` of the
    master seed; method ``m`` samples from its own child of that substream,
    so adding or dropping methods leaves the others unchanged. Timing covers
    the main-effects fit (for methods that use it) plus posterior
    construction and sampling.
    """
    spec = s.spec.resolved()
    truth = true_att(spec)
    master = RandomStream(s.seed)
    rows = []
    for n in s.n_grid:
        for rep in range(s.replicates):
            stream = master.spawn(n, rep)
            try:
                d = simulate_dataset(spec, n, stream.spawn(0))
                t = tabulate(d)
                g, fit_seconds = None, 0.0
                if any(m != "BSAT" for m in s.methods):
                    t0 = time.perf_counter()
                    g = fit_main_effects(d)
                    fit_seconds = time.perf_counter() - t0
            except Exception as err:  # recorded, never fatal
                log.warning("n=%d replicate=%d: data step failed: %s", n, rep, err)
                if failures is not None:
                    failures.append((None, n, rep, repr(err)))
                continue
            for method in s.methods:
                t0 = time.perf_counter()
                try:
                    est = estimate_effect(
                        d, method, settings=s.settings, draws=s.draws, r_size=s.r_size,
                        rng=stream.spawn(1 + METHODS.index(method)), workers=workers,
                        closed_form=False, model=g, table=t,
                    )
                except Exception as err:
                    log.warning("n=%d replicate=%d %s failed: %s", n, rep, method, err)
                    if failures is not None:
                        failures.append((method, n, rep, repr(err)))
                    continue
                seconds = time.perf_counter() - t0 + (fit_seconds if method != "BSAT" else 0.0)
                err = est.mean - truth
                rows.append(ResultRow(method, n, rep, est.mean, truth, err * err, seconds))
    return rows


@dataclass(frozen=True)
class Summary:
    method: str
    n: int
    rmse: float
    bias: float
    seconds: float
    count: int


def aggregate(rows: Iterable[ResultRow]) -> list[Summary]:
    """RMSE, mean bias and mean seconds per (method, n), in a fixed order.

    Sums use ``math.fsum`` so the result does not depend on row order.
    """
    groups: dict[tuple[str, int], list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.method, r.n), []).append(r)
    if not groups:
        raise ValueError("no rows to aggregate")
    order = {m: i for i, m in enumerate(METHODS)}
    out = []
    for (method, n) in sorted(groups, key=lambda k: (k[1], order.get(k[0], len(order)), k[0])):
        rs = groups[(method, n)]
        k = len(rs)
        out.append(Summary(
            method=method, n=n,
            rmse=math.sqrt(math.fsum(r.sq_error for r in rs) / k),
            bias=math.fsum(r.estimate - r.truth for r in rs) / k,
            seconds=math.fsum(r.seconds for r in rs) / k,
            count=k,
        ))
    return out


def read_rows(source: IO[str] | str) -> list[ResultRow]:
    """Parse a result CSV (e.g. to merge estimates from an external method)."""
    text = source if isinstance(source, str) else source.read()
    reader = csv.DictReader(io.StringIO(text))
    return [
        ResultRow(r["method"], int(r["n"]), int(r["replicate"]), float(r["estimate"]),
                  float(r["truth"]), float(r["sq_error"]), float(r["seconds"]))
        for r in reader
    ]


# ----------------------------------------------------------------------------
# writers


def rows_to_csv(rows: Iterable[ResultRow]) -> str:
    lines = [",".join(CSV_HEADER)]
    for r in rows:
        lines.append(",".join([r.method, str(r.n), str(r.replicate), repr(float(r.estimate)),
                               repr(float(r.truth)), repr(float(r.sq_error)),
                               repr(float(r.seconds))]))
    return "\n".join(lines) + "\n"


def summary_text(table: Sequence[Summary], title: str | None = None) -> str:
    head = f"{'method':<12} {'n':>7} {'RMSE':>8} {'bias':>8} {'seconds':>9} {'reps':>5}"
    lines = [title] if title else []
    lines += [head, "-" * len(head)]
    for s in table:
        lines.append(f"{s.method:<12} {s.n:>7d} {s.rmse:>8.4f} {s.bias:>+8.4f} "
                     f"{s.seconds:>9.4f} {s.count:>5d}")
    return "\n".join(lines) + "\n"


def svg_histogram(draws: np.ndarray, truth: float | None = None, bins: int = 50,
                  title: str = "posterior draws", width: int = 640, height: int = 400) -> str:
    """Histogram of draws with an optional vertical line at the truth."""
    draws = np.asarray(draws, dtype=float)
    pad_l, pad_r, pad_t, pad_b = 50, 20, 30, 40
    lo = float(draws.min()) if draws.size else -1.0
    hi = float(draws.max()) if draws.size else 1.0
    if truth is not None:
        lo, hi = min(lo, truth), max(hi, truth)
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(draws, bins=bins, range=(lo, hi))
    top = max(int(counts.max()) if counts.size else 1, 1)
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(v):
        return pad_l + (v - lo) / (hi - lo) * pw

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    for c, a, b in zip(counts, edges[:-1], edges[1:]):
        h = c / top * ph
        parts.append(f'<rect x="{sx(a):.2f}" y="{pad_t + ph - h:.2f}" width="{max(sx(b) - sx(a) - 0.5, 0.1):.2f}" '
                     f'height="{h:.2f}" fill="steelblue"/>')
    y0 = pad_t + ph
    parts.append(f'<line x1="{pad_l}" y1="{y0}" x2="{pad_l + pw}" y2="{y0}" stroke="black"/>')
    for v in np.linspace(lo, hi, 5):
        parts.append(f'<text x="{sx(v):.2f}" y="{y0 + 16}" text-anchor="middle" font-size="11">{v:.3f}</text>')
    if truth is not None:
        parts.append(f'<line x1="{sx(truth):.2f}" y1="{pad_t}" x2="{sx(truth):.2f}" y2="{y0}" '
                     f'stroke="red" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit(obj, format: str, sink: IO | str | Path | None = None, **kw) -> bytes:
    """Render rows, a summary table or posterior draws and optionally write them.

    ``csv`` takes ResultRows (or a BinaryDataset), ``text-summary`` takes
    rows or Summary records, ``svg-histogram`` takes draws (or an
    EffectEstimate) plus ``truth=`` and ``title=`` keywords.
    """
    if format == "csv":
        if isinstance(obj, BinaryDataset):
            from .data import to_csv
            text = to_csv(obj)
        else:
            text = rows_to_csv(obj)
    elif format == "text-summary":
        obj = list(obj)
        table = obj if obj and isinstance(obj[0], Summary) else aggregate(obj)
        text = summary_text(table, kw.get("title"))
    elif format == "svg-histogram":
        draws = obj.draws if isinstance(obj, EffectEstimate) else obj
        text = svg_histogram(draws, **kw)
    else:
        raise ValueError(f"unknown format {format!r}")
    payload = text.encode("utf-8")
    if sink is None:
        return payload
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(payload)
    elif isinstance(sink, io.TextIOBase):
        sink.write(text)
    else:
        sink.write(payload)
    return payload
